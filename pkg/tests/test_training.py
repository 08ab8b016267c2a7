from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import log_softmax

from lightslr import autograd as ag
from lightslr import training
from lightslr.audio_io import OTHER, AudioClip, DatasetManifest, ManifestEntry
from lightslr.autograd import Parameter, Tensor
from lightslr.errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from lightslr.features import AugmentationConfig
from lightslr.models import ModelConfig, build_model
from lightslr.training import (ClipCache, TrainConfig, adam_step, balanced_epoch, batches, binary_ce,
                               categorical_ce, class_indices, multilabel_targets, train)

from gradcheck import check_gradients

SR = 16000


# -- losses ------------------------------------------------------------------

def test_categorical_ce_uniform_logits():
    loss = categorical_ce(Tensor(np.zeros((4, 7))), [0, 3, 6, 2])
    assert loss.item() == pytest.approx(np.log(7))


def test_categorical_ce_matches_log_softmax():
    z = np.random.default_rng(0).standard_normal((5, 4)) * 3
    t = np.array([1, 0, 3, 3, 2])
    expected = -np.mean(log_softmax(z, axis=1)[np.arange(5), t])
    assert categorical_ce(Tensor(z), t).item() == pytest.approx(expected, rel=1e-12)


def test_categorical_ce_extreme_logits_finite():
    z = np.array([[1000.0, -1000.0], [-1000.0, 1000.0]])
    assert categorical_ce(Tensor(z), [0, 1]).item() == pytest.approx(0.0, abs=1e-12)
    assert categorical_ce(Tensor(z), [1, 0]).item() == pytest.approx(2000.0)


def test_binary_ce_matches_direct_formula():
    x = np.random.default_rng(1).standard_normal((3, 4)) * 2
    y = np.array([[1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0]], float)
    p = 1 / (1 + np.exp(-x))
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert binary_ce(Tensor(x), y).item() == pytest.approx(expected, rel=1e-12)


def test_binary_ce_large_logits_stable():
    assert binary_ce(Tensor(np.array([[100.0]])), [[0.0]]).item() == pytest.approx(100.0)
    assert binary_ce(Tensor(np.array([[100.0]])), [[1.0]]).item() == pytest.approx(0.0, abs=1e-30)


def test_loss_gradients():
    rng = np.random.default_rng(2)
    z = Parameter(rng.standard_normal((4, 3)))
    assert check_gradients(lambda: categorical_ce(z, [0, 2, 1, 2]), [z]) < 1e-6
    y = multilabel_targets([0, OTHER, 2, 1], 3)
    assert check_gradients(lambda: binary_ce(z, y), [z]) < 1e-6


def test_targets_for_other():
    y = multilabel_targets([1, OTHER, 0], 3)
    np.testing.assert_array_equal(y, [[0, 1, 0], [0, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(class_indices([1, OTHER], "multiclass_plus_other", 3), [1, 3])
    with pytest.raises(InvalidInputError):
        class_indices([OTHER], "multiclass", 3)


def test_loss_target_validation():
    with pytest.raises(InvalidInputError):
        categorical_ce(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(InvalidInputError):
        binary_ce(Tensor(np.zeros((2, 3))), np.zeros((2, 2)))


# -- optimizer ---------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 1e-3])
    adam_step([p], lr=0.01, t=1)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-7)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(3)
    grads = rng.standard_normal((3, 5))
    p = Parameter(np.zeros(5))
    theta, m, v = np.zeros(5), np.zeros(5), np.zeros(5)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-3
    for t, g in enumerate(grads, start=1):
        p.grad = g
        adam_step([p], lr, t)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p.data, theta, rtol=1e-12)


# -- epoch construction ------------------------------------------------------

def toy_manifest(sizes, languages=("aa", "bb", "cc")):
    entries = []
    for label, n in sizes.items():
        entries += [ManifestEntry(Path(f"{label}_{i}.wav"), label) for i in range(n)]
    return DatasetManifest(entries, list(languages))


def test_balanced_epoch_counts():
    man = toy_manifest({0: 3, 1: 40, 2: 7, OTHER: 5})
    epoch = balanced_epoch(man, 10, np.random.default_rng(0), [0, 1, 2, OTHER])
    assert len(epoch) == 40
    assert Counter(e.label for e in epoch) == {0: 10, 1: 10, 2: 10, OTHER: 10}


def test_small_class_uses_every_file_before_repeating():
    man = toy_manifest({0: 3, 1: 4, 2: 4})
    epoch = balanced_epoch(man, 7, np.random.default_rng(1))
    uses = Counter(e.path for e in epoch if e.label == 0)
    assert sorted(uses.values()) == [2, 2, 3]


def test_missing_class_rejected():
    man = toy_manifest({0: 3, 1: 4, 2: 4})
    with pytest.raises(ConfigurationError, match="other"):
        balanced_epoch(man, 5, np.random.default_rng(0), [0, 1, 2, OTHER])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=2, max_size=5), st.integers(1, 50), st.integers(0, 1000))
def test_balanced_epoch_property(sizes, spc, seed):
    man = toy_manifest(dict(enumerate(sizes)), [f"l{i}" for i in range(len(sizes))])
    epoch = balanced_epoch(man, spc, np.random.default_rng(seed))
    counts = Counter(e.label for e in epoch)
    assert all(counts[c] == spc for c in range(len(sizes)))
    for c, n in enumerate(sizes):
        uses = Counter(e.path for e in epoch if e.label == c)
        assert max(uses.values()) - min(uses.values()) <= 1
        assert len(uses) == min(n, spc)
    again = balanced_epoch(man, spc, np.random.default_rng(seed))
    assert [e.path for e in again] == [e.path for e in epoch]


def test_batches_fold_singleton_tail():
    assert [len(b) for b in batches(list(range(9)), 4)] == [4, 5]
    assert [len(b) for b in batches(list(range(8)), 4)] == [4, 4]


# -- training loop -----------------------------------------------------------

def tone(freq, seconds, rng):
    t = np.arange(int(seconds * SR)) / SR
    x = 0.4 * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return AudioClip(x + 0.01 * rng.standard_normal(len(t)))


def separable_task(n_per_class=6, seconds=0.6, seed=0):
    """Two tone 'languages' and a noise non-target class, held in memory."""
    rng = np.random.default_rng(seed)
    clips, entries = {}, []
    for label, make in ((0, lambda: tone(400, seconds, rng)), (1, lambda: tone(2500, seconds, rng)),
                        (OTHER, lambda: AudioClip(0.2 * rng.standard_normal(int(seconds * SR))))):
        for i in range(n_per_class):
            path = Path(f"/mem/{label}_{i}.wav")
            clips[path] = make()
            entries.append(ManifestEntry(path, label))
    man = DatasetManifest(entries, ["low", "high"])
    return man, ClipCache(loader=lambda p: clips[Path(p)])


def toy_config(**kw):
    base = dict(lr=1e-3, batch_size=8, max_epochs=4, patience=10, samples_per_class_per_epoch=8,
                clip_s=0.5, augmentation=AugmentationConfig.disabled(), seed=0)
    base.update(kw)
    return TrainConfig(**base)


def toy_model(head="multilabel", seed=0):
    return build_model(ModelConfig("tc_resnet14", 2, head=head, width_multiplier=0.5, seed=seed))


def test_toy_task_is_learned():
    man, cache = separable_task()
    cfg = toy_config(max_epochs=8, samples_per_class_per_epoch=16)
    model, history = train(toy_model("multiclass_plus_other"), man, man, cfg, cache)
    assert history.epochs[-1].train_loss < history.epochs[0].train_loss
    assert min(r.val_err for r in history.epochs) == 0.0
    assert not model.training


def test_training_is_deterministic():
    man, cache = separable_task()
    a, _ = train(toy_model(), man, man, toy_config(max_epochs=2), cache)
    b, _ = train(toy_model(), man, man, toy_config(max_epochs=2), cache)
    for (name, x), (_, y) in zip(a.state().items(), b.state().items()):
        np.testing.assert_array_equal(x, y, err_msg=name)


def test_early_stopping_restores_best(monkeypatch):
    man, cache = separable_task(n_per_class=3)
    scripted = iter([5.0, 4.0, 3.0, 3.5, 3.6, 3.7, 1.0, 1.0])
    snapshots = {}

    def fake_validate(model, entries, cache_, cfg, loss):
        value = next(scripted)
        snapshots[len(snapshots) + 1] = {k: v.copy() for k, v in model.state().items()}
        return value, 50.0

    monkeypatch.setattr(training, "validate", fake_validate)
    model, history = train(toy_model(), man, man, toy_config(max_epochs=8, patience=3), cache)
    assert len(history) == 6
    assert history.best_epoch == 3
    for name, value in model.state().items():
        np.testing.assert_array_equal(value, snapshots[3][name], err_msg=name)


def test_multilabel_other_activations_fall():
    """Steps on all-zero targets push every sigmoid output down."""
    man, cache = separable_task(n_per_class=4)
    others = DatasetManifest([e for e in man if e.label == OTHER], man.languages)
    model = toy_model()
    x = training.features_batch([cache(e.path) for e in others])
    # batch statistics throughout: running statistics of an untrained net are meaningless
    with ag.no_grad():
        before = training.activations_from_logits(model(x).data, "multilabel")
    for t in range(1, 4):
        model.zero_grad()
        training.compute_loss(model, model(x), [OTHER] * len(others), "binary_ce").backward()
        adam_step(model.parameters(), 1e-3, t)
    with ag.no_grad():
        after = training.activations_from_logits(model(x).data, "multilabel")
    assert np.all(after.mean(axis=0) < before.mean(axis=0))


def test_one_step_decreases_batch_loss():
    man, cache = separable_task(n_per_class=4)
    model = toy_model(head="multiclass_plus_other")
    x = training.features_batch([cache(e.path) for e in man])
    labels = [e.label for e in man]
    model.zero_grad()
    loss0 = training.compute_loss(model, model(x), labels, "categorical_ce")
    loss0.backward()
    adam_step(model.parameters(), 1e-4, 1)
    loss1 = training.compute_loss(model, model(x), labels, "categorical_ce")
    assert loss1.item() < loss0.item()


def test_loss_head_mismatch_rejected():
    man, cache = separable_task(n_per_class=2)
    with pytest.raises(ConfigurationError):
        train(toy_model(), man, man, toy_config(loss="categorical_ce"), cache)


def test_language_count_mismatch_rejected():
    man, cache = separable_task(n_per_class=2)
    model = build_model(ModelConfig("tc_resnet14", 5, width_multiplier=0.5))
    with pytest.raises(ConfigurationError):
        train(model, man, man, toy_config(), cache)


def test_divergence_reports_position(monkeypatch):
    man, cache = separable_task(n_per_class=2)

    def explode(*args):
        raise FloatingPointError("overflow")

    monkeypatch.setattr(training, "compute_loss", explode)
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train(toy_model(), man, man, toy_config(), cache)


def test_batch_size_one_rejected():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1)
