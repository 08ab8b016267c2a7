"""Balanced-epoch training with augmentation, Adam and early stopping."""

from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import autograd as ag
from .audio_io import OTHER, AudioClip, DatasetManifest, ManifestEntry, fit_to_duration, load_wav
from .autograd import Tensor
from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from .features import AugmentationConfig, augment, log_mel
from .models import Model, load_weights, save_weights

logger = logging.getLogger(__name__)

LOSS_FOR_HEAD = {
    "multiclass": "categorical_ce",
    "multiclass_plus_other": "categorical_ce",
    "multilabel": "binary_ce",
}


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    loss: str | None = None  # derived from the model head when None
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    samples_per_class_per_epoch: int = 32
    clip_s: float = 10.0

    def __post_init__(self):
        if not 1e-5 <= self.lr <= 1e-3:
            logger.warning("lr %g outside the usual [1e-5, 1e-3] range", self.lr)
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch norm)")
        if self.max_epochs < 1 or self.patience < 1 or self.samples_per_class_per_epoch < 1:
            raise ConfigurationError("max_epochs, patience and samples_per_class_per_epoch must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_err: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self):
        return len(self.epochs)


# ---------------------------------------------------------------------------
# losses


def categorical_ce(logits: Tensor, target) -> Tensor:
    """Mean negative log-softmax of the target class, via log-sum-exp."""
    target = np.asarray(target, dtype=np.int64)
    n, k = logits.shape
    if target.shape != (n,) or target.min() < 0 or target.max() >= k:
        raise InvalidInputError(f"targets must be {n} class indices in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsumexp - z[rows, target])

    def backward(g):
        p = ag.softmax_np(logits.data, axis=1)
        p[rows, target] -= 1.0
        return (p * (g / n),)

    return ag._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "categorical_ce")


def binary_ce(logits: Tensor, targets) -> Tensor:
    """Mean over all N*L elements of BCE-with-logits; all-zero target rows are allowed."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise InvalidInputError(f"targets {y.shape} do not match logits {logits.shape}")
    x = logits.data
    # max(x, 0) - x*y + log(1 + exp(-|x|))
    elem = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    count = x.size

    def backward(g):
        return ((expit(x) - y) * (g / count),)

    return ag._make(np.asarray(elem.mean(), dtype=logits.dtype), (logits,), backward, "binary_ce")


def multilabel_targets(labels: Sequence[int], num_languages: int) -> np.ndarray:
    """One-hot rows; non-target samples (``OTHER``) get the all-zero row."""
    y = np.zeros((len(labels), num_languages), dtype=np.float32)
    for i, label in enumerate(labels):
        if label != OTHER:
            y[i, label] = 1.0
    return y


def class_indices(labels: Sequence[int], head: str, num_languages: int) -> np.ndarray:
    out = []
    for label in labels:
        if label == OTHER:
            if head != "multiclass_plus_other":
                raise InvalidInputError(f"head {head!r} has no unit for non-target samples")
            out.append(num_languages)
        else:
            out.append(label)
    return np.asarray(out, dtype=np.int64)


def compute_loss(model: Model, logits: Tensor, labels: Sequence[int], loss: str) -> Tensor:
    L = model.config.num_languages
    if loss == "binary_ce":
        return binary_ce(logits, multilabel_targets(labels, L))
    return categorical_ce(logits, class_indices(labels, model.head, L))


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; parameters without a gradient are treated as zero-grad."""
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / c1
        v_hat = p.adam_v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# epoch construction


def epoch_classes(manifest: DatasetManifest, head: str) -> list[int]:
    classes = list(range(manifest.num_languages))
    if head != "multiclass":
        classes.append(OTHER)
    return classes


def balanced_epoch(manifest: DatasetManifest, samples_per_class: int, rng: np.random.Generator,
                   classes: Sequence[int] | None = None) -> list[ManifestEntry]:
    """Exactly ``samples_per_class`` entries per class, shuffled.

    Every file of a class is used once before any is repeated; the
    remainder is drawn without replacement from the class pool.
    """
    groups = manifest.by_class()
    if classes is None:
        classes = sorted(groups, key=lambda c: (c == OTHER, c))
    picked: list[ManifestEntry] = []
    for c in classes:
        pool = groups.get(c)
        if not pool:
            name = "other" if c == OTHER else manifest.languages[c]
            raise ConfigurationError(f"class {name!r} has no entries in the training manifest")
        full, rest = divmod(samples_per_class, len(pool))
        idx = np.concatenate([np.tile(np.arange(len(pool)), full),
                              rng.choice(len(pool), size=rest, replace=False)]).astype(int)
        picked.extend(pool[i] for i in idx)
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


def batches(items: list, batch_size: int) -> list[list]:
    out = [items[i:i + batch_size] for i in range(0, len(items), batch_size)]
    # batch norm needs two samples; fold a lone tail into the previous batch
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


# ---------------------------------------------------------------------------
# training loop


class ClipCache:
    """Loads each audio file once."""

    def __init__(self, loader: Callable[[Path], AudioClip] = load_wav):
        self.loader = loader
        self._clips: dict[Path, AudioClip] = {}

    def __call__(self, path) -> AudioClip:
        path = Path(path)
        clip = self._clips.get(path)
        if clip is None:
            clip = self._clips[path] = self.loader(path)
        return clip


def features_batch(clips: Sequence[AudioClip], dtype=np.float32) -> np.ndarray:
    """Stack log-mels of equal-length clips into ``[N, 64, T]``."""
    return np.stack([log_mel(c).T for c in clips]).astype(dtype)


def prepare_train_batch(entries, cache: ClipCache, cfg: TrainConfig, rng) -> tuple[np.ndarray, list[int]]:
    clips = []
    for e in entries:
        clip = augment(cache(e.path), cfg.augmentation, rng)
        clips.append(fit_to_duration(clip, cfg.clip_s, "random", rng))
    return features_batch(clips), [e.label for e in entries]


def validate(model: Model, entries: Sequence[ManifestEntry], cache: ClipCache, cfg: TrainConfig,
             loss: str) -> tuple[float, float]:
    """Validation (loss, err) on center-fitted clips without augmentation."""
    from .inference import decide

    model.eval()
    total, correct, count = 0.0, 0, 0
    with ag.no_grad():
        for chunk in batches(list(entries), cfg.batch_size):
            x = features_batch([fit_to_duration(cache(e.path), cfg.clip_s) for e in chunk])
            labels = [e.label for e in chunk]
            logits = model(x)
            total += compute_loss(model, logits, labels, loss).item() * len(chunk)
            acts = activations_from_logits(logits.data, model.head)
            for a, label in zip(acts, labels):
                correct += decide(a, model.head).outcome == label
            count += len(chunk)
    model.train()
    if count == 0:
        return math.nan, math.nan
    return total / count, 100.0 * (1.0 - correct / count)


def activations_from_logits(logits: np.ndarray, head: str) -> np.ndarray:
    if head == "multilabel":
        return expit(logits)
    return ag.softmax_np(logits, axis=-1)


def train(model: Model, train_manifest: DatasetManifest, val_manifest: DatasetManifest,
          cfg: TrainConfig, cache: ClipCache | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Model, TrainHistory]:
    """Train ``model`` in place and return it restored to its best-validation-loss epoch."""
    loss_name = cfg.loss or LOSS_FOR_HEAD[model.head]
    if loss_name != LOSS_FOR_HEAD[model.head]:
        raise ConfigurationError(f"loss {loss_name!r} does not match head {model.head!r}")
    if train_manifest.num_languages != model.config.num_languages:
        raise ConfigurationError(
            f"manifest has {train_manifest.num_languages} languages, model expects {model.config.num_languages}")
    cache = cache or ClipCache()
    rng = np.random.default_rng(cfg.seed)
    classes = epoch_classes(train_manifest, model.head)
    val_entries = [e for e in val_manifest
                   if e.label != OTHER or model.head != "multiclass"]
    if not val_entries:
        raise InvalidInputError("validation manifest has no usable entries")
    history = TrainHistory()
    best_loss = math.inf
    stale = 0
    step = 0
    params = model.parameters()
    model.train()
    with tempfile.TemporaryDirectory(prefix="lightslr-ckpt-") as tmp:
        ckpt_dir = Path(tmp)
        for epoch in range(1, cfg.max_epochs + 1):
            entries = balanced_epoch(train_manifest, cfg.samples_per_class_per_epoch, rng, classes)
            running = 0.0
            for b, chunk in enumerate(batches(entries, cfg.batch_size)):
                x, labels = prepare_train_batch(chunk, cache, cfg, rng)
                model.zero_grad()
                try:
                    logits = model(x)
                    loss = compute_loss(model, logits, labels, loss_name)
                except FloatingPointError as exc:
                    raise TrainingDivergedError(
                        f"non-finite values at epoch {epoch}, batch {b}, lr {cfg.lr}: {exc}") from exc
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}, lr {cfg.lr}")
                loss.backward()
                step += 1
                adam_step(params, cfg.lr, step)
                running += loss.item() * len(chunk)
            val_loss, val_err = validate(model, val_entries, cache, cfg, loss_name)
            record = EpochRecord(epoch, running / len(entries), val_loss, val_err)
            history.epochs.append(record)
            save_weights(model, ckpt_dir / f"epoch{epoch:03d}.slrw")
            logger.info("epoch %d train_loss %.4f val_loss %.4f val_err %.2f",
                        epoch, record.train_loss, val_loss, val_err)
            if on_epoch is not None:
                on_epoch(record)
            if val_loss < best_loss:
                best_loss, history.best_epoch, stale = val_loss, epoch, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        best = load_weights(ckpt_dir / f"epoch{history.best_epoch:03d}.slrw")
    model.load_state(best.state())
    model.eval()
    return model, history
