"""Error rate, confusion matrices, real-time-factor timing and the synthetic open-set study."""

from __future__ import annotations

import dataclasses
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import butter, sosfilt
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .audio_io import (OTHER, SAMPLE_RATE, AudioClip, DatasetManifest, ManifestEntry, load_wav,
                       read_manifest, write_manifest, write_wav)
from .errors import InvalidInputError
from .features import log_mel
from .inference import Decision, clip_windows, decide, predict_clip
from .models import Model, ModelConfig, build_model
from .training import ClipCache, TrainConfig, TrainHistory, activations_from_logits, features_batch, train

# ---------------------------------------------------------------------------
# metrics


def _outcomes(decisions) -> np.ndarray:
    return np.asarray([d.outcome if isinstance(d, Decision) else int(d) for d in decisions])


def error_rate(decisions, labels) -> float:
    """``100 * (1 - accuracy)``; an Other prediction matches an Other label."""
    pred = _outcomes(decisions)
    true = np.asarray(labels)
    if pred.shape != true.shape or pred.size == 0:
        raise InvalidInputError("decisions and labels must be equally long and non-empty")
    return 100.0 * (1.0 - np.mean(pred == true))


def confusion_counts(decisions, labels, num_languages: int) -> np.ndarray:
    """Unnormalized ``(K+1) x (K+1)`` counts; rows are true classes, the last row/column is Other."""
    k = num_languages
    counts = np.zeros((k + 1, k + 1), dtype=np.int64)
    for p, t in zip(_outcomes(decisions), labels):
        counts[k if t == OTHER else t, k if p == OTHER else p] += 1
    return counts


def confusion_matrix(decisions, labels, num_languages: int) -> np.ndarray:
    """Row-normalized confusion matrix; rows without support stay all-zero."""
    counts = confusion_counts(decisions, labels, num_languages).astype(np.float64)
    support = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, support, out=np.zeros_like(counts), where=support > 0)


@dataclass
class EvalReport:
    err: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    counts: np.ndarray
    n_samples: int

    @property
    def empty_rows(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.counts.sum(axis=1) == 0)]

    def table(self, languages: Sequence[str]) -> str:
        names = list(languages) + ["other"]
        width = max(6, max(len(n) for n in names))
        lines = [f"err = {self.err:.2f}  (n = {self.n_samples})",
                 " " * width + " " + " ".join(f"{n:>{width}}" for n in names)]
        for name, row in zip(names, self.confusion):
            lines.append(f"{name:>{width}} " + " ".join(f"{v:>{width}.3f}" for v in row))
        return "\n".join(lines)

    def confusion_csv(self, languages: Sequence[str]) -> str:
        names = list(languages) + ["other"]
        rows = ["true\\pred," + ",".join(names)]
        for name, row in zip(names, self.confusion):
            rows.append(name + "," + ",".join(f"{v:.6f}" for v in row))
        return "\n".join(rows) + "\n"

    def record(self) -> dict:
        return {"err": self.err, "n_samples": self.n_samples,
                "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy]}


def evaluation_report(decisions, labels, num_languages: int) -> EvalReport:
    counts = confusion_counts(decisions, labels, num_languages)
    support = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(counts) / np.maximum(support, 1), np.nan)
    return EvalReport(error_rate(decisions, labels), per_class,
                      confusion_matrix(decisions, labels, num_languages), counts, int(support.sum()))


def evaluate(model: Model, manifest: DatasetManifest, threshold: float = 0.5,
             loader: Callable = load_wav, window_s: float = 10.0, hop_s: float = 5.0) -> EvalReport:
    decisions = [predict_clip(model, loader(e.path), threshold, window_s, hop_s) for e in manifest]
    return evaluation_report(decisions, [e.label for e in manifest], model.config.num_languages)


# ---------------------------------------------------------------------------
# real-time factor


@dataclass
class RtfReport:
    total_audio_s: float
    total_inference_s: float
    feature_s: float
    forward_s: float
    repetitions: int
    hardware: str

    @property
    def rtf(self) -> float:
        return self.total_audio_s / self.total_inference_s

    @property
    def forward_rtf(self) -> float:
        return self.total_audio_s / self.forward_s

    def table(self) -> str:
        return "\n".join([
            f"audio            {self.total_audio_s:10.2f} s",
            f"inference total  {self.total_inference_s:10.4f} s   rtf {self.rtf:9.1f}",
            f"  features       {self.feature_s:10.4f} s",
            f"  forward        {self.forward_s:10.4f} s   rtf {self.forward_rtf:9.1f}",
            f"repetitions      {self.repetitions:10d}   (median reported)",
            f"hardware         {self.hardware}",
        ])

    def record(self) -> dict:
        out = dataclasses.asdict(self)
        out["rtf"] = self.rtf
        return out


def hardware_note() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return f"{cpu}; single thread; numpy {np.__version__}"


def _timed_pass(model: Model, clips: Sequence[AudioClip], threshold: float) -> tuple[float, float, float]:
    feat_s = fwd_s = 0.0
    start = time.perf_counter()
    for clip in clips:
        t0 = time.perf_counter()
        x = features_batch(clip_windows(clip), model.dtype)
        t1 = time.perf_counter()
        with ag.no_grad():
            logits = model(x)
        t2 = time.perf_counter()
        decide(activations_from_logits(logits.data.astype(np.float64), model.head).mean(axis=0),
               model.head, threshold)
        feat_s += t1 - t0
        fwd_s += t2 - t1
    return time.perf_counter() - start, feat_s, fwd_s


def benchmark_rtf(model: Model, clips: Sequence[AudioClip], repetitions: int = 3, warmup: int = 1,
                  threshold: float = 0.5) -> RtfReport:
    """Median single-threaded wall time of full clip prediction over preloaded ``clips``."""
    if not clips:
        raise InvalidInputError("benchmark needs at least one clip")
    if repetitions < 1:
        raise InvalidInputError("repetitions must be >= 1")
    model.eval()
    audio_s = float(sum(c.duration for c in clips))
    runs = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            _timed_pass(model, clips, threshold)
        for _ in range(repetitions):
            runs.append(_timed_pass(model, clips, threshold))
    runs = np.asarray(runs)
    median = int(np.argsort(runs[:, 0])[len(runs) // 2])
    total, feat, fwd = runs[median]
    return RtfReport(audio_s, float(total), float(feat), float(fwd), repetitions, hardware_note())


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class Recipe:
    """Generative description of one synthetic language."""
    center_hz: float
    am_rate_hz: float


@dataclass
class SynthCorpus:
    root: Path
    languages: list[str]
    target_recipes: list[Recipe]
    nontarget_recipes: list[Recipe]
    splits: dict[str, DatasetManifest] = field(default_factory=dict)

    def __getitem__(self, split: str) -> DatasetManifest:
        return self.splits[split]


SPLITS = ("train", "val", "test_closed", "test_open")


def interleave_kinds(num_target: int, num_nontarget: int) -> list[bool]:
    """Position-ordered kinds (True = target) spreading non-targets between targets."""
    total = num_target + num_nontarget
    return [((i + 1) * num_target) // total > (i * num_target) // total for i in range(total)]


def make_recipes(num_target: int, num_nontarget: int, low_hz: float = 250.0,
                 high_hz: float = 4000.0) -> tuple[list[Recipe], list[Recipe]]:
    kinds = interleave_kinds(num_target, num_nontarget)
    n = len(kinds)
    centers = np.geomspace(low_hz, high_hz, n) if n > 1 else np.array([low_hz])
    rates = np.linspace(2.0, 8.0, n) if n > 1 else np.array([4.0])
    targets, others = [], []
    for kind, fc, rate in zip(kinds, centers, rates):
        (targets if kind else others).append(Recipe(float(fc), float(rate)))
    return targets, others


def render(recipe: Recipe, rng: np.random.Generator, duration_s: float,
           jitter_octaves: float = 0.12) -> np.ndarray:
    """One utterance: two AM-modulated band-pass noise bands plus a weak noise floor."""
    n = int(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    fc = recipe.center_hz * 2.0 ** rng.normal(0.0, jitter_octaves)
    rate = recipe.am_rate_hz * (1.0 + rng.normal(0.0, 0.1))
    out = np.zeros(n)
    for ratio, level in ((1.0, 1.0), (2.3, 0.5)):
        f = min(fc * ratio, 7000.0)
        sos = butter(4, [f * 2 ** (-1 / 6), min(f * 2 ** (1 / 6), 7900.0)], btype="bandpass",
                     fs=SAMPLE_RATE, output="sos")
        band = sosfilt(sos, rng.standard_normal(n))
        out += level * band / (np.std(band) + 1e-12)
    envelope = 1.0 + 0.8 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    out *= envelope
    out += rng.standard_normal(n) * np.std(out) * 10 ** (-rng.uniform(15, 30) / 20)
    return out / np.max(np.abs(out)) * rng.uniform(0.2, 0.8)


def synth_corpus(root, num_target: int = 5, num_nontarget: int = 5, per_class: int = 40,
                 seed: int = 0, duration_range: tuple[float, float] = (3.0, 8.0),
                 split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> SynthCorpus:
    """Write a deterministic synthetic corpus (16-bit WAVs plus TSV manifests) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    targets, others = make_recipes(num_target, num_nontarget)
    languages = [f"lang{i}" for i in range(num_target)]
    rng = np.random.default_rng(seed)
    n_train = int(round(per_class * split_fractions[0]))
    n_val = int(round(per_class * split_fractions[1]))
    entries = {s: [] for s in SPLITS}
    classes = [(i, r, f"lang{i}") for i, r in enumerate(targets)]
    classes += [(OTHER, r, f"nontarget{j}") for j, r in enumerate(others)]
    for label, recipe, name in classes:
        (root / name).mkdir(exist_ok=True)
        for k in range(per_class):
            audio = render(recipe, rng, rng.uniform(*duration_range))
            path = root / name / f"{name}_{k:03d}.wav"
            write_wav(path, AudioClip(audio))
            entry = ManifestEntry(path, label)
            if k < n_train:
                entries["train"].append(entry)
            elif k < n_train + n_val:
                entries["val"].append(entry)
            else:
                entries["test_open"].append(entry)
                if label != OTHER:
                    entries["test_closed"].append(entry)
    corpus = SynthCorpus(root, languages, targets, others)
    for split in SPLITS:
        manifest = DatasetManifest(entries[split], languages)
        write_manifest(root / f"{split}.tsv", manifest)
        corpus.splits[split] = manifest
    (root / "languages.txt").write_text("\n".join(languages) + "\n")
    return corpus


def load_corpus(root) -> SynthCorpus:
    """Reopen a corpus written by :func:`synth_corpus` (recipes are not stored)."""
    root = Path(root)
    languages = [line.strip() for line in (root / "languages.txt").read_text().splitlines() if line.strip()]
    corpus = SynthCorpus(root, languages, [], [])
    for split in SPLITS:
        corpus.splits[split] = read_manifest(root / f"{split}.tsv", languages)
    return corpus


def mean_log_mel(clip: AudioClip) -> np.ndarray:
    return log_mel(clip).mean(axis=0)


def centroid_oracle_accuracy(train_manifest: DatasetManifest, test_manifest: DatasetManifest,
                             loader: Callable = load_wav) -> float:
    """Nearest-centroid accuracy on time-averaged log-mel vectors (target classes only)."""
    feats: dict[int, list[np.ndarray]] = {}
    for e in train_manifest:
        if e.label != OTHER:
            feats.setdefault(e.label, []).append(mean_log_mel(loader(e.path)))
    labels = sorted(feats)
    centroids = np.stack([np.mean(feats[c], axis=0) for c in labels])
    hits = total = 0
    for e in test_manifest:
        if e.label == OTHER:
            continue
        v = mean_log_mel(loader(e.path))
        hits += labels[int(np.argmin(np.sum((centroids - v) ** 2, axis=1)))] == e.label
        total += 1
    return hits / total


# ---------------------------------------------------------------------------
# open-set study


@dataclass
class OpensetReport:
    architecture: str
    seed: int
    err_multiclass: float
    err_multilabel: float
    closed_err_multiclass: float
    closed_err_multilabel: float
    confusion_multiclass: np.ndarray
    confusion_multilabel: np.ndarray
    histories: dict[str, TrainHistory] = field(default_factory=dict)

    @property
    def delta(self) -> float:
        """Multilabel minus multiclass error on the open test set (negative favours multilabel)."""
        return self.err_multilabel - self.err_multiclass

    def record(self) -> dict:
        return {"architecture": self.architecture, "seed": int(self.seed),
                "err_multiclass": float(self.err_multiclass), "err_multilabel": float(self.err_multilabel),
                "delta": float(self.delta), "closed_err_multiclass": float(self.closed_err_multiclass),
                "closed_err_multilabel": float(self.closed_err_multilabel)}


def openset_experiment(architecture: str, seed: int, corpus: SynthCorpus,
                       train_cfg: TrainConfig | None = None, width_multiplier: float = 1.0,
                       cache: ClipCache | None = None) -> OpensetReport:
    """Train a multiclass+Other and a multilabel model with identical budgets and compare them."""
    train_cfg = train_cfg or TrainConfig()
    cache = cache or ClipCache()
    L = len(corpus.languages)
    results = {}
    for head in ("multiclass_plus_other", "multilabel"):
        cfg = ModelConfig(architecture, L, head=head, width_multiplier=width_multiplier, seed=seed)
        model = build_model(cfg)
        model, history = train(model, corpus["train"], corpus["val"],
                               dataclasses.replace(train_cfg, seed=seed), cache=cache)
        open_report = evaluate(model, corpus["test_open"], loader=cache)
        closed_report = evaluate(model, corpus["test_closed"], loader=cache)
        results[head] = (open_report, closed_report, history)
    mc, ml = results["multiclass_plus_other"], results["multilabel"]
    return OpensetReport(architecture, seed, mc[0].err, ml[0].err, mc[1].err, ml[1].err,
                         mc[0].confusion, ml[0].confusion,
                         {"multiclass_plus_other": mc[2], "multilabel": ml[2]})


def dump_records(records: Sequence[dict]) -> str:
    return "\n".join(json.dumps(r, sort_keys=True) for r in records)
