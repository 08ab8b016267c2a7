"""Clip-level prediction: sliding windows, activation averaging and the decision rules."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .audio_io import OTHER, AudioClip, DatasetManifest, fit_to_duration, load_wav
from .errors import InvalidInputError, SLRError, UsageError
from .models import Model
from .training import activations_from_logits, features_batch

THRESHOLD = 0.5


@dataclass(frozen=True)
class Decision:
    outcome: int  # language index, or OTHER
    activations: np.ndarray
    head: str

    @property
    def is_other(self) -> bool:
        return self.outcome == OTHER

    def label(self, languages: Sequence[str] | None = None) -> str:
        if self.is_other:
            return "other"
        return languages[self.outcome] if languages else str(self.outcome)


def decide(activations, head: str, threshold: float = THRESHOLD) -> Decision:
    """Turn averaged activations into a verdict.

    Multilabel heads return the argmax language when its activation is at
    least ``threshold`` and Other otherwise. Multiclass heads always return
    the argmax; on a ``multiclass_plus_other`` head the last unit means Other.
    Ties go to the lowest index.
    """
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise InvalidInputError("decide needs a non-empty 1D activation vector")
    best = int(np.argmax(a))
    if head == "multilabel":
        outcome = best if a[best] >= threshold else OTHER
    elif head == "multiclass_plus_other":
        outcome = OTHER if best == a.size - 1 else best
    elif head == "multiclass":
        outcome = best
    else:
        raise InvalidInputError(f"unknown head {head!r}")
    return Decision(outcome, a, head)


def window_offsets(n_samples: int, window: int, hop: int) -> list[int]:
    """Start offsets of full windows every ``hop``; a final window flush with the end covers any tail."""
    if n_samples <= window:
        return [0]
    offsets = list(range(0, n_samples - window + 1, hop))
    if offsets[-1] + window < n_samples:
        offsets.append(n_samples - window)
    return offsets


def clip_windows(clip: AudioClip, window_s: float = 10.0, hop_s: float = 5.0) -> list[AudioClip]:
    window = int(round(window_s * clip.sample_rate))
    hop = int(round(hop_s * clip.sample_rate))
    if len(clip) < window:
        return [fit_to_duration(clip, window_s, "center")]
    return [AudioClip(clip.samples[o:o + window], clip.sample_rate)
            for o in window_offsets(len(clip), window, hop)]


def window_activations(model: Model, windows: Sequence[AudioClip]) -> np.ndarray:
    """Post-nonlinearity activations, one row per window."""
    if model.training:
        raise UsageError("prediction requires an eval-mode model")
    with ag.no_grad():
        logits = model(features_batch(windows, model.dtype))
    return activations_from_logits(logits.data.astype(np.float64), model.head)


def predict_clip(model: Model, clip: AudioClip, threshold: float = THRESHOLD,
                 window_s: float = 10.0, hop_s: float = 5.0) -> Decision:
    acts = window_activations(model, clip_windows(clip, window_s, hop_s))
    return decide(acts.mean(axis=0), model.head, threshold)


@dataclass(frozen=True)
class PredictionRecord:
    path: Path
    decision: Decision | None
    error: str | None = None


def predict_batch(model: Model, manifest: DatasetManifest, workers: int = 1,
                  threshold: float = THRESHOLD, loader: Callable = load_wav,
                  window_s: float = 10.0, hop_s: float = 5.0) -> list[PredictionRecord]:
    """Predict every manifest entry in order; per-file failures become error records."""

    def one(entry):
        try:
            return PredictionRecord(entry.path, predict_clip(model, loader(entry.path), threshold,
                                                             window_s, hop_s))
        except (SLRError, OSError) as exc:
            return PredictionRecord(entry.path, None, f"{type(exc).__name__}: {exc}")

    entries = list(manifest)
    if workers <= 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, entries))


def format_prediction(record: PredictionRecord, languages: Sequence[str] | None = None) -> str:
    if record.decision is None:
        return f"{record.path}\terror\t{record.error}"
    acts = ",".join(f"{a:.6f}" for a in record.decision.activations)
    return f"{record.path}\t{record.decision.label(languages)}\t{acts}"
