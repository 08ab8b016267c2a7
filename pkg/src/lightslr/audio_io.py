"""Audio ingestion: WAV I/O, fixed-duration clip fitting and dataset manifests."""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import FormatError, InvalidInputError, UnsupportedInputError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
OTHER = -1
"""Label / outcome value for any non-target language."""

OTHER_LABEL = "other"


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedInputError(
                f"sample_rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}"
            )
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise UnsupportedInputError(f"expected mono samples, got shape {samples.shape}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("audio samples must be finite")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def load_wav(path) -> AudioClip:
    """Read a mono 16 kHz WAV file (PCM s16le or f32le) into an :class:`AudioClip`.

    16-bit samples are divided by 32768 so the result lies in [-1, 1).
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV file ({exc})") from exc
    if data.ndim != 1:
        raise UnsupportedInputError(f"{path}: channels must be 1, got {data.shape[1]}")
    if rate != SAMPLE_RATE:
        raise UnsupportedInputError(f"{path}: sample_rate must be {SAMPLE_RATE}, got {rate}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedInputError(
            f"{path}: sample format must be 16-bit PCM or 32-bit float, got {data.dtype}"
        )
    if samples.size == 0:
        raise FormatError(f"{path}: no audio frames")
    return AudioClip(samples)


def write_wav(path, clip: AudioClip, fmt: str = "s16") -> None:
    """Write ``clip`` as a mono WAV file, ``fmt`` is ``"s16"`` or ``"f32"``."""
    if fmt == "s16":
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    elif fmt == "f32":
        data = clip.samples.astype("<f4")
    else:
        raise ValueError(f"unknown sample format {fmt!r}")
    wavfile.write(Path(path), clip.sample_rate, data)


def fit_to_duration(clip: AudioClip, target_s: float = CLIP_SECONDS,
                    mode: str = "center", rng: np.random.Generator | None = None) -> AudioClip:
    """Pad or crop ``clip`` to exactly ``target_s`` seconds.

    Shorter clips are centered between zero pads (the left pad gets the
    smaller half of an odd pad count). Longer clips are center-cropped in
    ``"center"`` mode, or cut at a uniformly random offset drawn from ``rng``
    in ``"random"`` mode.
    """
    if target_s <= 0:
        raise InvalidInputError(f"target_s must be positive, got {target_s}")
    if mode not in ("center", "random"):
        raise InvalidInputError(f"mode must be 'center' or 'random', got {mode!r}")
    n = len(clip)
    if n == 0:
        raise InvalidInputError("cannot fit an empty clip")
    target = int(round(target_s * clip.sample_rate))
    x = clip.samples
    if n == target:
        return clip
    if n < target:
        pad = target - n
        left = pad // 2
        out = np.zeros(target, dtype=x.dtype)
        out[left:left + n] = x
        return AudioClip(out, clip.sample_rate)
    excess = n - target
    if mode == "center":
        start = excess // 2
    else:
        if rng is None:
            raise InvalidInputError("random mode requires a generator")
        start = int(rng.integers(0, excess + 1))
    return AudioClip(x[start:start + target].copy(), clip.sample_rate)


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int  # target-language index, or OTHER


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    languages: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def num_languages(self) -> int:
        return len(self.languages)

    def by_class(self) -> dict[int, list[ManifestEntry]]:
        groups: dict[int, list[ManifestEntry]] = {}
        for e in self.entries:
            groups.setdefault(e.label, []).append(e)
        return groups

    def targets_only(self) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.label != OTHER], list(self.languages))

    def validate_training(self) -> None:
        present = {e.label for e in self.entries}
        missing = [self.languages[i] for i in range(len(self.languages)) if i not in present]
        if missing:
            raise InvalidInputError(f"training manifest has no entries for: {', '.join(missing)}")


def parse_label(token: str, languages: Sequence[str]) -> int:
    if token == OTHER_LABEL:
        return OTHER
    try:
        return list(languages).index(token)
    except ValueError:
        raise InvalidInputError(f"unknown label {token!r}") from None


def read_manifest(path, languages: Sequence[str]) -> DatasetManifest:
    """Parse a ``<path>\\t<label>`` manifest; relative audio paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected '<path>\\t<label>'")
            audio, token = parts[0], parts[1].strip()
            try:
                label = parse_label(token, languages)
            except InvalidInputError as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
            audio_path = Path(audio)
            if not audio_path.is_absolute():
                audio_path = base / audio_path
            entries.append(ManifestEntry(audio_path, label))
    if not entries:
        warnings.warn(f"manifest {path} is empty", stacklevel=2)
    dupes = [p for p, c in Counter(e.path for e in entries).items() if c > 1]
    if dupes:
        logger.info("%s: %d duplicate audio paths", path, len(dupes))
    return DatasetManifest(entries, list(languages))


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            token = OTHER_LABEL if e.label == OTHER else manifest.languages[e.label]
            try:
                rel = e.path.relative_to(path.parent)
            except ValueError:
                rel = e.path
            fh.write(f"{rel.as_posix()}\t{token}\n")
