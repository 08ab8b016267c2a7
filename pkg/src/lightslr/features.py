"""Log-mel front-end and training-time waveform augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import SAMPLE_RATE, AudioClip
from .errors import ConfigurationError, FormatError, InvalidInputError

N_MELS = 64
N_FFT = 1024  # 64 ms
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filters spanning 0 Hz to Nyquist, shape ``(n_mels, n_fft // 2 + 1)``."""
    if n_mels < 1:
        raise ConfigurationError("n_mels must be >= 1")
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ConfigurationError(f"n_fft must be a power of two, got {n_fft}")
    return _filterbank(n_mels, n_fft, sample_rate).copy()


@lru_cache(maxsize=8)
def _filterbank(n_mels, n_fft, sample_rate):
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(
            f"n_mels={n_mels} too large for n_fft={n_fft}: filter {empty[0]} covers no FFT bin"
        )
    fb.setflags(write=False)
    return fb


def filter_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


@lru_cache(maxsize=1)
def _hann(n):
    # periodic window
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def frame_signal(samples: np.ndarray) -> np.ndarray:
    """Centered 400-sample frames at a 160-sample hop, shape ``(T, 400)``.

    The signal is reflection-padded by ``N_FFT // 2`` on each side and frame
    ``t`` is centered on original sample ``t * HOP_LENGTH``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < HOP_LENGTH:
        raise InvalidInputError(f"clip shorter than one hop ({HOP_LENGTH} samples)")
    pad = N_FFT // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = x.shape[0] // HOP_LENGTH + 1
    offset = pad - WIN_LENGTH // 2
    windows = np.lib.stride_tricks.sliding_window_view(padded[offset:], WIN_LENGTH)
    return windows[: n_frames * HOP_LENGTH : HOP_LENGTH]


def power_spectrum(samples: np.ndarray) -> np.ndarray:
    """Hann-windowed frames zero-padded to ``N_FFT`` points, ``|rfft|**2``, shape ``(T, N_FFT//2+1)``."""
    frames = frame_signal(samples) * _hann(WIN_LENGTH)
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    return spec.real**2 + spec.imag**2


def log_mel(clip: AudioClip) -> np.ndarray:
    """Natural-log mel energies of ``clip``, shape ``(T, 64)`` with ``T = len // 160 + 1``."""
    if clip.sample_rate != SAMPLE_RATE:
        raise InvalidInputError(f"expected {SAMPLE_RATE} Hz audio")
    mel = power_spectrum(clip.samples) @ _filterbank(N_MELS, N_FFT, SAMPLE_RATE).T
    return np.log(np.maximum(mel, LOG_FLOOR))


# ---------------------------------------------------------------------------
# spectrogram files

_SPEC_MAGIC = b"SLRF"
_SPEC_VERSION = 1


def save_spectrogram(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    t, f = values.shape
    with open(path, "wb") as fh:
        fh.write(_SPEC_MAGIC + struct.pack("<HII", _SPEC_VERSION, t, f))
        fh.write(np.ascontiguousarray(values).tobytes())


def load_spectrogram(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _SPEC_MAGIC or len(raw) < 14:
        raise FormatError(f"{path}: not a spectrogram file")
    version, t, f = struct.unpack_from("<HII", raw, 4)
    if version != _SPEC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[14:]
    if len(payload) != 4 * t * f:
        raise FormatError(f"{path}: expected {4 * t * f} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, f).copy()


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    noise_snr_db_range: tuple[float, float] = (5.0, 30.0)
    reverb_decay_s_range: tuple[float, float] = (0.1, 0.5)
    eq_gain_db_range: tuple[float, float] = (-6.0, 6.0)
    eq_bands: int = 8
    p_noise: float = 0.5
    p_reverb: float = 0.5
    p_eq: float = 0.5

    def __post_init__(self):
        for name in ("noise_snr_db_range", "reverb_decay_s_range", "eq_gain_db_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: min {lo} > max {hi}")
        if self.reverb_decay_s_range[0] <= 0:
            raise ConfigurationError("reverb decay must be positive")
        for name in ("p_noise", "p_reverb", "p_eq"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        if self.eq_bands < 1:
            raise ConfigurationError("eq_bands must be >= 1")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(p_noise=0.0, p_reverb=0.0, p_eq=0.0)


def add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise whose power sits ``snr_db`` below the power of ``x``."""
    power = float(np.mean(x**2))
    if power == 0.0:
        return x.copy()
    noise = rng.standard_normal(x.shape[0])
    noise *= np.sqrt(power / 10.0 ** (snr_db / 10.0) / np.mean(noise**2))
    return x + noise


def reverb_impulse_response(decay_s: float, rng: np.random.Generator,
                            sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying noise tail; ``decay_s`` is the time to fall by 60 dB."""
    n = max(1, int(decay_s * sample_rate))
    t = np.arange(n) / sample_rate
    ir = rng.standard_normal(n) * np.exp(-np.log(1000.0) * t / decay_s)
    ir[0] = 1.0
    return ir / np.sqrt(np.sum(ir**2))


def add_reverb(x: np.ndarray, decay_s: float, rng: np.random.Generator) -> np.ndarray:
    wet = fftconvolve(x, reverb_impulse_response(decay_s, rng))[: x.shape[0]]
    # keep the loudness of the dry signal
    dry_rms = np.sqrt(np.mean(x**2))
    wet_rms = np.sqrt(np.mean(wet**2))
    return wet * (dry_rms / wet_rms) if wet_rms > 0 else wet


def random_eq(x: np.ndarray, gains_db: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Apply a cascade of log-spaced bell-shaped gain stages in the frequency domain."""
    n = x.shape[0]
    spec = np.fft.rfft(x)
    freqs = np.maximum(np.fft.rfftfreq(n, 1.0 / sample_rate), 1.0)
    centers = np.geomspace(100.0, 0.8 * sample_rate / 2, len(gains_db))
    width = np.log2(centers[-1] / centers[0]) / max(len(gains_db) - 1, 1) if len(gains_db) > 1 else 1.0
    octaves = np.log2(freqs[None, :] / centers[:, None]) / width
    total_db = np.sum(np.asarray(gains_db)[:, None] * np.exp(-0.5 * octaves**2), axis=0)
    return np.fft.irfft(spec * 10.0 ** (total_db / 20.0), n=n)


def augment(clip: AudioClip, cfg: AugmentationConfig, rng: np.random.Generator) -> AudioClip:
    """Randomly apply noise, reverb and EQ (each with its own probability) to ``clip``.

    The result has the input's length and is scaled down if its peak exceeds 1.
    """
    if len(clip) == 0:
        raise InvalidInputError("cannot augment an empty clip")
    # draw every decision up front so the random stream does not depend on
    # which transforms fire
    use_noise, use_reverb, use_eq = rng.random(3) < (cfg.p_noise, cfg.p_reverb, cfg.p_eq)
    snr = rng.uniform(*cfg.noise_snr_db_range)
    decay = rng.uniform(*cfg.reverb_decay_s_range)
    gains = rng.uniform(*cfg.eq_gain_db_range, size=cfg.eq_bands)
    x = clip.samples
    if not (use_noise or use_reverb or use_eq):
        return clip
    x = x.astype(np.float64, copy=True)
    if use_reverb:
        x = add_reverb(x, decay, rng)
    if use_eq:
        x = random_eq(x, gains, clip.sample_rate)
    if use_noise:
        x = add_noise(x, snr, rng)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x /= peak
    return AudioClip(x, clip.sample_rate)
