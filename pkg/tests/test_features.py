import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lightslr.audio_io import AudioClip
from lightslr.errors import ConfigurationError, FormatError, InvalidInputError
from lightslr.features import (AugmentationConfig, add_noise, augment, filter_centers, frame_signal,
                               load_spectrogram, log_mel, mel_filterbank, power_spectrum,
                               save_spectrogram)

SR = 16000


def naive_log_mel(x):
    """O(T * n_fft^2) reference: explicit framing loop and a direct DFT matrix."""
    n_fft, win, hop = 1024, 400, 160
    padded = np.pad(x, n_fft // 2, mode="reflect")
    n_frames = len(x) // hop + 1
    window = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / win) for i in range(win)])
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    dft = np.exp(-2j * np.pi * k * n / n_fft)
    fb = mel_filterbank()
    out = np.zeros((n_frames, 64))
    for t in range(n_frames):
        start = t * hop + n_fft // 2 - win // 2
        frame = np.zeros(n_fft)
        frame[:win] = padded[start:start + win] * window
        power = np.abs(dft @ frame) ** 2
        out[t] = np.log(np.maximum(fb @ power, 1e-10))
    return out


def brute_force_filter(index, n_mels=64, n_fft=1024, sr=SR):
    mel_max = 2595 * math.log10(1 + (sr / 2) / 700)
    edges_mel = [mel_max * i / (n_mels + 1) for i in range(n_mels + 2)]
    edges = [700 * (10 ** (m / 2595) - 1) for m in edges_mel]
    lo, c, hi = edges[index], edges[index + 1], edges[index + 2]
    weights = []
    for b in range(n_fft // 2 + 1):
        f = b * sr / n_fft
        if lo < f <= c:
            weights.append((f - lo) / (c - lo))
        elif c < f < hi:
            weights.append((hi - f) / (hi - c))
        else:
            weights.append(0.0)
    return np.array(weights)


# -- filterbank --------------------------------------------------------------

def test_filterbank_shape_and_positivity():
    fb = mel_filterbank()
    assert fb.shape == (64, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)


def test_filter_centers_increase():
    peaks = mel_filterbank().argmax(axis=1)
    assert np.all(np.diff(filter_centers()) > 0)
    assert np.all(np.diff(peaks) >= 0)


@pytest.mark.parametrize("row", [0, 1, 31, 63])
def test_filter_rows_match_brute_force(row):
    fb = mel_filterbank()
    oracle = brute_force_filter(row)
    assert fb[row].argmax() == oracle.argmax()
    assert fb[row].max() == pytest.approx(oracle.max(), abs=1e-12)
    np.testing.assert_allclose(fb[row], oracle, atol=1e-12)


def test_filterbank_configuration_errors():
    with pytest.raises(ConfigurationError):
        mel_filterbank(n_mels=200, n_fft=256)
    with pytest.raises(ConfigurationError):
        mel_filterbank(n_fft=1000)


# -- log-mel -----------------------------------------------------------------

def test_silence_hits_floor():
    lm = log_mel(AudioClip(np.zeros(160000)))
    assert lm.shape == (1001, 64)
    assert np.all(lm == np.log(1e-10))


@pytest.mark.parametrize("n", [160, 8000, 16001, 160000])
def test_frame_count(n):
    assert log_mel(AudioClip(np.zeros(n))).shape == (n // 160 + 1, 64)


def test_too_short():
    with pytest.raises(InvalidInputError):
        log_mel(AudioClip(np.zeros(100)))


def test_sine_peaks_in_nearest_filter():
    t = np.arange(SR * 2) / SR
    lm = log_mel(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t)))
    # expected bin from the brute-force filter definitions
    peaks_hz = [brute_force_filter(i).argmax() * SR / 1024 for i in range(64)]
    expected = int(np.argmin(np.abs(np.array(peaks_hz) - 1000)))
    assert np.all(lm[3:-3].argmax(axis=1) == expected)


def test_matches_naive_dft():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 8000)
    np.testing.assert_allclose(log_mel(AudioClip(x)), naive_log_mel(x), rtol=0, atol=1e-6)


def test_parseval_per_frame():
    x = np.random.default_rng(1).uniform(-1, 1, 4000)
    frames = frame_signal(x) * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400))
    p = power_spectrum(x)
    energy_from_spectrum = (p[:, 0] + 2 * p[:, 1:-1].sum(axis=1) + p[:, -1]) / 1024
    np.testing.assert_allclose(energy_from_spectrum, (frames**2).sum(axis=1), rtol=1e-6)


def test_doubling_amplitude_adds_log4():
    x = np.random.default_rng(2).uniform(-0.4, 0.4, 8000)
    a, b = log_mel(AudioClip(x)), log_mel(AudioClip(2 * x))
    live = a > np.log(1e-10) + 2
    np.testing.assert_allclose((b - a)[live], np.log(4.0), atol=1e-9)


# -- spectrogram files -------------------------------------------------------

def test_spectrogram_roundtrip(tmp_path):
    values = np.random.default_rng(3).standard_normal((17, 64)).astype(np.float32)
    save_spectrogram(tmp_path / "x.slrf", values)
    raw = (tmp_path / "x.slrf").read_bytes()
    assert raw[:4] == b"SLRF" and len(raw) == 4 + 2 + 4 + 4 + 17 * 64 * 4
    np.testing.assert_array_equal(load_spectrogram(tmp_path / "x.slrf"), values)


def test_spectrogram_truncated(tmp_path):
    save_spectrogram(tmp_path / "x.slrf", np.zeros((3, 64)))
    (tmp_path / "y.slrf").write_bytes((tmp_path / "x.slrf").read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_spectrogram(tmp_path / "y.slrf")


# -- augmentation ------------------------------------------------------------

def sine(amplitude=0.5, n=SR):
    return amplitude * np.sin(2 * np.pi * 300 * np.arange(n) / SR)


def test_all_probabilities_zero_is_identity():
    clip = AudioClip(sine())
    out = augment(clip, AugmentationConfig.disabled(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.samples, clip.samples)


def test_noise_snr_unit_power_sine():
    x = sine(np.sqrt(2.0))  # unit power
    y = add_noise(x, 20.0, np.random.default_rng(0))
    snr = 10 * np.log10(np.mean(x**2) / np.mean((y - x) ** 2))
    assert abs(snr - 20.0) <= 0.5


def test_augment_noise_only_snr():
    cfg = AugmentationConfig(noise_snr_db_range=(20.0, 20.0), p_noise=1.0, p_reverb=0.0, p_eq=0.0)
    x = sine(0.5)
    y = augment(AudioClip(x), cfg, np.random.default_rng(1)).samples
    snr = 10 * np.log10(np.mean(x**2) / np.mean((y - x) ** 2))
    assert abs(snr - 20.0) <= 0.5


def test_augment_deterministic():
    clip = AudioClip(sine())
    cfg = AugmentationConfig(p_noise=1.0, p_reverb=1.0, p_eq=1.0)
    a = augment(clip, cfg, np.random.default_rng(5)).samples
    b = augment(clip, cfg, np.random.default_rng(5)).samples
    np.testing.assert_array_equal(a, b)


def test_augmentation_config_validation():
    with pytest.raises(ConfigurationError):
        AugmentationConfig(noise_snr_db_range=(30.0, 5.0))
    with pytest.raises(ConfigurationError):
        AugmentationConfig(p_eq=1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20000), st.integers(0, 2**31 - 1),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_augment_preserves_length_and_finiteness(n, seed, pn, pr, pe):
    rng = np.random.default_rng(seed)
    clip = AudioClip(rng.uniform(-1, 1, n))
    out = augment(clip, AugmentationConfig(p_noise=pn, p_reverb=pr, p_eq=pe), rng)
    assert len(out) == n
    assert np.all(np.isfinite(out.samples))
    assert np.max(np.abs(out.samples)) <= 1.0 + 1e-12
