"""Regenerates the reference values under tests/fixtures.

Every number here comes from an independent library (mpmath, librosa,
scikit-image, scipy), never from the C++ code under test.

    python3 tests/oracles/make_fixtures.py
"""

import json
import pathlib

import librosa
import mpmath
import numpy as np
import scipy.linalg
import scipy.stats
from skimage.metrics import structural_similarity

OUT = pathlib.Path(__file__).resolve().parent.parent / "fixtures"


def dump(name, payload):
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / name, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")


def schedule():
    mpmath.mp.dps = 50
    T = 1000
    lo, hi = mpmath.mpf("1e-4"), mpmath.mpf("0.02")
    prod = mpmath.mpf(1)
    picks = {1, 2, 10, 100, 250, 500, 999, 1000}
    alpha_bar = {}
    for i in range(T):
        beta = lo + (hi - lo) * i / (T - 1)
        prod *= 1 - beta
        if i + 1 in picks:
            alpha_bar[str(i + 1)] = float(prod)
    dump("schedule.json", {"T": T, "beta_start": 1e-4, "beta_end": 0.02, "alpha_bar": alpha_bar})


def mel():
    sr, n_fft, hop = 16000, 800, 200
    rng = np.random.default_rng(5)
    t = np.arange(4000) / sr
    wave = (0.4 * np.sin(2 * np.pi * 440 * t) + 0.2 * np.sin(2 * np.pi * 1250 * t + 0.3)
            + 0.05 * rng.standard_normal(t.size)) * np.linspace(0.2, 1.0, t.size)
    wave = wave.astype(np.float32)
    spec = librosa.feature.melspectrogram(
        y=wave, sr=sr, n_fft=n_fft, hop_length=hop, win_length=n_fft, window="hann",
        center=True, pad_mode="constant", power=1.0, n_mels=80, fmin=55.0, fmax=7600.0,
        htk=False, norm="slaney")
    log_mel = np.log10(np.maximum(spec, 1e-5)).T

    tone = np.sin(2 * np.pi * 440 * np.arange(sr) / sr).astype(np.float32)
    tone_spec = librosa.feature.melspectrogram(
        y=tone, sr=sr, n_fft=n_fft, hop_length=hop, win_length=n_fft, window="hann",
        center=True, pad_mode="constant", power=1.0, n_mels=80, fmin=55.0, fmax=7600.0)
    tone_bins = np.argmax(tone_spec[:, 2:-2], axis=0)
    dump("mel.json", {
        "samples": wave.tolist(),
        "log_mel": log_mel.tolist(),
        "tone_440_bin": int(np.bincount(tone_bins).argmax()),
        "one_second_frames": int(tone_spec.shape[1]),
    })


def ssim():
    rng = np.random.default_rng(11)
    a = rng.uniform(0, 1, size=(24, 28, 3))
    b = np.clip(a + 0.15 * rng.standard_normal(a.shape), 0, 1)
    value = structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
                                  sigma=1.5, use_sample_covariance=False)
    to_chw = lambda x: (x * 2 - 1).transpose(2, 0, 1).tolist()
    dump("ssim.json", {"a": to_chw(a), "b": to_chw(b), "ssim": float(value)})


def frechet():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((64, 6)) @ rng.standard_normal((6, 6))
    b = rng.standard_normal((48, 6)) @ rng.standard_normal((6, 6)) + 0.7
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b).real
    value = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * covmean)
    dump("frechet.json", {"a": a.tolist(), "b": b.tolist(), "distance": float(value)})


def chi_square():
    dump("chi_square.json", {"bins": 10, "alpha": 0.01,
                             "critical": float(scipy.stats.chi2.ppf(0.99, 9))})


if __name__ == "__main__":
    schedule()
    mel()
    ssim()
    frechet()
    chi_square()
