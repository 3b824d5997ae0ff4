"""Seeded synthetic utterances with known quality labels, for desk-scale experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frontend import TARGET_RATE, Waveform

SIGNAL_RMS = 0.1


def snr_to_mos(snr_db: float) -> float:
    """Quality label as a smooth increasing function of SNR: 1 + 4 * sigmoid(0.3 * (snr - 10))."""
    return 1.0 + 4.0 / (1.0 + math.exp(-0.3 * (snr_db - 10.0)))


def tonal_signal(rng: np.random.Generator, n: int, rate: int = TARGET_RATE) -> np.ndarray:
    """Sum of 1-3 sines with slow amplitude modulation, scaled to a fixed RMS."""
    t = np.arange(n) / rate
    x = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        f = rng.uniform(150.0, 3500.0)
        am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        x += am * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x * (SIGNAL_RMS / np.sqrt(np.mean(x ** 2)))


def mix_at_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    ps = np.mean(signal ** 2)
    pn = np.mean(noise ** 2)
    return signal + noise * math.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))


@dataclass
class SyntheticClip:
    wave: Waveform
    snr_db: float
    mos: float


def snr_clip(seed: int, seconds: float = 1.0, snr_range=(-5.0, 30.0)) -> SyntheticClip:
    """A tonal clip in white noise at a seeded SNR, labelled with :func:`snr_to_mos`."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * TARGET_RATE))
    snr = float(rng.uniform(*snr_range))
    x = mix_at_snr(tonal_signal(rng, n), rng.standard_normal(n), snr)
    return SyntheticClip(Waveform(np.clip(x, -1.0, 1.0), TARGET_RATE), snr, snr_to_mos(snr))


def labelled_mixture(seed: int, mos: float, min_s: float = 1.0, max_s: float = 3.0) -> SyntheticClip:
    """Sine + noise mixture of random length with an arbitrary assigned label."""
    rng = np.random.default_rng(seed)
    n = int(round(rng.uniform(min_s, max_s) * TARGET_RATE))
    snr = float(rng.uniform(0.0, 30.0))
    x = mix_at_snr(tonal_signal(rng, n), rng.standard_normal(n), snr)
    return SyntheticClip(Waveform(np.clip(x, -1.0, 1.0), TARGET_RATE), snr, float(mos))
