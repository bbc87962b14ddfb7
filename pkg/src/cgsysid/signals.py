"""Range-constrained excitation signals for training data."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import lfilter

from .volterra import SignalSeries

DEFAULT_RATE = 750.0


def white_noise(length: int, sigma: float = 1.0, seed: int = 0,
                sample_rate: float = DEFAULT_RATE) -> SignalSeries:
    if length < 0 or sigma < 0:
        raise ValueError("need length >= 0 and sigma >= 0")
    rng = np.random.default_rng(seed)
    return SignalSeries(sigma * rng.standard_normal(length), sample_rate)


def lowpass_noise(length: int, cutoff_fraction: float = 0.05, seed: int = 0,
                  sample_rate: float = DEFAULT_RATE) -> SignalSeries:
    """White noise through a single-pole low-pass, rescaled to unit std.

    ``cutoff_fraction`` is the -3 dB frequency in cycles per sample.  A
    burn-in prefix is discarded so the output starts in steady state.
    """
    if length < 0:
        raise ValueError("length must be >= 0")
    if not 0 < cutoff_fraction <= 0.5:
        raise ValueError(f"cutoff_fraction must lie in (0, 0.5], got {cutoff_fraction}")
    pole = math.exp(-2.0 * math.pi * cutoff_fraction)
    burn = int(math.ceil(20.0 / (1.0 - pole)))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(length + burn)
    y = lfilter([1.0 - pole], [1.0, -pole], x)[burn:]
    if length > 1:
        y = y / y.std()
    return SignalSeries(y, sample_rate)


def clip(signal: SignalSeries, lo: float, hi: float) -> SignalSeries:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    return SignalSeries(np.clip(signal.samples, lo, hi), signal.sample_rate)


def excitation(length: int, seed: int = 0, lo: float = 0.0, hi: float = 1.5,
               cutoff_fraction: float = 0.05, spread: float = 2.0,
               sample_rate: float = DEFAULT_RATE) -> SignalSeries:
    """Default filament drive: low-pass noise mapped so that ``+-spread``
    standard deviations span ``[lo, hi]``, then clipped to that range."""
    z = lowpass_noise(length, cutoff_fraction, seed, sample_rate)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    scaled = SignalSeries(mid + half / spread * z.samples, sample_rate)
    return clip(scaled, lo, hi)
