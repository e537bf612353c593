"""Kolmogorov-Smirnov statistics used as deterministic acceptance gates."""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ks_statistic",
    "ks_two_sample",
    "ks_threshold_one_sample",
    "ks_threshold_two_sample",
]


def _ks_coefficient(alpha: float) -> float:
    # inverse of the asymptotic Kolmogorov tail: P(D > c/sqrt(n)) ~ 2 exp(-2 c^2)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return math.sqrt(-0.5 * math.log(alpha / 2.0))


def ks_statistic(samples: np.ndarray, cdf) -> float:
    """One-sample KS statistic sup_x |F_emp(x) - F(x)| against a callable CDF."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = len(xs)
    if n == 0:
        raise ValueError("need at least one sample")
    f = np.asarray(cdf(xs), dtype=float)
    up = np.arange(1, n + 1) / n - f
    down = f - np.arange(0, n) / n
    return float(max(np.max(up), np.max(down)))


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample KS statistic sup_x |F_a(x) - F_b(x)|."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("need samples on both sides")
    both = np.concatenate([a, b])
    fa = np.searchsorted(a, both, side="right") / len(a)
    fb = np.searchsorted(b, both, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def ks_threshold_one_sample(n: int, alpha: float = 0.01) -> float:
    """Asymptotic critical value of the one-sample statistic at level alpha."""
    return _ks_coefficient(alpha) / math.sqrt(n)


def ks_threshold_two_sample(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic critical value of the two-sample statistic at level alpha."""
    return _ks_coefficient(alpha) * math.sqrt((n + m) / (n * m))
