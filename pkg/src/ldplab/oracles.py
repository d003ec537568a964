"""Closed-form and brute-force references.

Nothing here imports the production stepper or estimators; the point of an
oracle is that it shares no numerical kernel with what it checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaincinv

__all__ = ["gaussian_sup_tail", "linear_rate", "ScalarSDE", "BruteForceResult", "brute_force_tail"]


def _upper_normal(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def gaussian_sup_tail(b: float, big_t: float, a: float) -> float:
    """``P(sup_{[0, T]} |b W_t| >= a)`` by the reflection series.

    ``4 sum_k (-1)^k Q((2k + 1) c)`` with ``c = a / (|b| sqrt T)`` and Q the
    standard normal upper tail, truncated once terms drop below 1e-14.
    """
    if not a > 0:
        raise ValueError("threshold a must be positive")
    if b == 0:
        raise ValueError("b must be nonzero")
    if not big_t > 0:
        raise ValueError("horizon must be positive")
    c = a / (abs(b) * math.sqrt(big_t))
    if c < 0.3:
        # the alternating series converges slowly here; use the complementary
        # series for the probability of staying inside the strip
        stay = 0.0
        for k in range(200):
            term = (4.0 / math.pi) * ((-1) ** k) / (2 * k + 1) * math.exp(-((2 * k + 1) ** 2) * math.pi ** 2 / (8.0 * c * c))
            stay += term
            if abs(term) < 1e-16:
                break
        return min(1.0, max(0.0, 1.0 - stay))
    total = 0.0
    k = 0
    while True:
        term = _upper_normal((2 * k + 1) * c)
        total += term if k % 2 == 0 else -term
        if term < 1e-14:
            break
        k += 1
    return min(1.0, 4.0 * total)


def linear_rate(b, x, y, big_t: float) -> float:
    """``|B^{-1}(y - x)|^2 / (2T)`` for a scalar or diagonal constant B."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(b == 0):
        raise ValueError("b is singular")
    if not big_t > 0:
        raise ValueError("horizon must be positive")
    return float(np.sum(((y - x) / b) ** 2) / (2.0 * big_t))


@dataclass(frozen=True)
class ScalarSDE:
    """``dY = -eps rate Y dt + sqrt(eps) b (Y if multiplicative else 1) dW``."""

    x0: float = 0.0
    b: float = 1.0
    rate: float = 0.0
    multiplicative: bool = False
    horizon: float = 1.0


@dataclass(frozen=True)
class BruteForceResult:
    n_paths: int
    n_hits: int
    p_hat: float
    ci_95: tuple[float, float]
    standard_error: float


def _exact_binomial_ci(k: int, n: int) -> tuple[float, float]:
    lo = 0.0 if k == 0 else float(betaincinv(k, n - k + 1, 0.025))
    hi = 1.0 if k == n else float(betaincinv(k + 1, n - k, 0.975))
    return lo, hi


def brute_force_tail(sde: ScalarSDE, epsilon: float, delta: float, fine_dt: float, n_paths: int, seed: int,
                     batch: int = 20000) -> BruteForceResult:
    """Plain Euler estimate of ``P(sup_t (Y_t - x0)^2 > delta)`` on a fine grid."""
    if not fine_dt > 0 or not n_paths >= 1 or not 0 < epsilon <= 1:
        raise ValueError("invalid brute-force parameters")
    n_steps = int(round(sde.horizon / fine_dt))
    rng = np.random.default_rng(seed)
    hits = 0
    sq = math.sqrt(epsilon * fine_dt)
    done = 0
    while done < n_paths:
        nb = min(batch, n_paths - done)
        y = np.full(nb, float(sde.x0))
        worst = np.zeros(nb)
        for _ in range(n_steps):
            z = rng.standard_normal(nb)
            diff = sde.b * (y if sde.multiplicative else 1.0)
            y = y - epsilon * sde.rate * y * fine_dt + sq * diff * z
            np.maximum(worst, (y - sde.x0) ** 2, out=worst)
        hits += int(np.count_nonzero(worst > delta))
        done += nb
    p = hits / n_paths
    return BruteForceResult(n_paths, hits, p, _exact_binomial_ci(hits, n_paths), math.sqrt(p * (1 - p) / n_paths))
