"""Verification harnesses: exact rank probabilities, exhaustive permutation
enumeration, Monte Carlo coverage estimation and finite-difference gradients.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from .conformal import (
    CalibrationSpec,
    apply_corrections,
    base_interval,
    inflated_quantile,
    quantile_rank,
    tail_corrections,
)
from .data import SyntheticSpec, sample_group
from .exceptions import ConfigError
from .models import TrainingMode

__all__ = [
    "CoverageEstimate",
    "TailCoverage",
    "exact_rank_coverage",
    "permutation_rank_coverage",
    "monte_carlo_coverage",
    "monte_carlo_group_coverage",
    "finite_difference_gradient",
    "normal_scores",
    "tied_scores",
]


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")


def exact_rank_coverage(m: int, alpha) -> Fraction:
    """P(test score <= inflated quantile of m calibration scores) for
    exchangeable, almost surely distinct scores: ``min(k, m + 1) / (m + 1)``."""
    _check_alpha(alpha)
    if m < 1:
        raise ConfigError("m must be at least 1")
    k = quantile_rank(m, alpha)
    return Fraction(min(k, m + 1), m + 1)


def permutation_rank_coverage(m: int, alpha: Fraction) -> Fraction:
    """Ground truth by enumerating every ordering of ``m + 1`` distinct scores.

    The calibration quantile is taken straight from its ECDF definition: the
    smallest calibration score ``z`` with ``#{Z_i <= z} >= (1 - alpha)(m + 1)``,
    or ``+inf`` if none qualifies. Feasible for ``m <= 7``.
    """
    alpha = Fraction(alpha)
    _check_alpha(alpha)
    need = (1 - alpha) * (m + 1)
    hits = total = 0
    for perm in itertools.permutations(range(m + 1)):
        calib, test = perm[:m], perm[m]
        q = math.inf
        for z in sorted(calib):
            if sum(1 for c in calib if c <= z) >= need:
                q = z
                break
        hits += test <= q
        total += 1
    return Fraction(hits, total)


@dataclass(frozen=True)
class CoverageEstimate:
    trials: int
    hits: int

    @property
    def estimate(self) -> float:
        return self.hits / self.trials

    @property
    def se(self) -> float:
        p = self.estimate
        return math.sqrt(p * (1.0 - p) / self.trials)

    def within(self, lo: float, hi: float | None = None, n_se: float = 3.0) -> bool:
        """True if the estimate lies in ``[lo, hi]`` widened by ``n_se`` standard errors."""
        hi = lo if hi is None else hi
        band = n_se * self.se
        return lo - band <= self.estimate <= hi + band

    def __str__(self) -> str:
        return f"{self.estimate:.5f} (se {self.se:.5f}, {self.hits}/{self.trials})"


def normal_scores(rng, shape):
    return rng.standard_normal(shape)


def tied_scores(rng, shape):
    return np.zeros(shape)


def _batches(trials: int, batch: int):
    done = 0
    while done < trials:
        b = min(batch, trials - done)
        yield b
        done += b


def monte_carlo_coverage(
    score_sampler: Callable = normal_scores,
    m: int = 19,
    alpha: float = 0.1,
    trials: int = 100_000,
    seed: int = 0,
    batch: int = 20_000,
) -> CoverageEstimate:
    """Repeatedly draw ``m`` calibration scores and one test score, and count
    how often the test score is at most the inflated quantile.

    ``score_sampler(rng, shape)`` returns i.i.d. scores of the given shape.
    """
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    hits = 0
    for b in _batches(trials, batch):
        S = np.asarray(score_sampler(rng, (b, m + 1)), dtype=float)
        q = inflated_quantile(S[:, :m], alpha)
        hits += int(np.sum(S[:, m] <= q))
    return CoverageEstimate(trials, hits)


@dataclass(frozen=True)
class TailCoverage:
    coverage: CoverageEstimate
    lower_miss: CoverageEstimate  # y < lower endpoint
    upper_miss: CoverageEstimate  # y > upper endpoint
    m: int


def monte_carlo_group_coverage(
    models,
    spec: CalibrationSpec,
    synthetic: SyntheticSpec,
    m: int | Mapping[int, int],
    trials: int,
    seed: int = 0,
    batch: int | None = None,
) -> dict[int, TailCoverage]:
    """Group-conditional coverage of the calibration step by simulation.

    The base model(s) stay fixed; each trial draws a fresh calibration set of
    ``m`` samples and one test sample from the law of ``(X, Y) | A = a``,
    calibrates with the library's score and quantile functions, and records
    whether the test response falls inside, below or above the interval.
    """
    if not spec.conditional:
        raise ConfigError("group coverage simulation applies to conditional calibration")
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    groupwise = spec.mode == TrainingMode.GROUPWISE
    out = {}
    for a in range(synthetic.n_groups):
        ma = m[a] if isinstance(m, Mapping) else m
        model = models[a] if groupwise else models
        rng = np.random.default_rng([seed, a])
        size = batch or max(1, 2_000_000 // (ma + 1))
        hits = below = above = 0
        for b in _batches(trials, size):
            X, y = sample_group(synthetic, a, b * (ma + 1), rng)
            lo, hi = (v.reshape(b, ma + 1) for v in base_interval(model, X))
            y = y.reshape(b, ma + 1)
            q_lo, q_hi = tail_corrections(lo[:, :ma], hi[:, :ma], y[:, :ma], spec)
            lower, upper = apply_corrections(lo[:, ma], hi[:, ma], q_lo, q_hi)
            yt = y[:, ma]
            below += int(np.sum(yt < lower))
            above += int(np.sum(yt > upper))
            hits += int(np.sum((lower <= yt) & (yt <= upper)))
        out[a] = TailCoverage(
            CoverageEstimate(trials, hits),
            CoverageEstimate(trials, below),
            CoverageEstimate(trials, above),
            ma,
        )
    return out


def finite_difference_gradient(loss: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(t + eps e_j) - f(t - eps e_j)) / (2 eps)``."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    theta = np.array(theta, dtype=float)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        old = theta.flat[j]
        theta.flat[j] = old + eps
        f_plus = loss(theta)
        theta.flat[j] = old - eps
        f_minus = loss(theta)
        theta.flat[j] = old
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss while perturbing coordinate {j}")
        grad.flat[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad
