"""MSE and the two t-tests used to annotate benchmark tables."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc


class Verdict(enum.Enum):
    A_BETTER = "a_better"
    B_BETTER = "b_better"
    NO_DIFFERENCE = "no_difference"


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    verdict: Verdict
    alpha: float


def mse(predictions, truths) -> float:
    """Mean squared error between two equal-length vectors."""
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape or predictions.ndim != 1:
        raise ValueError(
            f"length mismatch: {predictions.shape} vs {truths.shape}"
        )
    if predictions.size == 0:
        raise ValueError("mse of empty vectors is undefined")
    diff = predictions - truths
    return float(np.mean(diff * diff))


def _t_sf_two_sided(t: float, dof: float) -> float:
    # Two-sided tail probability of Student's t via the regularized
    # incomplete beta function; accurate to ~1e-10.
    if dof <= 0:
        return float("nan")
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return float(betainc(dof / 2.0, 0.5, x))


def _direction(mean_diff: float, alpha: float, p: float) -> Verdict:
    # Lower MSE is better, so a negative mean difference favors side A.
    if p >= alpha:
        return Verdict.NO_DIFFERENCE
    return Verdict.A_BETTER if mean_diff < 0 else Verdict.B_BETTER


def paired_t_test(a, b, alpha: float = 0.01) -> TTestResult:
    """Two-sided paired t-test on per-run differences a - b.

    Degenerate cases: if every difference is identical, the test is a
    deterministic comparison -- all-zero differences mean no difference,
    a constant nonzero difference counts as significant.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired vectors must match: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 runs")
    d = a - b
    mean_d = float(np.mean(d))
    sd_d = float(np.std(d, ddof=1))
    if sd_d == 0.0:
        if mean_d == 0.0:
            return TTestResult(0.0, 1.0, Verdict.NO_DIFFERENCE, alpha)
        t = math.inf if mean_d > 0 else -math.inf
        return TTestResult(t, 0.0, _direction(mean_d, alpha, 0.0), alpha)
    t = mean_d / (sd_d / math.sqrt(n))
    p = _t_sf_two_sided(t, n - 1)
    return TTestResult(t, p, _direction(mean_d, alpha, p), alpha)


def means_t_test(
    mean_a: float,
    sd_a: float,
    n_a: int,
    mean_b: float,
    sd_b: float,
    n_b: int,
    alpha: float = 0.01,
) -> TTestResult:
    """t-test on summary statistics (Welch, unequal variances).

    When side B is a single published number with no spread (n_b <= 1 or
    sd_b == 0 with n_b == 1), it is treated as a fixed constant and the
    test reduces to a one-sample t-test of side A against it.
    """
    if n_a < 2:
        raise ValueError("side A needs at least 2 observations")
    if sd_a < 0 or sd_b < 0:
        raise ValueError("standard deviations must be nonnegative")
    mean_diff = mean_a - mean_b
    if n_b <= 1:
        # Published constant: one-sample test against it.
        if sd_a == 0.0:
            if mean_diff == 0.0:
                return TTestResult(0.0, 1.0, Verdict.NO_DIFFERENCE, alpha)
            t = math.inf if mean_diff > 0 else -math.inf
            return TTestResult(t, 0.0, _direction(mean_diff, alpha, 0.0), alpha)
        t = mean_diff / (sd_a / math.sqrt(n_a))
        p = _t_sf_two_sided(t, n_a - 1)
        return TTestResult(t, p, _direction(mean_diff, alpha, p), alpha)
    va = sd_a * sd_a / n_a
    vb = sd_b * sd_b / n_b
    if va + vb == 0.0:
        if mean_diff == 0.0:
            return TTestResult(0.0, 1.0, Verdict.NO_DIFFERENCE, alpha)
        t = math.inf if mean_diff > 0 else -math.inf
        return TTestResult(t, 0.0, _direction(mean_diff, alpha, 0.0), alpha)
    t = mean_diff / math.sqrt(va + vb)
    # Welch-Satterthwaite degrees of freedom.
    dof = (va + vb) ** 2 / (va * va / (n_a - 1) + vb * vb / (n_b - 1))
    p = _t_sf_two_sided(t, dof)
    return TTestResult(t, p, _direction(mean_diff, alpha, p), alpha)
