"""Hermite-Gauss quadrature rules and the weighted density-ratio sums they support.

Rules integrate against the weight exp(-t^2) on the real line and are exact
for polynomials up to degree 2n-1. ``integrate_ratio`` applies a rule to a
ratio of densities evaluated on the shifted/scaled grid y + sqrt(2)*sigma*t_i,
which is the form the Gaussian budget update needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_POINTS = 64

# Densities below this are treated as numerically degenerate rather than
# informative; the ratio at such a grid point is neutralized to 1.
DENSITY_FLOOR = 1e-300


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of an n-point Hermite-Gauss rule, sorted ascending."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1:
            raise ValueError("nodes and weights must be matching 1-d arrays")
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    def __len__(self) -> int:
        return self.nodes.size


def hermite_gauss(n: int) -> QuadratureRule:
    """Return the n-point Hermite-Gauss rule (physicists' convention).

    Nodes are the roots of the degree-n Hermite polynomial; weights are
    positive, symmetric, and sum to sqrt(pi). Supported for 1 <= n <= 64.
    """
    if not 1 <= n <= MAX_POINTS:
        raise ValueError(f"point count must be in [1, {MAX_POINTS}], got {n}")
    nodes, weights = np.polynomial.hermite.hermgauss(n)
    return QuadratureRule(nodes=nodes, weights=weights)


def integrate_ratio(
    rule: QuadratureRule,
    y: float,
    sigma: float,
    numerator: Callable[[float], float],
    denominator: Callable[[float], float],
) -> float:
    """Gaussian-weighted average of numerator/denominator around y.

    Approximates the integral of N(t; y, sigma^2) * numerator(t)/denominator(t)
    over the real line by evaluating the ratio at the transformed nodes
    y + sqrt(2)*sigma*t_i. Grid points where the denominator falls below
    ``DENSITY_FLOOR`` contribute a neutral ratio of 1.

    Evaluated as 1 + sum_i w_i*(ratio_i - 1) with normalized weights, so an
    identical numerator and denominator yields exactly 1.0.
    """
    if sigma <= 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    points = y + math.sqrt(2.0) * sigma * rule.nodes
    scale = float(np.sum(rule.weights))
    total = 0.0
    for t, w in zip(points, rule.weights):
        den = denominator(t)
        ratio = 1.0 if den < DENSITY_FLOOR else numerator(t) / den
        total += (w / scale) * (ratio - 1.0)
    return 1.0 + total
