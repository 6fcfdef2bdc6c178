"""Independent brute-force oracles shared by the unit and acceptance suites.

Everything here is deliberately slow and simple: direct per-partition
variance computation, dense trapezoid integration, explicit path walks.
"""

import numpy as np

from conftest import leaf_forest, normal_pdf


def split_score(y, mask):
    """Summed child SSE of a partition: n_l*var(left) + n_r*var(right)."""
    return float(mask.sum() * np.var(y[mask]) + (~mask).sum() * np.var(y[~mask]))


def brute_force_best_split(X, y, pool):
    """Exhaustive scan over all candidates and all midpoint thresholds.

    Score = n_left*var(left) + n_right*var(right) with plain np.var per
    partition; first minimum in (candidate, threshold) order wins.
    Returns (candidate_index, threshold, score) or None.
    """
    n = y.size
    best = None
    best_score = np.inf
    for c in range(len(pool)):
        f = pool[c]
        z = X[:, f.index_a] * f.coef_a + X[:, f.index_b] * f.coef_b
        zs = np.sort(z)
        for p in range(n - 1):
            if zs[p] == zs[p + 1]:
                continue
            thr = 0.5 * (zs[p] + zs[p + 1])
            if thr <= zs[p]:
                thr = zs[p + 1]
            score = split_score(y, z < thr)
            if score < best_score:
                best_score = score
                best = (c, float(thr), score)
    if best is None:
        return None
    if not best_score < n * np.var(y):
        return None
    return best


def walk_to_leaf(tree, x, depth_cap=None):
    """Recursive reference descent, independent of Tree.apply/descend."""
    def step(node, depth):
        if tree.left[node] < 0:
            return node
        if depth_cap is not None and depth >= depth_cap:
            return node
        z = (tree.coef_a[node] * x[tree.feat_a[node]]
             + tree.coef_b[node] * x[tree.feat_b[node]])
        child = tree.left[node] if z < tree.threshold[node] else tree.right[node]
        return step(int(child), depth + 1)

    return step(0, 0)


def trapezoid_kernel_integrals(means, variances, weights, y, sigma,
                               points=1_000_001):
    """Dense trapezoid evaluation of the Gaussian-reward payoff integral.

    Returns, per participant m, the integral over t of
    N(t; y, sigma^2) * h_m(t) / c(t) with c the weighted mixture.
    """
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    weights = np.asarray(weights, dtype=float)
    sds = np.sqrt(variances)
    lo = min(y - 10 * sigma, float(np.min(means - 10 * sds)))
    hi = max(y + 10 * sigma, float(np.max(means + 10 * sds)))
    grid = np.linspace(lo, hi, points)
    h = np.stack([normal_pdf(grid, m, v) for m, v in zip(means, variances)])
    c = weights @ h
    kernel = normal_pdf(grid, y, sigma * sigma)
    safe_c = np.where(c > 0, c, 1.0)
    integrand = kernel * np.where(c > 0, h / safe_c, 1.0)
    return np.trapezoid(integrand, grid, axis=1)


def random_synthetic_market(rng, n_participants, eta, kernel_factory,
                            spread=10.0):
    """Market over single-leaf trees with randomized Gaussian participants."""
    means = rng.uniform(-spread, spread, n_participants)
    variances = rng.uniform(0.2, 1.0, n_participants) * (2 * spread) ** 2
    forest = leaf_forest(means, variances)
    from regmarket.market import init_market

    return init_market(forest, None, eta, kernel_factory())
