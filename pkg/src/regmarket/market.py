"""Budget-weighted aggregation of tree-leaf regressors via online updates.

Each node a tree exposes at the configured depth cap is a participant
holding a budget share. For an input x, exactly one participant per tree is
active; the price density is the budget-weighted mixture of the active
leaves' Gaussians and the prediction is its mean. After seeing the true
response, budgets move by each participant's payoff ratio: density at the
truth over price at the truth (delta rule), or that ratio averaged under a
Gaussian reward kernel of bandwidth sigma, evaluated by Hermite-Gauss
quadrature (gaussian rule).

Normalization convention: the price density and prediction use budgets
normalized over the active set, while updates scale the raw budgets. Gains
then cancel losses within every active set, so the global budget sum is
invariant under any update sequence, and the update can never push a budget
negative while the learning rate is at most 1.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .datasets import Dataset
from .forest import (Forest, ForestParams, GaussianLeaf, VARIANCE_FLOOR_SCALE,
                     forest_fingerprint, grow_forest)
from .quadrature import DENSITY_FLOOR, QuadratureRule, hermite_gauss

_LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)

DEFAULT_ALPHA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 21))


@dataclass(frozen=True)
class DeltaKernel:
    """Exact-match reward: payoff ratio evaluated at the true response only."""


@dataclass(frozen=True)
class GaussianKernel:
    """Gaussian reward of bandwidth sigma, integrated by the given rule."""

    sigma: float
    rule: QuadratureRule

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.sigma}")


Kernel = Union[DeltaKernel, GaussianKernel]


@dataclass(frozen=True)
class ActiveSet:
    """The one-participant-per-tree slice of the market that bets on an x."""

    pids: np.ndarray
    budgets: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    depths: np.ndarray

    @property
    def mass(self) -> float:
        return float(self.budgets.sum())

    def entries(self):
        """(participant id, budget, leaf) triples, one per tree."""
        return [
            (int(p), float(b), GaussianLeaf(float(m), float(v), int(c), int(d)))
            for p, b, m, v, c, d in zip(self.pids, self.budgets, self.means,
                                        self.variances, self.counts, self.depths)
        ]


def _log_normal_pdf(y, means, variances):
    v = np.maximum(variances, 1e-300)
    d = y - means
    return -0.5 * (d * d / v + np.log(2.0 * np.pi * v))


def _logsumexp(values, axis=None):
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        out = (np.log(np.sum(np.exp(values - peak), axis=axis))
               + np.squeeze(peak, axis=axis))
    return out


class Market:
    """Participant registry, budget vector, and update configuration.

    Budgets are mutated in place by the update rules; everything else is
    fixed at construction. Prediction on a market whose budgets are not
    being updated is safe to share across threads.
    """

    def __init__(self, forest: Forest, depth_cap: Optional[int],
                 eta: float, kernel: Kernel):
        if eta < 0:
            raise ValueError(f"learning rate must be nonnegative, got {eta}")
        if eta > 1.0:
            warnings.warn(
                f"learning rate {eta} clamped to 1 to keep budgets nonnegative",
                stacklevel=2,
            )
            eta = 1.0
        self.forest = forest
        self.depth_cap = depth_cap
        self.eta = float(eta)
        self.kernel = kernel
        self.skipped = 0  # instances dropped because the price underflowed

        cap = np.inf if depth_cap is None else depth_cap
        means, variances, counts, depths = [], [], [], []
        self._node_to_pid = []
        next_pid = 0
        for tree in forest.trees:
            is_stop = (tree.left < 0) & (tree.depth <= cap)
            is_stop |= tree.depth == cap
            nodes = np.nonzero(is_stop)[0]
            lookup = np.full(tree.num_nodes, -1, dtype=np.int64)
            lookup[nodes] = np.arange(next_pid, next_pid + nodes.size)
            next_pid += nodes.size
            self._node_to_pid.append(lookup)
            means.append(tree.mean[nodes])
            variances.append(tree.variance[nodes])
            counts.append(tree.count[nodes])
            depths.append(tree.depth[nodes])
        self.means = np.concatenate(means)
        self.variances = np.concatenate(variances)
        self.counts = np.concatenate(counts)
        self.depths = np.concatenate(depths)
        self.num_participants = next_pid
        self.budgets = np.full(next_pid, 1.0 / next_pid)

        if isinstance(kernel, GaussianKernel):
            weights = kernel.rule.weights
            self._quad_weights = weights / weights.sum()
            self._quad_offsets = math.sqrt(2.0) * kernel.sigma * kernel.rule.nodes
        else:
            self._quad_weights = None
            self._quad_offsets = None

    # -- participant lookup -------------------------------------------------

    def assign(self, X) -> np.ndarray:
        """Active participant id per (row, tree): shape (N, trees)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        nodes = self.forest.apply_all(X, self.depth_cap)
        pids = np.empty_like(nodes, dtype=np.int64)
        for t, lookup in enumerate(self._node_to_pid):
            pids[:, t] = lookup[nodes[:, t]]
        return pids

    def assign_row(self, x) -> np.ndarray:
        return self.assign(np.atleast_2d(np.asarray(x, dtype=float)))[0]

    def total_budget(self) -> float:
        return float(self.budgets.sum())

    def predict(self, X) -> np.ndarray:
        """Budget-weighted mean of the active leaves, per row of X."""
        pids = self.assign(X)
        return _predict_assigned(self.budgets, self.means, pids)


def _predict_assigned(budgets, means, pids) -> np.ndarray:
    beta = budgets[pids]
    mass = beta.sum(axis=1)
    if np.any(mass <= 0):
        raise ValueError("active budget mass is zero")
    return (beta * means[pids]).sum(axis=1) / mass


def init_market(forest: Forest, depth_cap: Optional[int], eta: float,
                kernel: Kernel) -> Market:
    """Market over every node the forest exposes at depth_cap, with uniform
    budgets summing to 1."""
    if forest.num_trees < 1:
        raise ValueError("forest must hold at least one tree")
    return Market(forest, depth_cap, eta, kernel)


def active_set(market: Market, x) -> ActiveSet:
    """The participants (one per tree) betting on input x."""
    pids = market.assign_row(x)
    return ActiveSet(
        pids=pids,
        budgets=market.budgets[pids].copy(),
        means=market.means[pids],
        variances=market.variances[pids],
        counts=market.counts[pids],
        depths=market.depths[pids],
    )


def price_density(active: ActiveSet, y):
    """Mixture density of the active leaves under normalized budgets.

    Accepts a scalar or an array of evaluation points.
    """
    mass = active.mass
    if mass <= 0:
        raise ValueError("active budget mass is zero")
    w = active.budgets / mass
    y_arr = np.asarray(y, dtype=float)
    logh = _log_normal_pdf(y_arr[..., None], active.means, active.variances)
    value = np.sum(w * np.exp(logh), axis=-1)
    return float(value) if np.isscalar(y) or y_arr.ndim == 0 else value


def predict(market: Market, x) -> float:
    """Market prediction for one input: the mean of its price density."""
    return float(market.predict(np.atleast_2d(np.asarray(x, dtype=float)))[0])


# -- update rules -----------------------------------------------------------


def _delta_step(beta, logh, eta):
    """Budget deltas for one instance, or None if the price underflows."""
    mass = beta.sum()
    if mass <= 0:
        raise ValueError("active budget mass is zero")
    with np.errstate(divide="ignore"):
        logw = np.log(beta) - np.log(mass)
    logc = _logsumexp(logw + logh)
    if logc < _LOG_DENSITY_FLOOR:
        return None
    ratio = np.exp(logh - logc)
    return eta * beta * (ratio - 1.0)


def _gauss_step(beta, logh, eta, quad_weights):
    """Budget deltas under the Gaussian reward; logh has shape (T, Q).

    Grid points where the price underflows contribute a neutral ratio of 1
    for every participant, which keeps the budget sum conserved.
    """
    mass = beta.sum()
    if mass <= 0:
        raise ValueError("active budget mass is zero")
    with np.errstate(divide="ignore"):
        logw = np.log(beta) - np.log(mass)
    logc = _logsumexp(logw[:, None] + logh, axis=0)
    ratio = np.exp(logh - logc[None, :])
    degenerate = logc < _LOG_DENSITY_FLOOR
    if degenerate.any():
        ratio[:, degenerate] = 1.0
    # Accumulate ratio - 1 so a participant whose density equals the price
    # at every grid point moves by exactly zero.
    excess = (ratio - 1.0) @ quad_weights
    return eta * beta * excess


def delta_update(market: Market, x, y_true: float) -> np.ndarray:
    """Apply the exact-match update for one observation; returns the
    per-participant budget deltas (zero everywhere if skipped)."""
    pids = market.assign_row(x)
    beta = market.budgets[pids]
    logh = _log_normal_pdf(y_true, market.means[pids], market.variances[pids])
    deltas = _delta_step(beta, logh, market.eta)
    if deltas is None:
        market.skipped += 1
        return np.zeros_like(beta)
    market.budgets[pids] = beta + deltas
    return deltas


def gaussian_update(market: Market, x, y_true: float) -> np.ndarray:
    """Apply the Gaussian-kernel update for one observation; returns the
    per-participant budget deltas."""
    if not isinstance(market.kernel, GaussianKernel):
        raise ValueError("market kernel is not Gaussian")
    pids = market.assign_row(x)
    beta = market.budgets[pids]
    points = y_true + market._quad_offsets
    logh = _log_normal_pdf(points[None, :], market.means[pids][:, None],
                           market.variances[pids][:, None])
    deltas = _gauss_step(beta, logh, market.eta, market._quad_weights)
    market.budgets[pids] = beta + deltas
    return deltas


def update(market: Market, x, y_true: float) -> np.ndarray:
    """Apply the market's configured update rule for one observation."""
    if isinstance(market.kernel, GaussianKernel):
        return gaussian_update(market, x, y_true)
    return delta_update(market, x, y_true)


# -- epoch training ---------------------------------------------------------


@dataclass(frozen=True)
class TrainingCurve:
    """Per-epoch MSEs plus the epoch that minimized test error."""

    train_mse: np.ndarray
    test_mse: np.ndarray
    best_epoch: int            # 1-based epoch index of the minimal test MSE
    best_test_mse: float
    final_test_mse: float
    skipped: int


def train_epochs(market: Market, train: Dataset, test: Dataset,
                 epochs: int, shuffle_rng: Optional[np.random.Generator] = None
                 ) -> TrainingCurve:
    """Run the configured update once per training instance per epoch.

    Instances are visited in dataset order every epoch (optionally shuffled
    once up front when shuffle_rng is given). MSE on both sets is recorded
    after each epoch; the budget sum is checked against 1 every epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    a_train = market.assign(train.features)
    a_test = market.assign(test.features)
    order = np.arange(train.num_rows)
    if shuffle_rng is not None:
        order = shuffle_rng.permutation(order)
    return _train_assigned(market, a_train, train.response,
                           a_test, test.response, epochs, order)


def _train_assigned(market: Market, a_train, y_train, a_test, y_test,
                    epochs: int, order=None) -> TrainingCurve:
    if order is None:
        order = np.arange(y_train.size)
    budgets = market.budgets
    means = market.means
    eta = market.eta
    gaussian = isinstance(market.kernel, GaussianKernel)

    mean_train = means[a_train]
    mean_test = means[a_test]

    # Densities never change during training, so the per-instance log
    # density table is computed once up front.
    if gaussian:
        points = y_train[:, None] + market._quad_offsets[None, :]
        logh_all = _log_normal_pdf(points[:, None, :],
                                   means[a_train][:, :, None],
                                   market.variances[a_train][:, :, None])
        quad_weights = market._quad_weights
    else:
        logh_all = _log_normal_pdf(y_train[:, None], means[a_train],
                                   market.variances[a_train])

    train_curve = np.empty(epochs)
    test_curve = np.empty(epochs)
    skipped_before = market.skipped
    for epoch in range(epochs):
        for n in order:
            pids = a_train[n]
            beta = budgets[pids]
            if gaussian:
                deltas = _gauss_step(beta, logh_all[n], eta, quad_weights)
            else:
                deltas = _delta_step(beta, logh_all[n], eta)
                if deltas is None:
                    market.skipped += 1
                    continue
            budgets[pids] = beta + deltas
        total = budgets.sum()
        if abs(total - 1.0) > 1e-9:
            raise RuntimeError(
                f"budget conservation violated after epoch {epoch + 1}: "
                f"sum={total!r}"
            )
        bt = budgets[a_train]
        train_curve[epoch] = np.mean(
            ((bt * mean_train).sum(1) / bt.sum(1) - y_train) ** 2)
        bt = budgets[a_test]
        test_curve[epoch] = np.mean(
            ((bt * mean_test).sum(1) / bt.sum(1) - y_test) ** 2)
    best = int(np.argmin(test_curve))
    return TrainingCurve(
        train_mse=train_curve,
        test_mse=test_curve,
        best_epoch=best + 1,
        best_test_mse=float(test_curve[best]),
        final_test_mse=float(test_curve[-1]),
        skipped=market.skipped - skipped_before,
    )


# -- reward bandwidth selection ----------------------------------------------


@dataclass(frozen=True)
class SigmaSelection:
    sigma: float
    alpha: float
    alphas: np.ndarray
    cv_mse: np.ndarray


def select_sigma(train: Dataset, forest_params: ForestParams, *,
                 rng: np.random.Generator,
                 alpha_grid=DEFAULT_ALPHA_GRID,
                 folds: int = 2,
                 depth_cap: Optional[int] = None,
                 eta: Union[str, float] = "auto",
                 epochs: int = 50,
                 quad_points: int = 5) -> SigmaSelection:
    """Pick the Gaussian reward bandwidth by k-fold cross validation.

    Candidate bandwidths are alpha * rms(y) over the full training
    responses for each alpha in the grid. Each candidate trains a
    Gaussian-kernel market on every fold complement and is scored by the
    mean held-out minimum-over-epochs MSE; the best candidate's sigma is
    returned. eta="auto" uses 10/N of each fold's training half.
    """
    alpha_grid = np.asarray(sorted(alpha_grid), dtype=float)
    if alpha_grid.size == 0:
        raise ValueError("alpha grid must be nonempty")
    if np.any((alpha_grid <= 0) | (alpha_grid > 1)):
        raise ValueError("alpha values must lie in (0, 1]")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    y = train.response
    rms = float(np.sqrt(np.mean(y * y)))
    if rms == 0.0:
        # Degenerate all-zero response: fall back to the leaf variance floor.
        sigma = math.sqrt(VARIANCE_FLOOR_SCALE) * train.range_width
        sigma = max(sigma, 1e-12)
        return SigmaSelection(sigma, float(alpha_grid[0]), alpha_grid,
                              np.full(alpha_grid.size, np.nan))

    rule = hermite_gauss(quad_points)
    order = rng.permutation(train.num_rows)
    fold_slices = np.array_split(order, folds)
    scores = np.zeros(alpha_grid.size)
    for f, held_out in enumerate(fold_slices):
        fit_rows = np.concatenate([fold_slices[g] for g in range(folds)
                                   if g != f])
        fold_train = Dataset(train.features[fit_rows], y[fit_rows],
                             train.response_range, f"{train.name}-cvfit{f}")
        fold_test = Dataset(train.features[held_out], y[held_out],
                            train.response_range, f"{train.name}-cvheld{f}")
        fold_seed = int(rng.integers(np.iinfo(np.int64).max))
        forest = grow_forest(fold_train, replace(forest_params, seed=fold_seed))
        fold_eta = (10.0 / fold_train.num_rows if eta == "auto" else float(eta))
        probe = init_market(forest, depth_cap, fold_eta,
                            GaussianKernel(rms, rule))
        a_fit = probe.assign(fold_train.features)
        a_held = probe.assign(fold_test.features)
        for i, alpha in enumerate(alpha_grid):
            market = init_market(forest, depth_cap, fold_eta,
                                 GaussianKernel(float(alpha) * rms, rule))
            curve = _train_assigned(market, a_fit, fold_train.response,
                                    a_held, fold_test.response, epochs)
            scores[i] += curve.best_test_mse / folds
    best = int(np.argmin(scores))
    return SigmaSelection(float(alpha_grid[best] * rms),
                          float(alpha_grid[best]), alpha_grid, scores)


# -- persistence ------------------------------------------------------------

MARKET_FORMAT_VERSION = 1


def save_market(market: Market, path) -> None:
    """Serialize budgets and configuration, tagged with the forest's hash."""
    config = {
        "depth_cap": market.depth_cap,
        "eta": market.eta,
        "forest_fingerprint": forest_fingerprint(market.forest),
        "skipped": market.skipped,
    }
    if isinstance(market.kernel, GaussianKernel):
        config["kernel"] = "gaussian"
        config["sigma"] = market.kernel.sigma
        config["quad_points"] = len(market.kernel.rule)
    else:
        config["kernel"] = "delta"
    np.savez_compressed(
        path,
        format_version=np.int64(MARKET_FORMAT_VERSION),
        budgets=market.budgets,
        config=np.frombuffer(json.dumps(config).encode(), dtype=np.uint8),
    )


def load_market(path, forest: Forest) -> Market:
    """Rebuild a market against the same forest it was trained with."""
    with np.load(path) as bundle:
        version = int(bundle["format_version"])
        if version != MARKET_FORMAT_VERSION:
            raise ValueError(
                f"unsupported market format version {version}, "
                f"expected {MARKET_FORMAT_VERSION}"
            )
        config = json.loads(bytes(bundle["config"]).decode())
        budgets = bundle["budgets"]
    fingerprint = forest_fingerprint(forest)
    if fingerprint != config["forest_fingerprint"]:
        raise ValueError("market was trained on a different forest")
    if config["kernel"] == "gaussian":
        kernel = GaussianKernel(config["sigma"],
                                hermite_gauss(config["quad_points"]))
    else:
        kernel = DeltaKernel()
    market = Market(forest, config["depth_cap"], config["eta"], kernel)
    if budgets.size != market.num_participants:
        raise ValueError("budget vector does not match the participant count")
    market.budgets = budgets.copy()
    market.skipped = int(config.get("skipped", 0))
    return market
