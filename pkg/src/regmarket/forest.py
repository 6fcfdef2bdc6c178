"""Regression forests over random two-input linear-combination features.

Trees split on the weighted sample variance criterion and every node keeps
the Gaussian summary (mean, variance, count) of its training sample, so a
tree can be evaluated at any depth cap: the node where descent stops acts
as the leaf. Those per-node Gaussians are what the market module aggregates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .datasets import Dataset

# Leaf variances are floored at this multiple of the squared training
# response range; a zero-variance leaf would otherwise degenerate the
# market's price density into a spike.
VARIANCE_FLOOR_SCALE = 1e-6


@dataclass(frozen=True)
class RandomFeature:
    """Linear combination of two input columns: a*x[i] + b*x[j]."""

    index_a: int
    index_b: int
    coef_a: float
    coef_b: float

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.coef_a * x[self.index_a]
                     + self.coef_b * x[self.index_b])


def evaluate_feature(feature: RandomFeature, x) -> float:
    """Project a single input vector onto one random feature."""
    return feature.evaluate(x)


class FeaturePool(Sequence):
    """Columnar store of random features, indexable like a list."""

    def __init__(self, index_a, index_b, coef_a, coef_b):
        self.index_a = np.asarray(index_a, dtype=np.int32)
        self.index_b = np.asarray(index_b, dtype=np.int32)
        self.coef_a = np.asarray(coef_a, dtype=np.float64)
        self.coef_b = np.asarray(coef_b, dtype=np.float64)
        if not (self.index_a.shape == self.index_b.shape
                == self.coef_a.shape == self.coef_b.shape):
            raise ValueError("pool columns must have matching lengths")

    @classmethod
    def from_features(cls, features: Sequence[RandomFeature]) -> "FeaturePool":
        return cls([f.index_a for f in features],
                   [f.index_b for f in features],
                   [f.coef_a for f in features],
                   [f.coef_b for f in features])

    def __len__(self) -> int:
        return self.index_a.size

    def __getitem__(self, k) -> RandomFeature:
        return RandomFeature(int(self.index_a[k]), int(self.index_b[k]),
                             float(self.coef_a[k]), float(self.coef_b[k]))

    def project(self, X: np.ndarray, rows: np.ndarray,
                selection: np.ndarray) -> np.ndarray:
        """Evaluate the selected features on the selected rows: (n, k)."""
        r = rows[:, None]
        return (X[r, self.index_a[selection][None, :]] * self.coef_a[selection]
                + X[r, self.index_b[selection][None, :]] * self.coef_b[selection])


def generate_feature_pool(num_inputs: int, pool_size: int,
                          rng: np.random.Generator) -> FeaturePool:
    """Draw pool_size random features: uniform column pairs, coefficients
    uniform on [-1, 1]."""
    if num_inputs < 1 or pool_size < 1:
        raise ValueError("num_inputs and pool_size must be positive")
    idx = rng.integers(0, num_inputs, size=(pool_size, 2))
    coef = rng.uniform(-1.0, 1.0, size=(pool_size, 2))
    return FeaturePool(idx[:, 0], idx[:, 1], coef[:, 0], coef[:, 1])


@dataclass(frozen=True)
class GaussianLeaf:
    """Per-node Gaussian summary of the training responses in its cell."""

    mean: float
    variance: float
    count: int
    depth: int


@dataclass(frozen=True)
class ForestParams:
    trees: int = 100
    candidates: int = 25
    pool_size: int = 1000
    min_split: int = 5
    max_depth: Optional[int] = None
    bootstrap: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1 or self.candidates < 1 or self.pool_size < 1:
            raise ValueError("trees, candidates and pool_size must be positive")
        if self.min_split < 2:
            raise ValueError("min_split must be at least 2")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be nonnegative")


def _scan_projections(Z: np.ndarray, y_centered: np.ndarray):
    """Best split over candidate projections by summed child SSE.

    Returns (candidate_position, threshold, child_sse) for the first
    minimum in (candidate, threshold) order, or None when no candidate
    admits a variance-reducing split.
    """
    n = Z.shape[0]
    if n < 2:
        return None
    order = np.argsort(Z, axis=0)
    zs = np.take_along_axis(Z, order, axis=0)
    ys = y_centered[order]
    s = np.cumsum(ys, axis=0)
    q = np.cumsum(ys * ys, axis=0)
    sizes_l = np.arange(1, n, dtype=np.float64)[:, None]
    sl = s[:-1]
    sse_l = q[:-1] - sl * sl / sizes_l
    sse_r = (q[-1] - q[:-1]) - (s[-1] - sl) ** 2 / (n - sizes_l)
    score = sse_l + sse_r
    score[zs[1:] <= zs[:-1]] = np.inf  # no threshold separates equal values
    ordered = score.T.ravel()          # candidate-major for tie-breaking
    best = int(np.argmin(ordered))
    best_score = ordered[best]
    if not np.isfinite(best_score):
        return None
    parent_sse = float(np.sum(y_centered * y_centered)
                       - np.sum(y_centered) ** 2 / n)
    if not best_score < parent_sse:
        return None
    cand, pos = divmod(best, n - 1)
    lo = zs[pos, cand]
    hi = zs[pos + 1, cand]
    threshold = 0.5 * (lo + hi)
    if threshold <= lo:  # midpoint of adjacent floats can round down
        threshold = hi
    return cand, float(threshold), float(best_score)


def best_split(X, y, candidates, min_split: int = 5):
    """Pick the (feature, threshold) minimizing weighted child variance.

    Returns None when the sample is smaller than min_split or no candidate
    split reduces the weighted variance. Ties resolve to the first minimum
    in (candidate order, threshold order).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("sample must be nonempty")
    if y.size < min_split:
        return None
    pool = (candidates if isinstance(candidates, FeaturePool)
            else FeaturePool.from_features(list(candidates)))
    rows = np.arange(y.size)
    Z = pool.project(X, rows, np.arange(len(pool)))
    found = _scan_projections(Z, y - y.mean())
    if found is None:
        return None
    cand, threshold, _ = found
    return pool[cand], threshold


class Tree:
    """Flat-array binary tree; node 0 is the root, children index into the
    same arrays, left/right of -1 marks a leaf."""

    def __init__(self, feat_a, feat_b, coef_a, coef_b, threshold,
                 left, right, mean, variance, count, depth):
        self.feat_a = np.asarray(feat_a, dtype=np.int32)
        self.feat_b = np.asarray(feat_b, dtype=np.int32)
        self.coef_a = np.asarray(coef_a, dtype=np.float64)
        self.coef_b = np.asarray(coef_b, dtype=np.float64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance = np.asarray(variance, dtype=np.float64)
        self.count = np.asarray(count, dtype=np.int64)
        self.depth = np.asarray(depth, dtype=np.int32)

    @property
    def num_nodes(self) -> int:
        return self.mean.size

    @property
    def height(self) -> int:
        return int(self.depth.max())

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def node_leaf(self, node: int) -> GaussianLeaf:
        return GaussianLeaf(float(self.mean[node]), float(self.variance[node]),
                            int(self.count[node]), int(self.depth[node]))

    def descend(self, x, depth_cap: Optional[int] = None) -> int:
        """Index of the node where descent for x stops."""
        cap = np.inf if depth_cap is None else depth_cap
        x = np.asarray(x, dtype=float)
        node = 0
        while self.left[node] >= 0 and self.depth[node] < cap:
            z = (self.coef_a[node] * x[self.feat_a[node]]
                 + self.coef_b[node] * x[self.feat_b[node]])
            node = int(self.left[node] if z < self.threshold[node]
                       else self.right[node])
        return node

    def apply(self, X: np.ndarray, depth_cap: Optional[int] = None) -> np.ndarray:
        """Vectorized descent: stop node index for every row of X."""
        cap = np.iinfo(np.int32).max if depth_cap is None else int(depth_cap)
        X = np.asarray(X, dtype=float)
        nodes = np.zeros(X.shape[0], dtype=np.int32)
        active = np.nonzero((self.left[nodes] >= 0)
                            & (self.depth[nodes] < cap))[0]
        while active.size:
            cur = nodes[active]
            z = (X[active, self.feat_a[cur]] * self.coef_a[cur]
                 + X[active, self.feat_b[cur]] * self.coef_b[cur])
            nxt = np.where(z < self.threshold[cur],
                           self.left[cur], self.right[cur])
            nodes[active] = nxt
            keep = (self.left[nxt] >= 0) & (self.depth[nxt] < cap)
            active = active[keep]
        return nodes


def leaf_for(tree: Tree, x, depth_cap: Optional[int] = None) -> GaussianLeaf:
    """Gaussian summary at the first of {true leaf, depth_cap} along x's path."""
    if depth_cap is not None and depth_cap < 0:
        raise ValueError("depth_cap must be nonnegative")
    return tree.node_leaf(tree.descend(x, depth_cap))


def grow_tree(X, y, params: ForestParams, pool: FeaturePool,
              rng: np.random.Generator, variance_floor: float = 0.0) -> Tree:
    """Grow one tree by recursive variance-minimizing splits.

    At each node ``params.candidates`` features are drawn from the pool
    with replacement; growth stops at max_depth, below min_split samples,
    or when no split reduces the weighted variance. Stored node variances
    are floored at ``variance_floor``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("training sample must be nonempty")
    if params.bootstrap:
        root_rows = rng.integers(0, y.size, size=y.size)
    else:
        root_rows = np.arange(y.size)
    max_depth = np.inf if params.max_depth is None else params.max_depth

    feat_a, feat_b = [], []
    coef_a, coef_b, threshold = [], [], []
    left, right = [], []
    mean, variance, count, depth = [], [], [], []

    def alloc(rows, d):
        node = len(mean)
        y_node = y[rows]
        m = y_node.mean()
        centered = y_node - m
        mean.append(float(m))
        variance.append(max(float(centered @ centered) / rows.size,
                            variance_floor))
        count.append(rows.size)
        depth.append(d)
        feat_a.append(-1)
        feat_b.append(-1)
        coef_a.append(0.0)
        coef_b.append(0.0)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        return node

    # Explicit stack keeps deep spines from hitting the recursion limit;
    # preorder (left first) keeps the candidate draws deterministic.
    stack = [(root_rows, 0, -1, "l")]
    while stack:
        rows, d, parent, side = stack.pop()
        node = alloc(rows, d)
        if parent >= 0:
            (left if side == "l" else right)[parent] = node
        if d >= max_depth or rows.size < params.min_split:
            continue
        selection = rng.integers(0, len(pool), size=params.candidates)
        Z = pool.project(X, rows, selection)
        y_node = y[rows]
        found = _scan_projections(Z, y_node - y_node.mean())
        if found is None:
            continue
        cand, thr, _ = found
        k = selection[cand]
        feat_a[node] = int(pool.index_a[k])
        feat_b[node] = int(pool.index_b[k])
        coef_a[node] = float(pool.coef_a[k])
        coef_b[node] = float(pool.coef_b[k])
        threshold[node] = thr
        go_left = Z[:, cand] < thr
        stack.append((rows[~go_left], d + 1, node, "r"))
        stack.append((rows[go_left], d + 1, node, "l"))

    return Tree(feat_a, feat_b, coef_a, coef_b, threshold,
                left, right, mean, variance, count, depth)


@dataclass
class Forest:
    """A list of grown trees plus the parameters that produced them."""

    trees: list
    params: ForestParams
    response_range: tuple[float, float]

    def __post_init__(self):
        if len(self.trees) != self.params.trees:
            raise ValueError(
                f"forest holds {len(self.trees)} trees but params.trees="
                f"{self.params.trees}"
            )

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    def apply_all(self, X, depth_cap: Optional[int] = None) -> np.ndarray:
        """Stop-node index per (row, tree): shape (N, trees)."""
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[0], self.num_trees), dtype=np.int32)
        for t, tree in enumerate(self.trees):
            out[:, t] = tree.apply(X, depth_cap)
        return out

    def predict(self, X, depth_cap: Optional[int] = None) -> np.ndarray:
        """Plain forest prediction: average of per-tree leaf means."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        acc = np.zeros(X.shape[0])
        for tree in self.trees:
            acc += tree.mean[tree.apply(X, depth_cap)]
        return acc / self.num_trees


def forest_predict(forest: Forest, x, depth_cap: Optional[int] = None) -> float:
    """Forest prediction for a single input vector."""
    return float(forest.predict(np.atleast_2d(np.asarray(x, dtype=float)),
                                depth_cap)[0])


def grow_forest(train: Dataset, params: ForestParams) -> Forest:
    """Grow params.trees trees on the training set.

    Per-tree random streams are derived from (params.seed, tree index), so
    the result does not depend on growth order. By default every tree sees
    the full training set; params.bootstrap switches to resampling.
    """
    ss = np.random.SeedSequence(params.seed)
    children = ss.spawn(params.trees + 1)
    pool = generate_feature_pool(train.num_features, params.pool_size,
                                 np.random.default_rng(children[0]))
    floor = VARIANCE_FLOOR_SCALE * train.range_width ** 2
    trees = [
        grow_tree(train.features, train.response, params, pool,
                  np.random.default_rng(child), floor)
        for child in children[1:]
    ]
    return Forest(trees=trees, params=params,
                  response_range=train.response_range)


_TREE_FIELDS = ("feat_a", "feat_b", "coef_a", "coef_b", "threshold",
                "left", "right", "mean", "variance", "count", "depth")

FOREST_FORMAT_VERSION = 1


def save_forest(forest: Forest, path) -> None:
    """Serialize a forest to a versioned npz container."""
    offsets = np.cumsum([0] + [t.num_nodes for t in forest.trees])
    packed = {
        name: np.concatenate([getattr(t, name) for t in forest.trees])
        for name in _TREE_FIELDS
    }
    meta = {
        "params": {k: getattr(forest.params, k)
                   for k in ("trees", "candidates", "pool_size", "min_split",
                             "max_depth", "bootstrap", "seed")},
        "response_range": list(forest.response_range),
    }
    np.savez_compressed(
        path,
        format_version=np.int64(FOREST_FORMAT_VERSION),
        offsets=offsets.astype(np.int64),
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        **packed,
    )


def load_forest(path) -> Forest:
    """Load a forest written by save_forest, checking the format version."""
    with np.load(path) as bundle:
        version = int(bundle["format_version"])
        if version != FOREST_FORMAT_VERSION:
            raise ValueError(
                f"unsupported forest format version {version}, "
                f"expected {FOREST_FORMAT_VERSION}"
            )
        meta = json.loads(bytes(bundle["meta"]).decode())
        offsets = bundle["offsets"]
        columns = {name: bundle[name] for name in _TREE_FIELDS}
    trees = []
    for i in range(offsets.size - 1):
        lo, hi = offsets[i], offsets[i + 1]
        trees.append(Tree(**{name: columns[name][lo:hi]
                             for name in _TREE_FIELDS}))
    params = ForestParams(**meta["params"])
    return Forest(trees=trees, params=params,
                  response_range=tuple(meta["response_range"]))


def forest_fingerprint(forest: Forest) -> str:
    """Stable content hash of the forest's structure and statistics."""
    digest = hashlib.sha256()
    digest.update(f"v{FOREST_FORMAT_VERSION};{forest.num_trees}".encode())
    for tree in forest.trees:
        for name in _TREE_FIELDS:
            digest.update(np.ascontiguousarray(getattr(tree, name)).tobytes())
    return digest.hexdigest()
