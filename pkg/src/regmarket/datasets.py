"""Dataset ingestion, synthetic Friedman benchmarks, and train/test splitting.

CSV files are RFC-4180-style with a header row. Every non-target cell must
parse as a number: categorical inputs are expected to be numerically coded
before ingestion (integer codes are accepted as-is), and missing values are
rejected at load.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

FRIEDMAN_INPUT_COUNT = {1: 10, 2: 4, 3: 4}

# Noise scales giving the customary 3:1 signal-to-noise ratio for the
# second and third generators; the first uses unit-variance noise.
FRIEDMAN_NOISE_SD = {1: 1.0, 2: 125.0, 3: 0.1}


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus real-valued response and its observed range."""

    features: np.ndarray
    response: np.ndarray
    response_range: tuple[float, float]
    name: str = "dataset"

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        response = np.ascontiguousarray(self.response, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if response.ndim != 1 or response.size != features.shape[0]:
            raise ValueError(
                f"row count mismatch: {features.shape[0]} feature rows vs "
                f"{response.size} responses"
            )
        if features.shape[0] < 1 or features.shape[1] < 1:
            raise ValueError("dataset needs at least one row and one column")
        lo, hi = self.response_range
        if response.size and (response.min() < lo or response.max() > hi):
            raise ValueError("response values fall outside response_range")
        features.setflags(write=False)
        response.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "response_range", (float(lo), float(hi)))

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def range_width(self) -> float:
        return self.response_range[1] - self.response_range[0]


@dataclass(frozen=True)
class SplitSpec:
    """How an experiment resplits a dataset across runs."""

    test_fraction: float
    num_runs: int
    seed: int

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.num_runs < 1:
            raise ValueError("num_runs must be positive")


def _from_arrays(features, response, name) -> Dataset:
    response = np.asarray(response, dtype=np.float64)
    rng_pair = (float(response.min()), float(response.max()))
    return Dataset(features=np.asarray(features, dtype=np.float64),
                   response=response, response_range=rng_pair, name=name)


def load_csv(path, target_column, delimiter: str = ",") -> Dataset:
    """Load a numeric CSV, splitting off the named or indexed target column.

    Raises ValueError with the offending row/column for unparseable cells,
    and for a missing target column or an empty file.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such dataset file: {path}")
    with open(path, newline="") as handle:
        reader = csv.reader(handle, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if isinstance(target_column, int) or (
            isinstance(target_column, str) and target_column.lstrip("-").isdigit()
            and target_column not in header
        ):
            target_idx = int(target_column)
            if not -len(header) <= target_idx < len(header):
                raise ValueError(
                    f"{path}: target index {target_idx} out of range for "
                    f"{len(header)} columns"
                )
            target_idx %= len(header)
        else:
            if target_column not in header:
                raise ValueError(
                    f"{path}: target column {target_column!r} not in header "
                    f"{header}"
                )
            target_idx = header.index(target_column)

        rows = []
        targets = []
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(
                    f"{path}:{line_no}: expected {width} cells, got {len(row)}"
                )
            parsed = []
            for col, cell in enumerate(row):
                text = cell.strip()
                if not text:
                    raise ValueError(
                        f"{path}:{line_no}: missing value in column "
                        f"{header[col]!r}"
                    )
                try:
                    value = float(text)
                except ValueError:
                    raise ValueError(
                        f"{path}:{line_no}: cell {text!r} in column "
                        f"{header[col]!r} is not numeric"
                    ) from None
                parsed.append(value)
            targets.append(parsed.pop(target_idx))
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    name = os.path.splitext(os.path.basename(path))[0]
    return _from_arrays(np.array(rows), np.array(targets), name)


def save_csv(data: Dataset, path, delimiter: str = ",") -> None:
    """Write a dataset with generated headers x0..x{F-1} and target column y.

    Values are written with repr precision so load_csv(save_csv(d)) round
    trips exactly.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, delimiter=delimiter)
        writer.writerow([f"x{i}" for i in range(data.num_features)] + ["y"])
        for x, y in zip(data.features, data.response):
            writer.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def random_split(data: Dataset, fraction: float, rng: np.random.Generator):
    """Partition rows into (train, test) with test size floor(fraction*N).

    The test size is at least 1; both sides must end up nonempty. The same
    generator state yields the same partition.
    """
    n = data.num_rows
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    n_test = max(1, int(math.floor(fraction * n)))
    if n_test >= n:
        raise ValueError(
            f"fraction {fraction} leaves no training rows for N={n}"
        )
    order = rng.permutation(n)
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    train = _from_arrays(data.features[train_idx], data.response[train_idx],
                         f"{data.name}-train")
    test = _from_arrays(data.features[test_idx], data.response[test_idx],
                        f"{data.name}-test")
    return train, test


def friedman_signal(which: int, inputs: np.ndarray) -> np.ndarray:
    """Noiseless response of the standard Friedman benchmark functions."""
    inputs = np.asarray(inputs, dtype=float)
    x = inputs.T
    if which == 1:
        return (10.0 * np.sin(np.pi * x[0] * x[1]) + 20.0 * (x[2] - 0.5) ** 2
                + 10.0 * x[3] + 5.0 * x[4])
    if which == 2:
        return np.sqrt(x[0] ** 2 + (x[1] * x[2] - 1.0 / (x[1] * x[3])) ** 2)
    if which == 3:
        return np.arctan((x[1] * x[2] - 1.0 / (x[1] * x[3])) / x[0])
    raise ValueError(f"unknown friedman generator {which}, expected 1, 2 or 3")


def _friedman_inputs(which: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if which == 1:
        return rng.uniform(0.0, 1.0, size=(n, 10))
    lows = np.array([0.0, 40.0 * np.pi, 0.0, 1.0])
    highs = np.array([100.0, 560.0 * np.pi, 1.0, 11.0])
    return rng.uniform(lows, highs, size=(n, 4))


def generate_friedman(which: int, n: int, rng: np.random.Generator) -> Dataset:
    """Sample n rows from Friedman benchmark ``which`` with standard noise."""
    if which not in FRIEDMAN_INPUT_COUNT:
        raise ValueError(f"unknown friedman generator {which}, expected 1, 2 or 3")
    if n < 1:
        raise ValueError("sample count must be positive")
    inputs = _friedman_inputs(which, n, rng)
    noise = rng.standard_normal(n) * FRIEDMAN_NOISE_SD[which]
    response = friedman_signal(which, inputs) + noise
    return _from_arrays(inputs, response, f"friedman{which}")
