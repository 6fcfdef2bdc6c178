import os

import numpy as np
import pytest

from regmarket.forest import Forest, ForestParams, Tree

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data")


@pytest.fixture(scope="session")
def data_dir():
    return os.path.abspath(DATA_DIR)


def leaf_tree(mean, variance, count=1):
    """Single-node tree: one participant that is active for every input."""
    return Tree([-1], [-1], [0.0], [0.0], [np.nan], [-1], [-1],
                [mean], [variance], [count], [0])


def leaf_forest(means, variances):
    """Forest of single-leaf trees, one per (mean, variance) pair."""
    trees = [leaf_tree(m, v) for m, v in zip(means, variances)]
    return Forest(trees=trees, params=ForestParams(trees=len(trees)),
                  response_range=(float(np.min(means)), float(np.max(means))))


def normal_pdf(t, mean, variance):
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * (t - mean) ** 2 / variance) / np.sqrt(
        2.0 * np.pi * variance)
