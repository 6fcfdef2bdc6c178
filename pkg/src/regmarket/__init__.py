"""Prediction-market aggregation of regression forests.

Tree leaves act as specialized regressors holding budget shares; budgets
learned online through reward-kernel updates become the aggregation weights.
"""

from .datasets import (Dataset, SplitSpec, friedman_signal, generate_friedman,
                       load_csv, random_split, save_csv)
from .forest import (Forest, ForestParams, GaussianLeaf, RandomFeature, Tree,
                     best_split, evaluate_feature, forest_fingerprint,
                     forest_predict, generate_feature_pool, grow_forest,
                     grow_tree, leaf_for, load_forest, save_forest)
from .harness import (ExperimentConfig, ExperimentReport, MethodResult,
                      emit_report, render_report, run_table1, run_table2)
from .market import (ActiveSet, DeltaKernel, GaussianKernel, Market,
                     SigmaSelection, TrainingCurve, active_set, delta_update,
                     gaussian_update, init_market, load_market, predict,
                     price_density, save_market, select_sigma, train_epochs,
                     update)
from .quadrature import QuadratureRule, hermite_gauss, integrate_ratio
from .stats import TTestResult, Verdict, means_t_test, mse, paired_t_test

__version__ = "0.1.0"

__all__ = [
    "ActiveSet", "Dataset", "DeltaKernel", "ExperimentConfig",
    "ExperimentReport", "Forest", "ForestParams", "GaussianKernel",
    "GaussianLeaf", "Market", "MethodResult", "QuadratureRule",
    "RandomFeature", "SigmaSelection", "SplitSpec", "TTestResult",
    "TrainingCurve", "Tree", "Verdict", "active_set", "best_split",
    "delta_update", "emit_report", "evaluate_feature", "forest_fingerprint",
    "forest_predict", "friedman_signal", "gaussian_update",
    "generate_feature_pool", "generate_friedman", "grow_forest", "grow_tree",
    "hermite_gauss", "init_market", "integrate_ratio", "leaf_for",
    "load_csv", "load_forest", "load_market", "means_t_test", "mse",
    "paired_t_test", "predict", "price_density", "random_split",
    "render_report", "run_table1", "run_table2", "save_csv", "save_forest",
    "save_market", "select_sigma", "train_epochs", "update",
]
