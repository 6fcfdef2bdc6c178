"""End-to-end experiment runner: forests plus markets across repeated runs.

Two protocols are provided. "table1" grows fully grown trees on each train
split and compares the plain forest (RF) with the delta-update market (DM)
and the Gaussian-update market (GM), reporting the test MSE that is minimal
over the training epochs, averaged over runs. "table2" grows depth-limited
trees, evaluates everything at a shallower depth cap, and additionally
times capped versus full-depth evaluation to report the speedup.
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .datasets import Dataset, generate_friedman, load_csv, random_split
from .forest import Forest, ForestParams, grow_forest
from .market import (DEFAULT_ALPHA_GRID, DeltaKernel, GaussianKernel,
                     init_market, select_sigma, train_epochs)
from .quadrature import hermite_gauss
from .stats import TTestResult, Verdict, means_t_test, mse, paired_t_test

SYNTHETIC_NAMES = ("friedman1", "friedman2", "friedman3")

KERNEL_LABELS = {"delta": "DM", "gauss": "GM"}

# Sentinel meaning "use the experiment's conventional value".
DEFAULT = "default"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; every field maps to a CLI flag."""

    experiment: str = "table1"
    data: str = ""
    test_data: Optional[str] = None
    target: Union[str, int, None] = None
    delimiter: str = ","
    runs: int = 100
    test_fraction: float = 0.1
    train_size: int = 200
    test_size: int = 2000
    trees: int = 100
    candidates: int = 25
    pool: int = 1000
    min_split: int = 5
    max_depth: Union[int, None, str] = DEFAULT
    depth_cap: Union[int, None, str] = DEFAULT
    epochs: int = 50
    kernels: tuple = ("delta", "gauss")
    quad_points: int = 5
    alpha_grid: tuple = DEFAULT_ALPHA_GRID
    eta: Union[str, float] = "auto"
    seed: int = 0
    bootstrap: bool = False
    published_mse: Optional[float] = None
    jobs: int = 1
    timing_reps: int = 5
    out: Optional[str] = None
    format: str = "markdown"

    def __post_init__(self):
        if self.experiment not in ("table1", "table2"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        for kernel in self.kernels:
            if kernel not in KERNEL_LABELS:
                raise ValueError(f"unknown kernel {kernel!r}")
        if self.format not in ("csv", "markdown"):
            raise ValueError(f"unknown format {self.format!r}")
        if not self.data:
            raise ValueError("a dataset (csv path or friedman1|2|3) is required")

    def resolved_max_depth(self) -> Optional[int]:
        if self.max_depth is DEFAULT or self.max_depth == DEFAULT:
            return 10 if self.experiment == "table2" else None
        return self.max_depth

    def resolved_depth_cap(self) -> Optional[int]:
        if self.depth_cap is DEFAULT or self.depth_cap == DEFAULT:
            return 5 if self.experiment == "table2" else None
        return self.depth_cap

    def forest_params(self, seed: int) -> ForestParams:
        return ForestParams(trees=self.trees, candidates=self.candidates,
                            pool_size=self.pool, min_split=self.min_split,
                            max_depth=self.resolved_max_depth(),
                            bootstrap=self.bootstrap, seed=seed)


@dataclass
class MethodResult:
    """Per-run MSE vector for one method plus its aggregate and verdicts."""

    name: str
    per_run: np.ndarray
    mean: float
    sd: float
    vs_rf: Optional[TTestResult] = None
    vs_published: Optional[TTestResult] = None
    legit_vs_published: Optional[bool] = None

    @classmethod
    def from_runs(cls, name, values) -> "MethodResult":
        values = np.asarray(values, dtype=float)
        sd = float(values.std(ddof=1)) if values.size >= 2 else 0.0
        return cls(name=name, per_run=values, mean=float(values.mean()), sd=sd)


@dataclass
class ExperimentReport:
    experiment: str
    dataset_name: str
    num_features: int
    response_range: tuple
    n_train: int
    n_test: int
    runs: int
    seed: int
    methods: list
    curves: dict
    sigma: Optional[float] = None
    sigma_alpha: Optional[float] = None
    timing_capped: Optional[np.ndarray] = None
    timing_full: Optional[np.ndarray] = None
    speedup: Optional[float] = None
    final_means: dict = field(default_factory=dict)

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)


@dataclass
class _RunRecord:
    rf: float
    best: dict
    final: dict
    curves: dict
    n_train: int
    n_test: int
    time_capped: Optional[float] = None
    time_full: Optional[float] = None


def _run_seed_sequences(config: ExperimentConfig):
    """Derive all child seed sequences up front.

    spawn() advances the parent's counter, so every consumer gets its own
    pre-spawned leaf; the schedule then cannot depend on execution order or
    on how runs are distributed over workers.
    """
    root = np.random.SeedSequence(config.seed)
    sigma_seq, *run_seqs = root.spawn(config.runs + 1)
    pairs = [tuple(rs.spawn(2)) for rs in run_seqs]  # (data, forest) per run
    return sigma_seq, pairs


def _seed_int(seed_seq: np.random.SeedSequence) -> int:
    words = seed_seq.generate_state(2, dtype=np.uint32)
    return int(words[0]) << 32 | int(words[1])


def _run_data(config: ExperimentConfig, data_rng: np.random.Generator):
    """Materialize (train, test) for one run."""
    if config.data in SYNTHETIC_NAMES:
        which = int(config.data[-1])
        train = generate_friedman(which, config.train_size, data_rng)
        test = generate_friedman(which, config.test_size, data_rng)
        return train, test
    full = load_csv(config.data, config.target, config.delimiter)
    if config.test_data:
        test = load_csv(config.test_data, config.target, config.delimiter)
        return full, test
    return random_split(full, config.test_fraction, data_rng)


def _resolve_eta(config: ExperimentConfig, n_train: int) -> float:
    if config.eta == "auto":
        return 10.0 / n_train
    return float(config.eta)


def _median_eval_time(forest: Forest, X: np.ndarray, depth_cap,
                      reps: int) -> float:
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        forest.predict(X, depth_cap)
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def _execute_run(config: ExperimentConfig, run_index: int,
                 data_seq: np.random.SeedSequence,
                 forest_seq: np.random.SeedSequence,
                 sigma: Optional[float]) -> _RunRecord:
    train, test = _run_data(config, np.random.default_rng(data_seq))
    forest = grow_forest(train, config.forest_params(_seed_int(forest_seq)))
    depth_cap = config.resolved_depth_cap()

    rf_mse = mse(forest.predict(test.features, depth_cap), test.response)
    eta = _resolve_eta(config, train.num_rows)

    best, final, curves = {}, {}, {}
    for kernel_name in config.kernels:
        if kernel_name == "gauss":
            kernel = GaussianKernel(sigma, hermite_gauss(config.quad_points))
        else:
            kernel = DeltaKernel()
        market = init_market(forest, depth_cap, eta, kernel)
        curve = train_epochs(market, train, test, config.epochs)
        label = KERNEL_LABELS[kernel_name]
        best[label] = curve.best_test_mse
        final[label] = curve.final_test_mse
        curves[label] = curve.test_mse

    record = _RunRecord(rf=rf_mse, best=best, final=final, curves=curves,
                        n_train=train.num_rows, n_test=test.num_rows)
    if config.experiment == "table2":
        larger = train.features if train.num_rows >= test.num_rows else test.features
        record.time_capped = _median_eval_time(forest, larger, depth_cap,
                                               config.timing_reps)
        record.time_full = _median_eval_time(forest, larger, None,
                                             config.timing_reps)
    return record


def _execute_run_indexed(args):
    config, run_index, data_seq, forest_seq, sigma = args
    try:
        return _execute_run(config, run_index, data_seq, forest_seq, sigma)
    except Exception as exc:
        raise RuntimeError(f"run {run_index} failed: {exc}") from exc


def _select_run_sigma(config: ExperimentConfig,
                      sigma_seq: np.random.SeedSequence,
                      first_data_seq: np.random.SeedSequence) -> float:
    """Cross-validate the Gaussian bandwidth on the first run's training set,
    then freeze it for every run."""
    train, _ = _run_data(config, np.random.default_rng(first_data_seq))
    selection = select_sigma(
        train,
        config.forest_params(_seed_int(sigma_seq)),
        rng=np.random.default_rng(sigma_seq),
        alpha_grid=config.alpha_grid,
        depth_cap=config.resolved_depth_cap(),
        eta=config.eta,
        epochs=config.epochs,
        quad_points=config.quad_points,
    )
    return selection.sigma


def _aggregate(config: ExperimentConfig, records: list, sigma: Optional[float],
               train: Dataset, test: Dataset) -> ExperimentReport:
    rf_runs = np.array([r.rf for r in records])
    methods = [MethodResult.from_runs("RF", rf_runs)]
    curves = {}
    final_means = {}
    for kernel_name in config.kernels:
        label = KERNEL_LABELS[kernel_name]
        values = np.array([r.best[label] for r in records])
        result = MethodResult.from_runs(label, values)
        if len(records) >= 2:
            result.vs_rf = paired_t_test(values, rf_runs)
        methods.append(result)
        curves[label] = np.vstack([r.curves[label] for r in records])
        final_means[label] = float(np.mean([r.final[label] for r in records]))

    if config.published_mse is not None and len(records) >= 2:
        for result in methods:
            result.vs_published = means_t_test(
                result.mean, result.sd, len(records),
                config.published_mse, 0.0, 1)
        rf_better = methods[0].vs_published.verdict is Verdict.A_BETTER
        for result in methods[1:]:
            result.legit_vs_published = (
                result.vs_published.verdict is Verdict.A_BETTER
                and not rf_better)

    lo = min(train.response_range[0], test.response_range[0])
    hi = max(train.response_range[1], test.response_range[1])
    report = ExperimentReport(
        experiment=config.experiment,
        dataset_name=(config.data if config.data in SYNTHETIC_NAMES
                      else _dataset_label(config.data)),
        num_features=train.num_features,
        response_range=(lo, hi),
        n_train=records[0].n_train,
        n_test=records[0].n_test,
        runs=len(records),
        seed=config.seed,
        methods=methods,
        curves=curves,
        sigma=sigma,
        final_means=final_means,
    )
    if config.experiment == "table2":
        report.timing_capped = np.array([r.time_capped for r in records])
        report.timing_full = np.array([r.time_full for r in records])
        report.speedup = float(report.timing_full.mean()
                               / report.timing_capped.mean())
    return report


def _dataset_label(path: str) -> str:
    import os

    return os.path.splitext(os.path.basename(path))[0]


def _run_experiment(config: ExperimentConfig) -> ExperimentReport:
    sigma_seq, seq_pairs = _run_seed_sequences(config)
    sigma = None
    if "gauss" in config.kernels:
        sigma = _select_run_sigma(config, sigma_seq, seq_pairs[0][0])

    tasks = [(config, r, seq_pairs[r][0], seq_pairs[r][1], sigma)
             for r in range(config.runs)]
    if config.jobs > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            records = list(pool.map(_execute_run_indexed, tasks))
    else:
        records = [_execute_run_indexed(task) for task in tasks]

    # deriving a generator from a seed sequence does not consume it, so this
    # re-materializes exactly the data run 0 saw
    train, test = _run_data(config, np.random.default_rng(seq_pairs[0][0]))
    report = _aggregate(config, records, sigma, train, test)
    if config.out:
        emit_report(report, config.format, config.out)
    return report


def run_table1(config: ExperimentConfig) -> ExperimentReport:
    """Fully grown trees; market aggregation of the true leaves."""
    if config.experiment != "table1":
        config = replace(config, experiment="table1")
    return _run_experiment(config)


def run_table2(config: ExperimentConfig) -> ExperimentReport:
    """Depth-limited trees evaluated at a shallow cap, with eval timings."""
    if config.experiment != "table2":
        config = replace(config, experiment="table2")
    return _run_experiment(config)


# -- report rendering --------------------------------------------------------

TIMING_MARKER = "--- timings (non-deterministic) ---"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _annotation(result: MethodResult) -> str:
    marks = ""
    if result.vs_rf is not None:
        if result.vs_rf.verdict is Verdict.A_BETTER:
            marks += "*"
        elif result.vs_rf.verdict is Verdict.B_BETTER:
            marks += "!"
    if result.vs_published is not None:
        if result.vs_published.verdict is Verdict.A_BETTER:
            marks += "+"
        elif result.vs_published.verdict is Verdict.B_BETTER:
            marks += "-"
    return marks


def render_report(report: ExperimentReport, fmt: str = "markdown",
                  include_timings: bool = True) -> str:
    """Render a report deterministically; timings go in a marked trailer.

    Columns: dataset, n_train, n_test, F, Y range, one column per method
    (mean MSE), annotations, speedup. '*'/'!' mean significantly better or
    worse than RF (paired test); '+'/'-' mean significantly better or worse
    than the published value.
    """
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown format {fmt!r}")
    names = [m.name for m in report.methods]
    annotations = " ".join(
        f"{m.name}:{_annotation(m)}" for m in report.methods[1:]
        if _annotation(m))
    y_lo, y_hi = (report.response_range if report.response_range
                  else (float("nan"), float("nan")))
    # the speedup is wall-clock derived, so it only appears when timings are
    # requested; the deterministic section leaves the column empty
    speedup_cell = _fmt(report.speedup) if include_timings else ""
    row = ([report.dataset_name, report.n_train, report.n_test,
            report.num_features, f"[{_fmt(y_lo)},{_fmt(y_hi)}]"]
           + [_fmt(m.mean) for m in report.methods]
           + [annotations, speedup_cell])
    header = (["dataset", "n_train", "n_test", "F", "Y"]
              + names + ["annotations", "speedup"])

    lines = []
    if fmt == "csv":
        lines.append(",".join(header))
        lines.append(",".join(str(c) for c in row))
    else:
        lines.append(f"# {report.experiment} report")
        lines.append("")
        lines.append(f"dataset: {report.dataset_name}  runs: {report.runs}  "
                     f"seed: {report.seed}")
        if report.sigma is not None:
            lines.append(f"gaussian kernel bandwidth: {_fmt(report.sigma)}")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join("---" for _ in header) + "|")
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
        lines.append("")
        lines.append("per-method detail (mean of min-epoch test MSE, sd, "
                     "final-epoch mean):")
        for m in report.methods:
            final = report.final_means.get(m.name)
            detail = f"- {m.name}: mean={_fmt(m.mean)} sd={_fmt(m.sd)}"
            if final is not None:
                detail += f" final={_fmt(final)}"
            if m.vs_rf is not None:
                detail += (f" vs RF: t={_fmt(m.vs_rf.statistic)}"
                           f" p={_fmt(m.vs_rf.p_value)}"
                           f" {m.vs_rf.verdict.value}")
            if m.vs_published is not None:
                detail += (f" vs published: {m.vs_published.verdict.value}")
            if m.legit_vs_published is not None:
                detail += f" legit={m.legit_vs_published}"
            lines.append(detail)
    body = "\n".join(lines) + "\n"

    if include_timings and report.speedup is not None:
        timing_lines = [
            TIMING_MARKER,
            f"mean eval time capped: {report.timing_capped.mean():.6g}s",
            f"mean eval time full: {report.timing_full.mean():.6g}s",
            f"speedup: {report.speedup:.6g}",
        ]
        body += "\n".join(timing_lines) + "\n"
    return body


def emit_report(report: ExperimentReport, fmt: str, path) -> None:
    """Write the rendered report; same report and format give identical bytes."""
    text = render_report(report, fmt)
    with open(path, "w") as handle:
        handle.write(text)
