"""Command-line entry point: ``regmarket run ...``.

Every experiment knob is a flag; the same keys can live in a flat
``key = value`` config file passed with --config, with explicit flags
taking precedence over file values.
"""

from __future__ import annotations

import argparse
import sys

from .harness import (DEFAULT, ExperimentConfig, render_report, run_table1,
                      run_table2)
from .market import DEFAULT_ALPHA_GRID


def _parse_depth(text: str):
    if text in ("unbounded", "none"):
        return None
    if text == DEFAULT:
        return DEFAULT
    return int(text)


def _parse_eta(text: str):
    return text if text == "auto" else float(text)


def _parse_alpha_grid(text: str):
    """start:step:stop, inclusive of the endpoint up to round-off."""
    try:
        start, step, stop = (float(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected start:step:stop, got {text!r}") from None
    if step <= 0 or start <= 0 or stop < start:
        raise argparse.ArgumentTypeError(f"bad alpha grid {text!r}")
    values = []
    k = 0
    while True:
        value = start + k * step
        if value > stop + 1e-12:
            break
        values.append(round(value, 10))
        k += 1
    return tuple(values)


def _parse_kernels(text: str):
    if text == "both":
        return ("delta", "gauss")
    if text in ("delta", "gauss"):
        return (text,)
    raise argparse.ArgumentTypeError(f"kernel must be delta|gauss|both, got {text!r}")


def _parse_target(text: str):
    return text


_CONFIG_PARSERS = {
    "experiment": str,
    "data": str,
    "test_data": str,
    "target": str,
    "delimiter": str,
    "runs": int,
    "test_fraction": float,
    "train_size": int,
    "test_size": int,
    "trees": int,
    "candidates": int,
    "pool": int,
    "min_split": int,
    "max_depth": _parse_depth,
    "depth_cap": _parse_depth,
    "epochs": int,
    "kernel": _parse_kernels,
    "quad_points": int,
    "alpha_grid": _parse_alpha_grid,
    "eta": _parse_eta,
    "seed": int,
    "bootstrap": lambda v: v.lower() in ("1", "true", "yes"),
    "published_mse": float,
    "jobs": int,
    "timing_reps": int,
    "out": str,
    "format": str,
}


def _load_config_file(path: str) -> dict:
    values = {}
    with open(path) as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in _CONFIG_PARSERS:
                raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = _CONFIG_PARSERS[key](value.strip())
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regmarket",
        description="Train regression forests and market aggregators, "
                    "reproducing the MSE benchmark protocol.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a benchmark experiment")
    run.add_argument("--config", help="flat key=value config file")
    run.add_argument("--experiment", choices=["table1", "table2"],
                     default="table1")
    run.add_argument("--data",
                     help="csv path or friedman1|friedman2|friedman3")
    run.add_argument("--test-data", dest="test_data",
                     help="csv with a fixed test set (disables splitting)")
    run.add_argument("--target", type=_parse_target,
                     help="target column name or index")
    run.add_argument("--delimiter", default=",")
    run.add_argument("--runs", type=int, default=100)
    run.add_argument("--test-fraction", dest="test_fraction", type=float,
                     default=0.1)
    run.add_argument("--train-size", dest="train_size", type=int, default=200,
                     help="training rows for synthetic generators")
    run.add_argument("--test-size", dest="test_size", type=int, default=2000,
                     help="test rows for synthetic generators")
    run.add_argument("--trees", type=int, default=100)
    run.add_argument("--candidates", type=int, default=25)
    run.add_argument("--pool", type=int, default=1000)
    run.add_argument("--min-split", dest="min_split", type=int, default=5)
    run.add_argument("--max-depth", dest="max_depth", type=_parse_depth,
                     default=DEFAULT,
                     help="integer or 'unbounded' (default: unbounded for "
                          "table1, 10 for table2)")
    run.add_argument("--depth-cap", dest="depth_cap", type=_parse_depth,
                     default=DEFAULT,
                     help="integer or 'none' (default: none for table1, 5 "
                          "for table2)")
    run.add_argument("--epochs", type=int, default=50)
    run.add_argument("--kernel", dest="kernel", type=_parse_kernels,
                     default=("delta", "gauss"),
                     help="delta, gauss, or both")
    run.add_argument("--quad-points", dest="quad_points", type=int, default=5)
    run.add_argument("--alpha-grid", dest="alpha_grid",
                     type=_parse_alpha_grid, default=DEFAULT_ALPHA_GRID,
                     help="bandwidth grid as start:step:stop, e.g. "
                          "0.05:0.05:1.0")
    run.add_argument("--eta", type=_parse_eta, default="auto",
                     help="'auto' (10/N_train) or a number")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--bootstrap", action="store_true",
                     help="grow each tree on a bootstrap resample")
    run.add_argument("--published-mse", dest="published_mse", type=float,
                     help="reference MSE for +/- significance marks")
    run.add_argument("--jobs", type=int, default=1,
                     help="worker processes for concurrent runs")
    run.add_argument("--timing-reps", dest="timing_reps", type=int, default=5)
    run.add_argument("--out", help="report output path")
    run.add_argument("--format", choices=["csv", "markdown"],
                     default="markdown")
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    return ExperimentConfig(
        experiment=args.experiment,
        data=args.data or "",
        test_data=args.test_data,
        target=args.target,
        delimiter=args.delimiter,
        runs=args.runs,
        test_fraction=args.test_fraction,
        train_size=args.train_size,
        test_size=args.test_size,
        trees=args.trees,
        candidates=args.candidates,
        pool=args.pool,
        min_split=args.min_split,
        max_depth=args.max_depth,
        depth_cap=args.depth_cap,
        epochs=args.epochs,
        kernels=tuple(args.kernel),
        quad_points=args.quad_points,
        alpha_grid=tuple(args.alpha_grid),
        eta=args.eta,
        seed=args.seed,
        bootstrap=args.bootstrap,
        published_mse=args.published_mse,
        jobs=args.jobs,
        timing_reps=args.timing_reps,
        out=args.out,
        format=args.format,
    )


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command != "run":
        parser.error(f"unknown command {args.command!r}")
    try:
        if args.config:
            file_values = _load_config_file(args.config)
            # flags given explicitly on the command line win over the file
            explicit = {a.split("=")[0].lstrip("-").replace("-", "_")
                        for a in (argv if argv is not None else sys.argv[1:])
                        if a.startswith("--")}
            for key, value in file_values.items():
                attr = "kernel" if key == "kernel" else key
                if attr not in explicit:
                    setattr(args, attr, value)
        config = _config_from_args(args)
        runner = run_table2 if config.experiment == "table2" else run_table1
        report = runner(config)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"regmarket: error: {exc}", file=sys.stderr)
        return 1
    print(render_report(report, config.format))
    if config.out:
        print(f"report written to {config.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
