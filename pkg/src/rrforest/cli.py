"""Command-line entry point: ``rrforest <command> [options]``.

Every option may also be given in a JSON file passed with ``--config``;
flags on the command line take precedence over the file. Exit codes are
0 on success, 2 for configuration errors, 3 for data errors and 4 for
numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import DataError, MissingColumn, NonFiniteValue, TrialDataset, ingest_csv, write_csv
from .evaluation import OmnibusError, anova_omnibus, center_data, test_calibration
from .forest import CausalForestModel, ForestConfig, predict_tau, train_forest, variable_importance
from .glm import GlmError
from .simulation import (
    SCHEMA_VERSION,
    SyntheticTrialConfig,
    default_forest_configs,
    default_generator,
    generate_trial,
    run_experiment,
)

LOG_ENV = "RRFOREST_LOG_LEVEL"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("rrforest")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# name -> (type, default, help); None defaults are resolved per command
_FOREST_OPTIONS = {
    "trees": (int, 2000, "number of trees"),
    "link": (str, "poisson-log", "split GLM family"),
    "subsample_fraction": (float, 0.5, "share of rows drawn per tree"),
    "honesty_fraction": (float, 0.5, "share of each subsample used to place splits"),
    "min_node_per_arm": (int, 5, "minimum treated and control rows per leaf"),
    "max_candidates": (int, 64, "maximum thresholds tried per feature"),
    "mtry": (int, None, "features tried per node (default ceil(sqrt(d)))"),
    "z_threshold": (int, None, "split-half size below which the risk projection is used"),
    "split_statistic": (str, "wald", "wald or lrt"),
}

_COMMANDS = {
    "simulate": {
        "generator": (str, None, "generator JSON (default: shipped generator)"),
        "k": (float, 1.0, "relative heterogeneity factor K"),
        "n": (int, None, "number of rows (default: generator's n)"),
        "seed": (int, 0, "random seed"),
        "output": (str, None, "trial CSV to write"),
        "oracle_output": (str, None, "oracle sidecar CSV (default: <output>.oracle.csv)"),
    },
    "train": {
        "input": (str, None, "training CSV with columns y, w, features..."),
        "output": (str, None, "model JSON to write"),
        "seed": (int, 0, "random seed"),
        "workers": (int, None, "parallel workers (default: all available)"),
        **_FOREST_OPTIONS,
    },
    "predict": {
        "model": (str, None, "model JSON"),
        "input": (str, None, "CSV containing the model's feature columns"),
        "output": (str, None, "prediction CSV to write"),
    },
    "evaluate": {
        "model": (str, None, "model JSON"),
        "input": (str, None, "held-out CSV with columns y, w, features..."),
        "output": (str, None, "result JSON to write"),
        "folds": (int, 5, "cross-fitting folds for the outcome model"),
        "seed": (int, 0, "fold assignment seed"),
    },
    "experiment": {
        "generator": (str, None, "generator JSON (default: shipped generator)"),
        "k": (str, "1,1.5,2", "comma-separated K values"),
        "trials": (int, 20, "trials per K"),
        "n": (int, None, "rows per trial (default: generator's n)"),
        "trees": (int, 2000, "trees per forest"),
        "seed": (int, 0, "random seed"),
        "test_fraction": (float, 0.2, "held-out share of each trial"),
        "folds": (int, 5, "cross-fitting folds for the calibration test"),
        "workers": (int, None, "parallel workers (default: all available)"),
        "output_dir": (str, None, "directory for report.json, records.csv, power_curve.csv"),
    },
    "importance": {
        "model": (str, None, "model JSON"),
        "output": (str, None, "importance CSV to write"),
        "max_depth": (int, 4, "deepest split level counted"),
        "decay": (float, 2.0, "depth weight exponent"),
    },
}

_REQUIRED = {
    "simulate": ("output",),
    "train": ("input", "output"),
    "predict": ("model", "input", "output"),
    "evaluate": ("model", "input", "output"),
    "experiment": ("output_dir",),
    "importance": ("model", "output"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="rrforest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with option values")
        for key, (kind, default, text) in options.items():
            shown = f" (default: {default})" if default is not None else ""
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind,
                           default=None, help=text + shown)
    return parser


def resolve_options(command, args):
    """Merge defaults, the JSON config file and explicit flags (in that order)."""
    options = _COMMANDS[command]
    merged = {key: default for key, (_, default, _) in options.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded.pop("schema_version", None)
        unknown = sorted(set(loaded) - set(options))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        for key, value in loaded.items():
            kind = options[key][0]
            try:
                merged[key] = None if value is None else kind(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
    for key in options:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    missing = [k for k in _REQUIRED[command] if merged.get(k) is None]
    if missing:
        raise ConfigError(f"{command} requires: {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return merged


def _workers(value):
    if value is None:
        return max(1, len(os.sched_getaffinity(0)))
    if value < 1:
        raise ConfigError("workers must be positive")
    return value


def _forest_config(opts, seed):
    try:
        return ForestConfig(
            n_trees=opts["trees"],
            subsample_fraction=opts["subsample_fraction"],
            honesty_fraction=opts["honesty_fraction"],
            min_node_per_arm=opts["min_node_per_arm"],
            max_candidates_per_feature=opts["max_candidates"],
            mtry=opts["mtry"],
            link=opts["link"],
            z_projection_threshold=opts["z_threshold"],
            split_statistic=opts["split_statistic"],
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _generator(path):
    if path is None:
        return default_generator()
    try:
        return SyntheticTrialConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid generator config {path}: {exc}") from exc


def _existing(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _write_json(path, payload):
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def _write_rows(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _load_model(path):
    _existing(path, "model")
    try:
        data = json.loads(Path(path).read_text())
        data.pop("schema_version", None)
        return CausalForestModel.from_dict(data)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model file {path}: {exc}") from exc


def read_features(path, feature_names):
    """Feature matrix from a CSV holding (at least) the named columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(f"{path}: empty file") from None
        missing = [f for f in feature_names if f not in header]
        if missing:
            raise MissingColumn(f"{path}: missing feature column(s) {missing}")
        idx = [header.index(f) for f in feature_names]
        rows = []
        for lineno, record in enumerate(reader, start=1):
            if not record:
                continue
            values = []
            for j, name in zip(idx, feature_names):
                try:
                    v = float(record[j])
                except (IndexError, ValueError):
                    raise NonFiniteValue(f"{path}: row {lineno}, column {name!r}: not a number") from None
                if not np.isfinite(v):
                    raise NonFiniteValue(f"{path}: row {lineno}, column {name!r}: non-finite value")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def cmd_simulate(opts):
    gen = _generator(opts["generator"])
    changes = {"k_factor": opts["k"], "seed": opts["seed"]}
    if opts["n"] is not None:
        changes["n"] = opts["n"]
    try:
        gen = gen.replace(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    trial = generate_trial(gen)
    write_csv(trial.dataset, opts["output"])
    sidecar = opts["oracle_output"] or str(opts["output"]) + ".oracle.csv"
    _write_rows(
        sidecar,
        ["row", "baseline_risk", "adjusted_risk", "t_indicator"],
        [[i, float(b), float(a), int(t)] for i, (b, a, t) in
         enumerate(zip(trial.baseline_risk, trial.adjusted_risk, trial.t_indicator))],
    )
    logger.info("wrote %d rows to %s", trial.dataset.n, opts["output"])


def cmd_train(opts):
    config = _forest_config(opts, opts["seed"])
    dataset = ingest_csv(_existing(opts["input"], "input"))
    model = train_forest(dataset, config, n_jobs=_workers(opts["workers"]))
    _write_json(opts["output"], model.to_dict())
    logger.info("trained %d trees on %d rows", len(model.trees), dataset.n)


def cmd_predict(opts):
    model = _load_model(opts["model"])
    X = read_features(_existing(opts["input"], "input"), model.feature_names)
    est = predict_tau(model, X)
    _write_rows(opts["output"], ["row", "tau_rd", "tau_rr"],
                [[i, float(a), float(b)] for i, (a, b) in enumerate(zip(est.tau_rd, est.tau_rr))])


def cmd_evaluate(opts):
    model = _load_model(opts["model"])
    data = ingest_csv(_existing(opts["input"], "input"))
    if data.feature_names != tuple(model.feature_names):
        raise MissingColumn(
            f"{opts['input']}: feature columns {list(data.feature_names)} do not match the model's "
            f"{list(model.feature_names)}"
        )
    if opts["folds"] < 2:
        raise ConfigError("folds must be at least 2")
    est = predict_tau(model, data.X)
    y_tilde, w_tilde = center_data(data, folds=opts["folds"], family=model.config.link,
                                   seed=opts["seed"])
    calib = test_calibration(est, y_tilde, w_tilde)
    anova = anova_omnibus(data, est.tau_rr)
    _write_json(opts["output"], {"calibration": calib.to_dict(), "anova": anova.to_dict()})


def _parse_k(text):
    try:
        ks = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid --k list {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("K values must be a non-empty list of numbers >= 1")
    return ks


def cmd_experiment(opts):
    gen = _generator(opts["generator"])
    changes = {"seed": opts["seed"]}
    if opts["n"] is not None:
        changes["n"] = opts["n"]
    try:
        gen = gen.replace(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if opts["trials"] < 1 or opts["trees"] < 1:
        raise ConfigError("trials and trees must be positive")
    if not 0 < opts["test_fraction"] < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    report = run_experiment(
        gen, _parse_k(opts["k"]), opts["trials"],
        default_forest_configs(n_trees=opts["trees"], seed=opts["seed"]),
        test_fraction=opts["test_fraction"], folds=opts["folds"],
        n_jobs=_workers(opts["workers"]),
    )
    out = Path(opts["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    header, rows = report.csv_rows()
    _write_rows(out / "records.csv", header, rows)
    _write_rows(out / "power_curve.csv", ["k", "variant", "n_trials", "rejection_fraction"],
                report.power_curve())
    payload = report.to_dict()
    payload.pop("schema_version")
    payload["generator"] = gen.to_dict()
    payload["generator"].pop("schema_version")
    _write_json(out / "report.json", payload)


def cmd_importance(opts):
    model = _load_model(opts["model"])
    if opts["max_depth"] < 1:
        raise ConfigError("max_depth must be positive")
    imp = variable_importance(model, max_depth=opts["max_depth"], decay_exponent=opts["decay"])
    names = model.feature_names or tuple(f"x{j}" for j in range(model.n_features))
    _write_rows(opts["output"], ["feature", "importance"],
                [[name, float(v)] for name, v in zip(names, imp)])


_HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "importance": cmd_importance,
}


def run(command, opts):
    """Execute one command with resolved options; returns the exit code."""
    try:
        _HANDLERS[command](opts)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except (GlmError, OmnibusError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        opts = resolve_options(args.command, args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return run(args.command, opts)


if __name__ == "__main__":
    sys.exit(main())
