"""Command-line interface.

Every subcommand accepts ``--seed`` (falls back to the ``seed`` field of a
config file, then to ``$UNCSENS_SEED``, then 0) and ``--threads``. The resolved
configuration is printed as one JSON line on stdout before work starts. On
failure a single JSON line ``{"error": ..., "message": ...}`` goes to stderr
and the exit code is non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from uncsens import __version__
from uncsens.data import DataError, Dataset, Manifest, Standardizer, generate_toy, load_csv, load_features_csv, write_csv
from uncsens.harness import (
    ExperimentConfig,
    evaluate,
    model_select,
    render_table,
    run_experiment,
    write_experiment_outputs,
)
from uncsens.model import NetworkArchitecture, TrainedModel, load_model, save_model
from uncsens.rng import RngStream
from uncsens.sensitivity import sensitivity_analysis, write_report_csv, write_report_json
from uncsens.training import ConfigError, TrainConfig, TrainingLog, train
from uncsens.uncertainty import UncertaintyDecomposition, decompose_points, write_decomposition_csv

OUTPUT_FORMAT_VERSION = 1
SEED_ENV = "UNCSENS_SEED"

# keys a training config file may carry besides the TrainConfig fields
_MODEL_KEYS = {"hidden_layer_sizes", "target_columns", "latent_prior_variance"}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _read_json(path: str, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError("io", f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{what} {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError("config", f"{what} {path} must contain a JSON object")
    return doc


def _resolve_seed(args, config_doc: dict | None = None) -> int:
    if args.seed is not None:
        return args.seed
    if config_doc and "seed" in config_doc:
        return int(config_doc["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError("config", f"${SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _announce(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "resolved_config": resolved}, sort_keys=True), flush=True)


def _check_counts(nw: int, nz: int) -> None:
    if nw < 2:
        raise CliError("argument", f"--nw must be >= 2 (got {nw})")
    if nz < 2:
        raise CliError("argument", f"--nz must be >= 2 (got {nz})")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


# -- subcommands -------------------------------------------------------------


def cmd_generate_toy(args) -> None:
    seed = _resolve_seed(args)
    _announce("generate-toy", {"n": args.n, "seed": seed, "out": args.out})
    if args.n < 1:
        raise CliError("argument", f"--n must be >= 1 (got {args.n})")
    write_csv(args.out, generate_toy(args.n, seed).dataset)


def _train_settings(args) -> tuple[TrainConfig, dict]:
    doc = _read_json(args.config, "config") if args.config else {}
    seed = _resolve_seed(args, doc)
    model_opts = {k: doc[k] for k in _MODEL_KEYS if k in doc}
    train_doc = {k: v for k, v in doc.items() if k not in _MODEL_KEYS}
    cfg = TrainConfig.from_dict(train_doc, seed=seed)
    hidden = model_opts.get("hidden_layer_sizes", [20, 20])
    if not isinstance(hidden, list) or not hidden or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError(f"invalid hidden_layer_sizes: {hidden!r}")
    targets = model_opts.get("target_columns")
    if targets is not None and (not isinstance(targets, list) or not all(isinstance(t, str) for t in targets)):
        raise ConfigError(f"invalid target_columns: {targets!r}")
    gamma = model_opts.get("latent_prior_variance", 1.0)
    if isinstance(gamma, bool) or not isinstance(gamma, (int, float)) or not gamma > 0:
        raise ConfigError(f"invalid latent_prior_variance: {gamma!r}")
    return cfg, {"hidden_layer_sizes": hidden, "target_columns": targets, "latent_prior_variance": float(gamma)}


def cmd_train(args) -> None:
    cfg, opts = _train_settings(args)
    _announce("train", {**cfg.to_dict(), **opts, "data": args.data, "out_model": args.out_model, "log": args.log})
    dataset = load_csv(args.data, opts["target_columns"])
    std = Standardizer.fit(dataset)
    arch = NetworkArchitecture(dataset.n_features, dataset.n_targets, tuple(opts["hidden_layer_sizes"]))
    with TrainingLog(args.log) as sink:
        posterior = train(std.transform(dataset), arch, cfg,
                          latent_prior_variance=opts["latent_prior_variance"], on_epoch=sink)
    save_model(args.out_model, TrainedModel(posterior, std, dataset.feature_names, dataset.target_names))


def _load_model(path: str) -> TrainedModel:
    try:
        return load_model(path)
    except OSError as exc:
        raise CliError("io", f"cannot read model {path}: {exc.strerror}") from None
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError("model", f"invalid model file {path}: {exc}") from None


def cmd_sensitivity(args) -> None:
    _check_counts(args.nw, args.nz)
    seed = _resolve_seed(args)
    _announce("sensitivity", {"model": args.model, "test": args.test, "nw": args.nw, "nz": args.nz,
                              "seed": seed, "threads": args.threads, "out": args.out})
    model = _load_model(args.model)
    xs = model.standardizer.transform_features(load_features_csv(args.test, model.feature_names))
    report = sensitivity_analysis(
        xs, model.posterior, args.nw, args.nz, RngStream(seed).substream("sensitivity"),
        threads=args.threads, feature_names=model.feature_names, feature_scales=model.standardizer.feature_stds,
    )
    report.seed = seed
    out = Path(args.out)
    write_report_csv(out, report)
    write_report_json(out.with_suffix(".json"), report)


def cmd_decompose(args) -> None:
    _check_counts(args.nw, args.nz)
    seed = _resolve_seed(args)
    _announce("decompose", {"model": args.model, "input": args.input, "nw": args.nw, "nz": args.nz,
                            "seed": seed, "with_noise": args.with_noise, "out": args.out})
    model = _load_model(args.model)
    std = model.standardizer
    xs = std.transform_features(load_features_csv(args.input, model.feature_names))
    decs = decompose_points(xs, model.posterior, args.nw, args.nz, RngStream(seed).substream("decompose"))
    # report in original target units
    raw = [
        UncertaintyDecomposition(std.inverse_targets(d.expectation), d.epistemic_std * std.target_stds,
                                 d.aleatoric_std * std.target_stds)
        for d in decs
    ]
    noise = model.posterior.output_noise_variances * std.target_stds**2 if args.with_noise else None
    write_decomposition_csv(args.out, raw, noise)


def cmd_evaluate(args) -> None:
    _check_counts(args.nw, args.nz)
    seed = _resolve_seed(args)
    _announce("evaluate", {"model": args.model, "test": args.test, "nw": args.nw, "nz": args.nz,
                           "seed": seed, "out": args.out})
    model = _load_model(args.model)
    test = load_csv(args.test, model.target_names)
    missing = [f for f in model.feature_names if f not in test.feature_names]
    if missing:
        raise DataError(f"{args.test}: feature column(s) {missing} not found")
    cols = [test.feature_names.index(f) for f in model.feature_names]
    test = Dataset(test.features[:, cols], test.targets, list(model.feature_names), list(model.target_names))
    ev = evaluate(model.standardizer.transform(test), model.posterior, args.nw, args.nz,
                  RngStream(seed).substream("evaluate"), model.standardizer.target_stds, args.threads)
    _write_json(Path(args.out), {
        "format_version": OUTPUT_FORMAT_VERSION,
        "seed": seed,
        "n_test": len(test),
        "n_w": args.nw,
        "n_z": args.nz,
        "test_log_likelihood": ev.ll_mean,
        "test_log_likelihood_stderr": ev.ll_stderr,
        "rmse": ev.rmse,
        "per_point_log_likelihood": ev.per_point_ll.tolist(),
    })


def _experiment_config(args) -> tuple[ExperimentConfig, dict]:
    doc = _read_json(args.config, "config") if args.config else {}
    seed = _resolve_seed(args, doc)
    doc = dict(doc)
    targets = doc.pop("target_columns", None)
    doc.pop("seed", None)
    return ExperimentConfig.from_dict(doc, seed=seed), {"target_columns": targets}


def _parse_grid(text: str) -> list[int]:
    try:
        grid = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError("argument", f"--grid must be a comma-separated list of integers, got {text!r}") from None
    if not grid or any(h < 1 for h in grid):
        raise CliError("argument", f"--grid must list positive integers, got {text!r}")
    return grid


def cmd_model_select(args) -> None:
    grid = _parse_grid(args.grid)
    cfg, extra = _experiment_config(args)
    name = args.name or Path(args.data).stem
    _announce("model-select", {**cfg.to_dict(), **extra, "data": args.data, "grid": grid,
                               "repeats": args.repeats, "out": args.out, "threads": args.threads})
    if args.repeats < 1:
        raise CliError("argument", f"--repeats must be >= 1 (got {args.repeats})")
    dataset = load_csv(args.data, extra["target_columns"])
    result = model_select(dataset, grid, args.repeats, cfg, name=name, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "model_selection.json", {**result.to_dict(), "config": cfg.to_dict()})
    (out / "table.md").write_text(render_table([result]), encoding="utf-8")


def cmd_experiment(args) -> None:
    cfg, extra = _experiment_config(args)
    _announce("experiment", {**cfg.to_dict(), "manifest": args.manifest, "out_dir": args.out_dir,
                             "threads": args.threads})
    try:
        manifest = Manifest.load(args.manifest)
    except OSError as exc:
        raise CliError("io", f"cannot read manifest {args.manifest}: {exc.strerror}") from None
    record = run_experiment(manifest, cfg, threads=args.threads)
    write_experiment_outputs(record, args.out_dir)


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Reports usage errors through the single-line JSON error channel."""

    def error(self, message: str):
        raise CliError("argument", f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"master seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker threads; results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="uncsens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-toy", parents=[common], help="write the heteroskedastic toy dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_toy)

    p = sub.add_parser("train", parents=[common], help="fit a model and write it as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out-model", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sensitivity", parents=[common], help="input sensitivities of expectation and uncertainty")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--nw", type=int, default=200)
    p.add_argument("--nz", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("decompose", parents=[common], help="per-point epistemic/aleatoric decomposition")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--nw", type=int, default=200)
    p.add_argument("--nz", type=int, default=200)
    p.add_argument("--with-noise", action="store_true", help="add an aleatoric_std_with_noise column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("evaluate", parents=[common], help="test log-likelihood and RMSE")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--nw", type=int, default=200)
    p.add_argument("--nz", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("model-select", parents=[common], help="hidden-unit model selection by test log-likelihood")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="20,40,60,80")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--config")
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_model_select)

    p = sub.add_parser("experiment", parents=[common], help="repeated split/train/evaluate/sensitivity run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except DataError as exc:
        return _fail("data", str(exc), 2)
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}".strip(": "), 1)
    except (ValueError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(message.split())}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
