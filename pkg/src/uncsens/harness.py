"""Experiment orchestration: evaluation, model selection and repeated runs."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from uncsens.data import Dataset, Manifest, Standardizer, split
from uncsens.model import LOG_2PI, NetworkArchitecture, TrainedModel, VariationalPosterior
from uncsens.rng import RngStream, derive_stream_id
from uncsens.sensitivity import (
    SensitivityReport,
    aggregate_reports,
    sensitivity_analysis,
    write_report_csv,
    write_report_json,
)
from uncsens.training import ConfigError, TrainConfig, train
from uncsens.uncertainty import predictive_grid

log = logging.getLogger(__name__)

RESULTS_FORMAT_VERSION = 1


def log_mean_exp(values: np.ndarray, axis=None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    out = np.log(np.mean(np.exp(values - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def standard_error(values: Sequence[float]) -> float | None:
    """``std(ddof=1) / sqrt(n)``; ``None`` when fewer than two values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return None
    return float(values.std(ddof=1) / math.sqrt(values.size))


@dataclass
class Evaluation:
    ll_mean: float
    ll_stderr: float | None
    rmse: float
    per_point_ll: np.ndarray


def point_log_likelihood(y: np.ndarray, samples: np.ndarray, noise_variances: np.ndarray) -> float:
    """``log mean_{w,z} N(y | samples[w, z], Sigma)`` in the units of ``y``."""
    r = samples - y
    lp = np.sum(-0.5 * (LOG_2PI + np.log(noise_variances)) - 0.5 * r * r / noise_variances, axis=-1)
    return float(log_mean_exp(lp.reshape(-1)))


def evaluate(
    test_set: Dataset,
    posterior: VariationalPosterior,
    n_w: int,
    n_z: int,
    stream: RngStream,
    target_stds: np.ndarray | None = None,
    threads: int = 1,
) -> Evaluation:
    """Test log-likelihood and RMSE of a posterior on a standardized test set.

    Both are reported in original target units: the log-likelihood by
    subtracting ``sum_k log target_std_k``, the RMSE by scaling with the
    target std.
    """
    if n_w * n_z < 2:
        raise ValueError("need N_w * N_z >= 2")
    if len(test_set) == 0:
        raise ValueError("empty test set")
    stds = np.ones(test_set.n_targets) if target_stds is None else np.asarray(target_stds, dtype=np.float64)
    noise = posterior.output_noise_variances
    shift = float(np.sum(np.log(stds)))

    def one(i: int) -> tuple[float, np.ndarray]:
        grid = predictive_grid(test_set.features[i], posterior, n_w, n_z, stream.substream("point", i))
        ll = point_log_likelihood(test_set.targets[i], grid.samples, noise) - shift
        return ll, grid.samples.mean(axis=(0, 1))

    idx = range(len(test_set))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]
    lls = np.array([r[0] for r in results])
    preds = np.stack([r[1] for r in results])
    err = (preds - test_set.targets) * stds
    return Evaluation(float(lls.mean()), standard_error(lls), float(np.sqrt(np.mean(err * err))), lls)


def test_log_likelihood(test_set: Dataset, posterior, n_w: int, n_z: int, stream: RngStream,
                        target_stds: np.ndarray | None = None) -> tuple[float, float | None]:
    """Mean per-point test log-likelihood and its standard error over test points."""
    ev = evaluate(test_set, posterior, n_w, n_z, stream, target_stds)
    return ev.ll_mean, ev.ll_stderr


test_log_likelihood.__test__ = False  # not a pytest test despite the name


# -- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden_layer_sizes: tuple[int, ...] = (20, 20)
    repetitions: int = 5
    train_fraction: float = 0.9
    n_w: int = 200
    n_z: int = 200
    latent_prior_variance: float = 1.0
    seed: int = 0

    _SCALARS = {
        "repetitions": int,
        "train_fraction": float,
        "n_w": int,
        "n_z": int,
        "latent_prior_variance": float,
        "seed": int,
    }

    def __post_init__(self) -> None:
        self.hidden_layer_sizes = tuple(int(h) for h in self.hidden_layer_sizes)
        if self.repetitions < 1:
            raise ConfigError(f"invalid repetitions: {self.repetitions!r}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"invalid train_fraction: {self.train_fraction!r}")
        if self.n_w < 2:
            raise ConfigError(f"invalid n_w: {self.n_w!r} (need >= 2)")
        if self.n_z < 2:
            raise ConfigError(f"invalid n_z: {self.n_z!r} (need >= 2)")
        if not self.latent_prior_variance > 0:
            raise ConfigError(f"invalid latent_prior_variance: {self.latent_prior_variance!r}")
        if not self.hidden_layer_sizes or any(h < 1 for h in self.hidden_layer_sizes):
            raise ConfigError(f"invalid hidden_layer_sizes: {list(self.hidden_layer_sizes)!r}")

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None) -> ExperimentConfig:
        """Accepts TrainConfig fields at top level or under ``"train"``."""
        doc = dict(doc)
        train_doc = dict(doc.pop("train", {}))
        kwargs: dict = {}
        for key, value in doc.items():
            if key in cls._SCALARS:
                typ = cls._SCALARS[key]
                if isinstance(value, bool) or not isinstance(value, (int, float)) or (typ is int and value != int(value)):
                    raise ConfigError(f"invalid {key}: {value!r}")
                kwargs[key] = typ(value)
            elif key == "hidden_layer_sizes":
                if not isinstance(value, list) or not all(isinstance(h, int) and not isinstance(h, bool) for h in value):
                    raise ConfigError(f"invalid hidden_layer_sizes: {value!r}")
                kwargs[key] = tuple(value)
            elif key in TrainConfig.__dataclass_fields__:
                train_doc[key] = value
            else:
                raise ConfigError(f"unknown config field {key!r}")
        if seed is not None:
            kwargs["seed"] = int(seed)
        train_doc.setdefault("seed", kwargs.get("seed", 0))
        return cls(train=TrainConfig.from_dict(train_doc), **kwargs)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "hidden_layer_sizes": list(self.hidden_layer_sizes),
            "repetitions": self.repetitions,
            "train_fraction": self.train_fraction,
            "n_w": self.n_w,
            "n_z": self.n_z,
            "latent_prior_variance": self.latent_prior_variance,
            "seed": self.seed,
        }


def repetition_seeds(master_seed: int, repetition: int) -> dict[str, int]:
    """Every seed a repetition consumes, derived from the master seed."""
    return {
        "split": derive_stream_id(master_seed, "split", repetition),
        "train": derive_stream_id(master_seed, "train", repetition) >> 1,
        "evaluate": derive_stream_id(master_seed, "evaluate", repetition),
        "sensitivity": derive_stream_id(master_seed, "sensitivity", repetition),
    }


@dataclass
class FittedRun:
    model: TrainedModel
    train_set: Dataset
    test_set: Dataset
    test_set_std: Dataset
    seeds: dict[str, int]


def fit_repetition(dataset: Dataset, hidden: Sequence[int], config: ExperimentConfig, repetition: int) -> FittedRun:
    seeds = repetition_seeds(config.seed, repetition)
    train_set, test_set = split(dataset, config.train_fraction, RngStream(seeds["split"]))
    std = Standardizer.fit(train_set)
    arch = NetworkArchitecture(dataset.n_features, dataset.n_targets, tuple(hidden))
    tcfg = TrainConfig(**{**config.train.to_dict(), "seed": seeds["train"]})
    posterior = train(std.transform(train_set), arch, tcfg, latent_prior_variance=config.latent_prior_variance)
    model = TrainedModel(posterior, std, list(dataset.feature_names), list(dataset.target_names))
    return FittedRun(model, train_set, test_set, std.transform(test_set), seeds)


# -- model selection ---------------------------------------------------------


@dataclass
class ModelSelectionResult:
    dataset: str
    grid: list[int]
    values: dict[int, list[float]]
    failures: list[dict] = field(default_factory=list)
    point_stderrs: dict[int, list[float | None]] = field(default_factory=dict)

    @property
    def incomplete(self) -> bool:
        return bool(self.failures)

    def mean(self, h: int) -> float | None:
        vals = self.values.get(h, [])
        return float(np.mean(vals)) if vals else None

    def stderr(self, h: int) -> float | None:
        return standard_error(self.values.get(h, []))

    @property
    def selected(self) -> int | None:
        """Hidden-unit count with the highest mean test LL; ties go to the smallest."""
        best, best_mean = None, -math.inf
        for h in sorted(self.grid):
            m = self.mean(h)
            if m is not None and m > best_mean:
                best, best_mean = h, m
        return best

    def to_dict(self) -> dict:
        return {
            "format_version": RESULTS_FORMAT_VERSION,
            "dataset": self.dataset,
            "grid": list(self.grid),
            "selected": self.selected,
            "incomplete": self.incomplete,
            "failures": self.failures,
            "results": {
                str(h): {
                    "values": list(self.values.get(h, [])),
                    "mean": self.mean(h),
                    "stderr": self.stderr(h),
                    "test_point_stderrs": list(self.point_stderrs.get(h, [])),
                }
                for h in self.grid
            },
        }


def model_select(
    dataset: Dataset,
    grid: Sequence[int] = (20, 40, 60, 80),
    repetitions: int = 5,
    config: ExperimentConfig | None = None,
    name: str = "dataset",
    threads: int = 1,
) -> ModelSelectionResult:
    """Train a two-hidden-layer network for each width in ``grid`` on each split.

    The splits depend only on the master seed and repetition index, so every
    width sees the same train/test partitions.
    """
    grid = [int(h) for h in grid]
    if not grid:
        raise ValueError("empty hidden-unit grid")
    config = config or ExperimentConfig()
    depth = len(config.hidden_layer_sizes)
    result = ModelSelectionResult(name, grid, {h: [] for h in grid}, [], {h: [] for h in grid})
    for h in grid:
        for r in range(repetitions):
            try:
                run = fit_repetition(dataset, (h,) * depth, config, r)
                ev = evaluate(run.test_set_std, run.model.posterior, config.n_w, config.n_z,
                              RngStream(run.seeds["evaluate"]), run.model.standardizer.target_stds, threads)
            except Exception as exc:  # noqa: BLE001 - recorded and reported
                log.warning("run h=%d repetition=%d failed: %s", h, r, exc)
                result.failures.append({"hidden_units": h, "repetition": r, "error": f"{type(exc).__name__}: {exc}"})
                continue
            result.values[h].append(ev.ll_mean)
            result.point_stderrs[h].append(ev.ll_stderr)
    return result


def _cell(mean: float | None, err: float | None) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.2f}±{err:.2f}" if err is not None else f"{mean:.2f}±n/a"


def render_table(results: Sequence[ModelSelectionResult]) -> str:
    """Markdown table: one row per dataset, one column per width; best cell bold."""
    grid = sorted({h for r in results for h in r.grid})
    lines = [
        "| Dataset | " + " | ".join(str(h) for h in grid) + " |",
        "|---|" + "---|" * len(grid),
    ]
    for res in results:
        cells = []
        for h in grid:
            text = _cell(res.mean(h), res.stderr(h)) if h in res.grid else ""
            if h == res.selected:
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {res.dataset} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- full experiment ---------------------------------------------------------


@dataclass
class ExperimentRecord:
    dataset: str
    config: ExperimentConfig
    repetitions: list[dict]
    sensitivity: SensitivityReport
    durations: list[float]

    def metric_summary(self) -> dict:
        lls = [r["test_log_likelihood"] for r in self.repetitions]
        rmses = [r["rmse"] for r in self.repetitions]
        return {
            "test_log_likelihood": {"mean": float(np.mean(lls)), "stderr": standard_error(lls)},
            "rmse": {"mean": float(np.mean(rmses)), "stderr": standard_error(rmses)},
        }

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock durations live in timings.json."""
        return {
            "format_version": RESULTS_FORMAT_VERSION,
            "dataset": self.dataset,
            "config": self.config.to_dict(),
            "log_likelihood_units": "original target units (standardized LL minus sum_k log target_std_k)",
            "repetitions": self.repetitions,
            "summary": self.metric_summary(),
            "sensitivity": self.sensitivity.to_dict(),
        }

    def selection_view(self) -> ModelSelectionResult:
        h = self.config.hidden_layer_sizes[0]
        return ModelSelectionResult(self.dataset, [h], {h: [r["test_log_likelihood"] for r in self.repetitions]})


def run_experiment(manifest: Manifest | Dataset, config: ExperimentConfig, threads: int = 1,
                   name: str | None = None) -> ExperimentRecord:
    """Split, train, evaluate and run the sensitivity analysis for every repetition."""
    if isinstance(manifest, Manifest):
        dataset = manifest.load_dataset()
        name = name or manifest.name
    else:
        dataset = manifest
        name = name or "dataset"
    reps, reports, durations = [], [], []
    for r in range(config.repetitions):
        start = time.perf_counter()
        try:
            run = fit_repetition(dataset, config.hidden_layer_sizes, config, r)
            post = run.model.posterior
            std = run.model.standardizer
            ev = evaluate(run.test_set_std, post, config.n_w, config.n_z, RngStream(run.seeds["evaluate"]),
                          std.target_stds, threads)
            report = sensitivity_analysis(
                run.test_set_std.features, post, config.n_w, config.n_z, RngStream(run.seeds["sensitivity"]),
                threads=threads, feature_names=dataset.feature_names, feature_scales=std.feature_stds,
            )
        except Exception as exc:
            raise RuntimeError(f"{name}: repetition {r} failed: {exc}") from exc
        report.seed = run.seeds["sensitivity"]
        reports.append(report)
        reps.append({
            "repetition": r,
            "seeds": run.seeds,
            "n_train": len(run.train_set),
            "n_test": len(run.test_set),
            "test_log_likelihood": ev.ll_mean,
            "test_log_likelihood_point_stderr": ev.ll_stderr,
            "rmse": ev.rmse,
        })
        durations.append(time.perf_counter() - start)
        log.info("%s repetition %d: test LL %.4f, RMSE %.4f", name, r, ev.ll_mean, ev.rmse)
    aggregate = aggregate_reports(reports)
    aggregate.seed = config.seed
    return ExperimentRecord(name, config, reps, aggregate, durations)


def write_experiment_outputs(record: ExperimentRecord, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(record.to_dict(), indent=1) + "\n", encoding="utf-8")
    (out / "table.md").write_text(render_table([record.selection_view()]), encoding="utf-8")
    write_report_csv(out / "sensitivity.csv", record.sensitivity)
    write_report_json(out / "sensitivity.json", record.sensitivity)
    (out / "timings.json").write_text(
        json.dumps({"repetition_seconds": record.durations}, indent=1) + "\n", encoding="utf-8"
    )
