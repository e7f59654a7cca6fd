"""Input sensitivities of the predictive expectation and its uncertainty components.

For each test point the weight and latent draws are frozen, which turns the
three estimators of :mod:`uncsens.uncertainty` into deterministic functions
of the input. Their exact input gradients are taken by reverse mode and the
absolute values are averaged over the test set.

The ``N_w`` axis is processed in blocks. A first pass computes the per-draw
means and variances; the derivative of each statistic with respect to those
moments is closed-form, so a second, blocked pass only has to backpropagate
``sum(c_mean * mean_w + c_var * var_w)`` through the network.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from uncsens.autodiff import SQRT_GRAD_FLOOR, TINY_VARIANCE, Tape, reverse_gradient
from uncsens.model import VariationalPosterior, stacked_forward_tape
from uncsens.rng import RngStream
from uncsens.uncertainty import (
    FrozenDraws,
    UncertaintyDecomposition,
    _check_counts,
    decompose,
    draw_frozen,
    grid_from_draws,
    centred,
    per_draw_moments,
)

STATISTICS = ("expectation", "epistemic", "aleatoric")
DEFAULT_BLOCK_SIZE = 50


@dataclass(frozen=True)
class PointGradients:
    """Input gradients at one point, each of shape ``(D, K)``."""

    expectation: np.ndarray
    epistemic_std: np.ndarray
    aleatoric_std: np.ndarray
    decomposition: UncertaintyDecomposition


def _sqrt_slope(var: np.ndarray) -> np.ndarray:
    return np.where(var < TINY_VARIANCE, 0.0, 0.5 / np.sqrt(np.maximum(var, SQRT_GRAD_FLOOR)))


def gradients_from_draws(model, x, draws: FrozenDraws, block_size: int | None = DEFAULT_BLOCK_SIZE) -> PointGradients:
    """Exact gradients of the frozen-draw estimators at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_counts(draws.n_w, draws.n_z)
    n_w = draws.n_w
    step = block_size or n_w

    grid = grid_from_draws(model, x, draws, step)
    dec = decompose(grid)
    means, variances = per_draw_moments(grid.samples)  # (N_w, K)
    n_out = means.shape[1]

    _, dev = centred(means, axis=0)
    epi_var = (dev * dev).mean(axis=0)
    ale_var = variances.mean(axis=0)
    # cotangents w.r.t. (per-draw mean, per-draw variance) for each statistic, shape (N_w, K)
    zeros = np.zeros_like(means)
    cot = {
        "expectation": (np.full_like(means, 1.0 / n_w), zeros),
        "epistemic": (_sqrt_slope(epi_var) * 2.0 * dev / n_w, zeros),
        "aleatoric": (zeros, np.broadcast_to(_sqrt_slope(ale_var) / n_w, means.shape)),
    }

    grads = {s: np.zeros((x.shape[0], n_out)) for s in STATISTICS}
    for lo in range(0, n_w, step):
        hi = min(lo + step, n_w)
        blk = draws.block(lo, hi)
        tape = Tape()
        xv = tape.variable(x)
        y = model.forward_tape(tape, xv, blk.latents, blk.weights)  # (b, N_z, K)
        m = tape.mean(y, axis=1)
        spread = y - tape.reshape(m, m.shape[:1] + (1,) + m.shape[1:])
        v = tape.mean(tape.square(spread), axis=1)
        for s in STATISTICS:
            c_m, c_v = cot[s]
            for k in range(n_out):
                if not (np.any(c_m[lo:hi, k]) or np.any(c_v[lo:hi, k])):
                    continue
                sel_m = np.zeros((hi - lo, n_out))
                sel_v = np.zeros((hi - lo, n_out))
                sel_m[:, k] = c_m[lo:hi, k]
                sel_v[:, k] = c_v[lo:hi, k]
                objective = tape.sum(m * sel_m) + tape.sum(v * sel_v)
                (g,) = reverse_gradient(tape, objective, wrt=[xv])
                grads[s][:, k] += g
    return PointGradients(grads["expectation"], grads["epistemic"], grads["aleatoric"], dec)


def point_gradients(
    x,
    posterior,
    n_w: int,
    n_z: int,
    stream: RngStream,
    *,
    shared_latents: bool = True,
    block_size: int | None = DEFAULT_BLOCK_SIZE,
) -> PointGradients:
    _check_counts(n_w, n_z)
    draws = draw_frozen(posterior, stream, n_w, n_z, shared_latents)
    return gradients_from_draws(posterior, x, draws, block_size)


@dataclass
class SensitivityReport:
    """Mean absolute input gradients, each array of shape ``(D, K)``.

    When built by aggregating repetitions, the arrays hold the across-repetition
    mean, ``repetitions`` holds the individual reports and ``standard_errors``
    the per-statistic standard errors (``None`` for a single repetition).
    """

    expectation: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    n_test: int
    n_w: int
    n_z: int
    seed: int | None = None
    feature_names: list[str] | None = None
    feature_scales: np.ndarray | None = None
    repetitions: list[SensitivityReport] = field(default_factory=list)
    standard_errors: dict[str, np.ndarray] | None = None

    def __getitem__(self, statistic: str) -> np.ndarray:
        return {"expectation": self.expectation, "epistemic": self.epistemic, "aleatoric": self.aleatoric}[statistic]

    @property
    def n_features(self) -> int:
        return self.expectation.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.expectation.shape[1]

    def names(self) -> list[str]:
        return list(self.feature_names) if self.feature_names else [f"x{i + 1}" for i in range(self.n_features)]

    def destandardized(self, statistic: str) -> np.ndarray:
        """Sensitivities per raw feature unit (divided by the feature std)."""
        scale = self.feature_scales if self.feature_scales is not None else np.ones(self.n_features)
        return self[statistic] / scale[:, None]

    def to_dict(self) -> dict:
        doc = {
            "format_version": 1,
            "n_test": self.n_test,
            "n_w": self.n_w,
            "n_z": self.n_z,
            "seed": self.seed,
            "feature_names": self.names(),
            "standardized": {s: self[s].tolist() for s in STATISTICS},
            "destandardized": {s: self.destandardized(s).tolist() for s in STATISTICS},
        }
        if self.feature_scales is not None:
            doc["feature_stds"] = np.asarray(self.feature_scales).tolist()
        doc["n_repetitions"] = len(self.repetitions) if self.repetitions else 1
        doc["standard_errors"] = (
            None if self.standard_errors is None else {s: self.standard_errors[s].tolist() for s in STATISTICS}
        )
        if self.repetitions:
            doc["repetitions"] = [
                {"seed": r.seed, "n_test": r.n_test, **{s: r[s].tolist() for s in STATISTICS}} for r in self.repetitions
            ]
        return doc


def sensitivity_analysis(
    test_set,
    posterior,
    n_w: int = 200,
    n_z: int = 200,
    stream: RngStream | None = None,
    *,
    point_keys: Sequence | None = None,
    shared_latents: bool = True,
    block_size: int | None = DEFAULT_BLOCK_SIZE,
    threads: int = 1,
    feature_names: Sequence[str] | None = None,
    feature_scales: np.ndarray | None = None,
) -> SensitivityReport:
    """Average absolute gradients of the three estimators over ``test_set``.

    Point ``n`` draws from ``stream.substream("point", key_n)`` where the key is
    its position unless ``point_keys`` says otherwise, so results for a point do
    not depend on which other points are in the set or on ``threads``.
    """
    xs = np.atleast_2d(np.asarray(test_set, dtype=np.float64))
    if xs.shape[0] == 0 or xs.size == 0:
        raise ValueError("empty test set")
    _check_counts(n_w, n_z)
    stream = stream if stream is not None else RngStream(0)
    keys = list(range(xs.shape[0])) if point_keys is None else list(point_keys)
    if len(keys) != xs.shape[0]:
        raise ValueError("point_keys must have one entry per test point")

    def one(i: int) -> PointGradients:
        return point_gradients(xs[i], posterior, n_w, n_z, stream.substream("point", keys[i]),
                               shared_latents=shared_latents, block_size=block_size)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(xs.shape[0])))
    else:
        results = [one(i) for i in range(xs.shape[0])]

    def average(attr: str) -> np.ndarray:
        total = np.zeros_like(getattr(results[0], attr))
        for r in results:
            total += np.abs(getattr(r, attr))
        return total / len(results)

    return SensitivityReport(
        average("expectation"),
        average("epistemic_std"),
        average("aleatoric_std"),
        n_test=xs.shape[0],
        n_w=n_w,
        n_z=n_z,
        seed=stream.master_seed,
        feature_names=list(feature_names) if feature_names is not None else None,
        feature_scales=None if feature_scales is None else np.asarray(feature_scales, dtype=np.float64),
    )


def classic_sensitivity(test_set, posterior: VariationalPosterior) -> np.ndarray:
    """Mean absolute input gradient of the network at the weight means with ``z = 0``."""
    xs = np.atleast_2d(np.asarray(test_set, dtype=np.float64))
    if xs.shape[0] == 0 or xs.size == 0:
        raise ValueError("empty test set")
    if xs.shape[1] != posterior.input_dim:
        raise ValueError(f"inputs have {xs.shape[1]} features, model expects {posterior.input_dim}")
    tape = Tape()
    xv = tape.variable(xs)
    inputs = tape.concat([xv, np.zeros((xs.shape[0], 1))], axis=-1)
    inputs = tape.reshape(inputs, (1,) + inputs.shape)
    layers = [tape.constant(m[None]) for m in posterior.weight_means]
    out = stacked_forward_tape(tape, inputs, layers)  # (1, N, K)
    result = np.zeros((xs.shape[1], posterior.output_dim))
    for k in range(posterior.output_dim):
        cot = np.zeros(out.shape)
        cot[..., k] = 1.0
        objective = tape.sum(out * cot)
        (g,) = reverse_gradient(tape, objective, wrt=[xv])  # rows are independent
        result[:, k] = np.abs(g).mean(axis=0)
    return result


def aggregate_reports(reports: Sequence[SensitivityReport]) -> SensitivityReport:
    """Across-repetition mean; standard errors are ``std / sqrt(R)`` (absent for R = 1)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    r = len(reports)
    stacked = {s: np.stack([rep[s] for rep in reports]) for s in STATISTICS}
    mean = {s: stacked[s].mean(axis=0) for s in STATISTICS}
    errors = None
    if r > 1:
        errors = {s: stacked[s].std(axis=0, ddof=1) / np.sqrt(r) for s in STATISTICS}
    first = reports[0]
    return SensitivityReport(
        mean["expectation"],
        mean["epistemic"],
        mean["aleatoric"],
        n_test=first.n_test,
        n_w=first.n_w,
        n_z=first.n_z,
        seed=first.seed,
        feature_names=first.feature_names,
        feature_scales=first.feature_scales,
        repetitions=list(reports),
        standard_errors=errors,
    )


def write_report_csv(path: str | Path, report: SensitivityReport) -> None:
    """Standardized-input-space sensitivities, one row per (feature, output)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature_index", "feature_name", "output_index", "I", "I_epistemic", "I_aleatoric"])
        names = report.names()
        for i in range(report.n_features):
            for k in range(report.n_outputs):
                writer.writerow([i, names[i], k] + [repr(float(report[s][i, k])) for s in STATISTICS])


def write_report_json(path: str | Path, report: SensitivityReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
