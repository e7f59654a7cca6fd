"""Sampling-based split of predictive variance into epistemic and aleatoric parts.

For a test input we draw ``N_w`` weight samples and, for each, run ``N_z``
forward passes with latents from the prior. With ``y[w, z, k]`` the resulting
grid:

* expectation      = mean over all (w, z)
* epistemic std    = population std over w of ``mean_z y[w, :, k]``
* aleatoric std    = sqrt(mean over w of population var over z of ``y[w, :, k]``)

Population normalisation makes ``epistemic**2 + aleatoric**2`` equal the
population variance of the whole grid exactly (law of total variance).

Models plug in through duck typing: anything with ``input_dim``,
``output_dim``, ``draw_weights(stream, n)``, ``draw_latents(stream, shape)``
and ``forward_tape(tape, x, z, weights)`` works (see
:class:`uncsens.model.VariationalPosterior`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from uncsens.autodiff import TINY_VARIANCE, Tape
from uncsens.model import WeightSample
from uncsens.rng import RngStream


@dataclass(frozen=True)
class FrozenDraws:
    """Weight and latent draws for one test point.

    ``latents`` has shape ``(N_z,)`` when the same latents are reused for every
    weight draw, else ``(N_w, N_z)``.
    """

    weights: WeightSample
    latents: np.ndarray

    @property
    def n_w(self) -> int:
        return self.weights.layers[0].shape[0]

    @property
    def n_z(self) -> int:
        return self.latents.shape[-1]

    def block(self, lo: int, hi: int) -> FrozenDraws:
        z = self.latents if self.latents.ndim == 1 else self.latents[lo:hi]
        return FrozenDraws(WeightSample(tuple(w[lo:hi] for w in self.weights.layers)), z)


def draw_frozen(model, stream: RngStream, n_w: int, n_z: int, shared_latents: bool = True) -> FrozenDraws:
    """Weights first, then latents, from ``stream``."""
    if n_w < 1 or n_z < 1:
        raise ValueError("n_w and n_z must be >= 1")
    weights = model.draw_weights(stream, n_w)
    z = model.draw_latents(stream, (n_z,) if shared_latents else (n_w, n_z))
    return FrozenDraws(weights, z)


def _check_counts(n_w: int, n_z: int) -> None:
    if n_w < 2 or n_z < 2:
        raise ValueError(f"need N_w >= 2 and N_z >= 2 to estimate variances, got N_w={n_w}, N_z={n_z}")


@dataclass(frozen=True)
class PredictiveSampleGrid:
    samples: np.ndarray  # (N_w, N_z, K)

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3:
            raise ValueError(f"grid must have shape (N_w, N_z, K), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("grid contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def n_w(self) -> int:
        return self.samples.shape[0]

    @property
    def n_z(self) -> int:
        return self.samples.shape[1]


def grid_from_draws(model, x, draws: FrozenDraws, block_size: int | None = None) -> PredictiveSampleGrid:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.input_dim:
        raise ValueError(f"input has {x.shape[0]} features, model expects {model.input_dim}")
    step = block_size or draws.n_w
    parts = []
    for lo in range(0, draws.n_w, step):
        blk = draws.block(lo, min(lo + step, draws.n_w))
        tape = Tape()
        parts.append(model.forward_tape(tape, tape.constant(x), blk.latents, blk.weights).value)
    return PredictiveSampleGrid(np.concatenate(parts, axis=0))


def predictive_grid(
    x,
    posterior,
    n_w: int,
    n_z: int,
    stream: RngStream,
    *,
    shared_latents: bool = True,
    block_size: int | None = None,
) -> PredictiveSampleGrid:
    """``N_w x N_z`` noise-free forward passes at ``x``; latents from the prior."""
    draws = draw_frozen(posterior, stream, n_w, n_z, shared_latents)
    return grid_from_draws(posterior, x, draws, block_size)


@dataclass(frozen=True)
class UncertaintyDecomposition:
    expectation: np.ndarray
    epistemic_std: np.ndarray
    aleatoric_std: np.ndarray

    @property
    def total_std(self) -> np.ndarray:
        return np.sqrt(self.epistemic_std**2 + self.aleatoric_std**2)


def _guarded_sqrt(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.where(v < TINY_VARIANCE, 0.0, v))


def centred(values: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean along ``axis`` and deviations from it.

    Deviations are taken from the first entry before averaging, so a run of
    identical values yields deviations that are exactly zero.
    """
    ref = np.take(values, [0], axis=axis)
    diff = values - ref
    shift = diff.mean(axis=axis, keepdims=True)
    return np.squeeze(ref + shift, axis=axis), diff - shift


def per_draw_moments(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance over the latent axis, shape ``(N_w, K)`` each."""
    means, dev = centred(samples, axis=1)
    return means, (dev * dev).mean(axis=1)


def decompose(grid: PredictiveSampleGrid) -> UncertaintyDecomposition:
    _check_counts(grid.n_w, grid.n_z)
    means, variances = per_draw_moments(grid.samples)
    _, dev = centred(means, axis=0)
    epistemic_var = (dev * dev).mean(axis=0)
    aleatoric_var = variances.mean(axis=0)
    return UncertaintyDecomposition(
        grid.samples.mean(axis=(0, 1)),
        _guarded_sqrt(epistemic_var),
        _guarded_sqrt(aleatoric_var),
    )


def decompose_points(
    inputs: np.ndarray,
    posterior,
    n_w: int,
    n_z: int,
    stream: RngStream,
    *,
    shared_latents: bool = True,
    block_size: int | None = None,
    point_keys: Sequence | None = None,
) -> list[UncertaintyDecomposition]:
    """Decomposition per row of ``inputs``; each row gets the substream keyed by its index."""
    _check_counts(n_w, n_z)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    keys = range(len(inputs)) if point_keys is None else point_keys
    return [
        decompose(predictive_grid(x, posterior, n_w, n_z, stream.substream("point", key),
                                  shared_latents=shared_latents, block_size=block_size))
        for x, key in zip(inputs, keys)
    ]


def write_decomposition_csv(
    path: str | Path,
    decompositions: Sequence[UncertaintyDecomposition],
    noise_variances: np.ndarray | None = None,
) -> None:
    """One row per (point, output).

    When ``noise_variances`` is given, an extra ``aleatoric_std_with_noise``
    column reports ``sqrt(aleatoric_std**2 + Sigma_kk)``; the ``aleatoric_std``
    column never includes the output noise.
    """
    header = ["point_index", "output_index", "expectation", "epistemic_std", "aleatoric_std"]
    if noise_variances is not None:
        header.append("aleatoric_std_with_noise")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, dec in enumerate(decompositions):
            for k in range(dec.expectation.shape[0]):
                row = [i, k, repr(float(dec.expectation[k])), repr(float(dec.epistemic_std[k])),
                       repr(float(dec.aleatoric_std[k]))]
                if noise_variances is not None:
                    row.append(repr(float(np.sqrt(dec.aleatoric_std[k] ** 2 + noise_variances[k]))))
                writer.writerow(row)
