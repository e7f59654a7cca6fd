"""Black-box alpha-divergence training of the variational posterior.

The objective minimised per mini-batch is

    KL(q(W) || N(0, I))
    + (N / |B|) * sum_{n in B} KL(q(z_n) || N(0, gamma))
    - (1 / alpha) * (N / |B|) * sum_{n in B} log mean_k exp(alpha * log p(y_n | f(x_n, z_nk; W_k), Sigma))

with ``W_k`` and ``z_nk`` reparameterised as ``mean + sqrt(var) * noise``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from uncsens.autodiff import Tape, Var, reverse_gradient
from uncsens.data import Dataset
from uncsens.model import LOG_2PI, NetworkArchitecture, VariationalPosterior, stacked_forward_tape
from uncsens.optim import AdamState, adam_step, clip_by_global_norm
from uncsens.rng import RngStream

GRAD_CLIP_NORM = 100.0


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    mc_samples: int = 10
    epochs: int = 3000
    learning_rate: float = 0.001
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        checks = {
            "alpha": 0.0 < self.alpha <= 1.0,
            "mc_samples": isinstance(self.mc_samples, int) and self.mc_samples >= 1,
            "epochs": isinstance(self.epochs, int) and self.epochs >= 0,
            "learning_rate": self.learning_rate > 0,
            "batch_size": isinstance(self.batch_size, int) and self.batch_size >= 1,
            "seed": isinstance(self.seed, int),
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid TrainConfig.{name}: {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, doc: dict, **overrides) -> TrainConfig:
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, value in {**doc, **overrides}.items():
            if key not in known:
                raise ConfigError(f"unknown TrainConfig field {key!r}")
            want = int if key in ("mc_samples", "epochs", "batch_size", "seed") else float
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"invalid TrainConfig.{key}: expected a number, got {value!r}")
            if want is int and float(value) != int(value):
                raise ConfigError(f"invalid TrainConfig.{key}: expected an integer, got {value!r}")
            values[key] = want(value)
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnergyValue:
    total: float
    kl_weight_term: float
    kl_latent_term: float
    likelihood_term: float


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    targets: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_items(cls, items) -> Batch:
        """Build from ``(x, y, n)`` tuples."""
        items = list(items)
        if not items:
            raise ValueError("empty batch")
        xs, ys, ns = zip(*items)
        return cls(
            np.atleast_2d(np.asarray(xs, dtype=np.float64)),
            np.asarray(ys, dtype=np.float64).reshape(len(items), -1),
            np.asarray(ns, dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class EnergyNoise:
    """Frozen standard-normal draws for one energy evaluation."""

    weights: np.ndarray  # (K, n_weights)
    latents: np.ndarray  # (K, |B|)


def kl_gaussian(m1, v1, m2, v2):
    """KL(N(m1, v1) || N(m2, v2)), elementwise."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if np.any(~(v1 > 0)) or np.any(~(v2 > 0)):
        raise ValueError("variances must be > 0")
    d = np.asarray(m1, dtype=np.float64) - np.asarray(m2, dtype=np.float64)
    out = 0.5 * (v1 / v2 + d * d / v2 - 1.0 + np.log(v2 / v1))
    return float(out) if np.ndim(out) == 0 else out


def draw_energy_noise(stream: RngStream, posterior: VariationalPosterior, batch_size: int, mc_samples: int) -> EnergyNoise:
    w = stream.normals((mc_samples, posterior.architecture.n_weights))
    z = stream.normals((mc_samples, batch_size))
    return EnergyNoise(w, z)


class _ParamVars:
    """Tape variables for every variational parameter, in flat-vector order."""

    def __init__(self, tape: Tape, posterior: VariationalPosterior):
        self.weight_means = [tape.variable(m) for m in posterior.weight_means]
        self.weight_log_variances = [tape.variable(v) for v in posterior.weight_log_variances]
        self.latent_means = tape.variable(posterior.latent_means)
        self.latent_log_variances = tape.variable(posterior.latent_log_variances)
        self.noise_log_variances = tape.variable(posterior.output_noise_log_variances)

    def ordered(self) -> list[Var]:
        return [
            *self.weight_means,
            *self.weight_log_variances,
            self.latent_means,
            self.latent_log_variances,
            self.noise_log_variances,
        ]


def _energy_terms(tape: Tape, p: _ParamVars, posterior: VariationalPosterior, batch: Batch, alpha: float, noise: EnergyNoise):
    n_total = posterior.n_train
    scale = n_total / len(batch)
    gamma = posterior.latent_prior_variance
    n_samples = noise.weights.shape[0]

    kl_w = None
    layers = []
    pos = 0
    for m, lv in zip(p.weight_means, p.weight_log_variances):
        term = tape.sum(0.5 * (tape.exp(lv) + tape.square(m) - 1.0 - lv))
        kl_w = term if kl_w is None else kl_w + term
        eps = noise.weights[:, pos : pos + m.value.size].reshape((n_samples,) + m.shape)
        layers.append(m + tape.exp(0.5 * lv) * eps)
        pos += m.value.size

    mz = tape.take(p.latent_means, batch.indices)
    lvz = tape.take(p.latent_log_variances, batch.indices)
    kl_z = scale * tape.sum(0.5 * (tape.exp(lvz) / gamma + tape.square(mz) / gamma - 1.0 + math.log(gamma) - lvz))

    z = mz + tape.exp(0.5 * lvz) * noise.latents  # (K, B)
    feats = np.broadcast_to(batch.features, (n_samples,) + batch.features.shape)
    inputs = tape.concat([feats, tape.reshape(z, z.shape + (1,))], axis=-1)
    out = stacked_forward_tape(tape, inputs, layers)  # (K, B, out)

    lvs = p.noise_log_variances
    resid = out - batch.targets
    ll = tape.sum(-0.5 * (LOG_2PI + lvs) - 0.5 * tape.square(resid) * tape.exp(-1.0 * lvs), axis=-1)  # (K, B)
    log_mean = tape.logsumexp(alpha * ll, axis=0) - math.log(n_samples)
    lik = (-scale / alpha) * tape.sum(log_mean)
    total = kl_w + kl_z + lik
    return total, kl_w, kl_z, lik


def energy_from_noise(batch: Batch, posterior: VariationalPosterior, alpha: float, noise: EnergyNoise, with_gradient: bool = False):
    """Energy for fixed draws; optionally the gradient as a flat parameter vector."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if np.any(batch.indices < 0) or np.any(batch.indices >= posterior.n_train):
        raise IndexError("batch index outside the latent parameter arrays")
    tape = Tape()
    params = _ParamVars(tape, posterior)
    total, kl_w, kl_z, lik = _energy_terms(tape, params, posterior, batch, alpha, noise)
    value = EnergyValue(float(total.value), float(kl_w.value), float(kl_z.value), float(lik.value))
    if not with_gradient:
        return value
    grads = reverse_gradient(tape, total, wrt=params.ordered())
    return value, np.concatenate([g.reshape(-1) for g in grads])


def energy(batch, posterior: VariationalPosterior, config: TrainConfig, stream: RngStream) -> EnergyValue:
    """Monte-Carlo energy of one mini-batch (see module docstring)."""
    if not isinstance(batch, Batch):
        batch = Batch.from_items(batch)
    noise = draw_energy_noise(stream, posterior, len(batch), config.mc_samples)
    return energy_from_noise(batch, posterior, config.alpha, noise)


def _first_non_finite(posterior: VariationalPosterior, vector: np.ndarray) -> str | None:
    bad = np.flatnonzero(~np.isfinite(vector))
    if bad.size == 0:
        return None
    return posterior.describe_index(int(bad[0]))


EpochCallback = Callable[[dict], None]


def train(
    dataset: Dataset,
    architecture: NetworkArchitecture,
    config: TrainConfig,
    *,
    latent_prior_variance: float = 1.0,
    on_epoch: EpochCallback | None = None,
) -> VariationalPosterior:
    """Mini-batch Adam on :func:`energy` for ``config.epochs`` passes over the data.

    ``dataset`` must already be standardized. ``on_epoch`` receives one record
    per epoch with the mean energy terms over that epoch's batches.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training set")
    if dataset.n_features != architecture.input_dim or dataset.n_targets != architecture.output_dim:
        raise ValueError("dataset dimensions do not match the architecture")
    root = RngStream(config.seed).substream("train")
    posterior = VariationalPosterior.initialize(
        architecture, n, root.substream("init"), latent_prior_variance=latent_prior_variance
    )
    vector = posterior.to_vector()
    adam = AdamState.zeros_like(vector, learning_rate=config.learning_rate)
    batch_size = min(config.batch_size, n)

    for epoch in range(config.epochs):
        order = root.substream("epoch", epoch).permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, n, batch_size)):
            rows = order[start : start + batch_size]
            batch = Batch(dataset.features[rows], dataset.targets[rows], rows)
            noise = draw_energy_noise(root.substream("step", epoch, b), posterior, len(batch), config.mc_samples)
            value, grad = energy_from_noise(batch, posterior, config.alpha, noise, with_gradient=True)
            if not math.isfinite(value.total):
                culprit = _first_non_finite(posterior, vector) or "none (parameters finite)"
                raise TrainingDivergedError(
                    f"non-finite energy at epoch {epoch}, batch {b}; first non-finite parameter: {culprit}"
                )
            bad = _first_non_finite(posterior, grad)
            if bad is not None:
                raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}, batch {b}: {bad}")
            vector, adam = adam_step(adam, vector, clip_by_global_norm(grad, GRAD_CLIP_NORM))
            bad = _first_non_finite(posterior, vector)
            if bad is not None:
                raise TrainingDivergedError(f"non-finite parameter after epoch {epoch}, batch {b}: {bad}")
            posterior = posterior.with_vector(vector)
            sums += (value.total, value.kl_weight_term, value.kl_latent_term, value.likelihood_term)
            n_batches += 1
        if on_epoch is not None:
            mean = sums / n_batches
            on_epoch(
                {
                    "epoch": epoch,
                    "energy": float(mean[0]),
                    "kl_weight_term": float(mean[1]),
                    "kl_latent_term": float(mean[2]),
                    "likelihood_term": float(mean[3]),
                }
            )
    return posterior


class TrainingLog:
    """Newline-delimited JSON sink for :func:`train`'s ``on_epoch`` records."""

    def __init__(self, path: str | Path | None = None, stream: TextIO | None = None):
        self.records: list[dict] = []
        self._fh = Path(path).open("w", encoding="utf-8") if path is not None else stream
        self._owned = path is not None

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._owned and self._fh is not None:
            self._fh.close()

    def __enter__(self) -> TrainingLog:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
