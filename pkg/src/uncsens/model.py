"""Feed-forward network with a scalar latent input and a mean-field Gaussian posterior.

Weight matrix ``l`` has shape ``(V_l, V_{l-1} + 1)``: the last column holds the
biases. The first layer consumes the features followed by the latent ``z``.
Hidden layers use ReLU, the output layer is linear.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from uncsens.autodiff import Tape, Var
from uncsens.data import Standardizer
from uncsens.rng import RngStream, gaussian_draw, gaussian_draws

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NetworkArchitecture:
    input_dim: int
    output_dim: int
    hidden_layer_sizes: tuple[int, ...] = (20, 20)
    latent_dim: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))
        if self.latent_dim != 1:
            raise ValueError("only a scalar latent input is supported")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_layer_sizes):
            raise ValueError(f"invalid architecture {self}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim + self.latent_dim, *self.hidden_layer_sizes, self.output_dim]
        return [(v_out, v_in + 1) for v_in, v_out in zip(widths[:-1], widths[1:])]

    @property
    def n_weights(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_layer_sizes": list(self.hidden_layer_sizes),
            "latent_dim": self.latent_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkArchitecture:
        return cls(int(d["input_dim"]), int(d["output_dim"]), tuple(d["hidden_layer_sizes"]), int(d.get("latent_dim", 1)))


@dataclass(frozen=True)
class WeightSample:
    """One concrete set of weight matrices, or a stack of them along axis 0."""

    layers: tuple[np.ndarray, ...]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class GaussianLikelihood:
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class VariationalPosterior:
    architecture: NetworkArchitecture
    weight_means: list[np.ndarray]
    weight_log_variances: list[np.ndarray]
    latent_means: np.ndarray
    latent_log_variances: np.ndarray
    latent_prior_variance: float = 1.0
    output_noise_log_variances: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self) -> None:
        shapes = self.architecture.layer_shapes
        self.weight_means = [np.asarray(m, dtype=np.float64) for m in self.weight_means]
        self.weight_log_variances = [np.asarray(v, dtype=np.float64) for v in self.weight_log_variances]
        for name, mats in (("weight_means", self.weight_means), ("weight_log_variances", self.weight_log_variances)):
            if [m.shape for m in mats] != shapes:
                raise ValueError(f"{name} shapes {[m.shape for m in mats]} do not match architecture {shapes}")
        self.latent_means = np.asarray(self.latent_means, dtype=np.float64).reshape(-1)
        self.latent_log_variances = np.asarray(self.latent_log_variances, dtype=np.float64).reshape(-1)
        if self.latent_means.shape != self.latent_log_variances.shape:
            raise ValueError("latent means and variances must have equal length")
        self.output_noise_log_variances = np.asarray(self.output_noise_log_variances, dtype=np.float64).reshape(-1)
        if self.output_noise_log_variances.shape != (self.architecture.output_dim,):
            raise ValueError("need one output noise log-variance per output")
        if not self.latent_prior_variance > 0:
            raise ValueError("latent_prior_variance must be > 0")

    @classmethod
    def initialize(
        cls,
        architecture: NetworkArchitecture,
        n_train: int,
        stream: RngStream,
        latent_prior_variance: float = 1.0,
        weight_variance: float = 1e-4,
        noise_std: float = 0.1,
    ) -> VariationalPosterior:
        """Means ~ N(0, 1/fan_in), small weight variances, latents at the prior."""
        means, log_vars = [], []
        for rows, cols in architecture.layer_shapes:
            means.append(stream.normals((rows, cols)) / math.sqrt(cols))
            log_vars.append(np.full((rows, cols), math.log(weight_variance)))
        return cls(
            architecture,
            means,
            log_vars,
            np.zeros(n_train),
            np.full(n_train, math.log(latent_prior_variance)),
            latent_prior_variance,
            np.full(architecture.output_dim, math.log(noise_std**2)),
        )

    @property
    def weight_variances(self) -> list[np.ndarray]:
        return [np.exp(v) for v in self.weight_log_variances]

    @property
    def latent_variances(self) -> np.ndarray:
        return np.exp(self.latent_log_variances)

    @property
    def output_noise_variances(self) -> np.ndarray:
        return np.exp(self.output_noise_log_variances)

    @property
    def n_train(self) -> int:
        return self.latent_means.shape[0]

    # -- flat parameter vector, used by the optimizer ---------------------

    def parameter_blocks(self) -> list[tuple[str, np.ndarray]]:
        blocks = []
        for l, m in enumerate(self.weight_means):
            blocks.append((f"weight_means[{l}]", m))
        for l, v in enumerate(self.weight_log_variances):
            blocks.append((f"weight_log_variances[{l}]", v))
        blocks.append(("latent_means", self.latent_means))
        blocks.append(("latent_log_variances", self.latent_log_variances))
        blocks.append(("output_noise_log_variances", self.output_noise_log_variances))
        return blocks

    def to_vector(self) -> np.ndarray:
        return np.concatenate([b.reshape(-1) for _, b in self.parameter_blocks()])

    def with_vector(self, vector: np.ndarray) -> VariationalPosterior:
        blocks = self.parameter_blocks()
        pieces, pos = [], 0
        for _, b in blocks:
            pieces.append(np.array(vector[pos : pos + b.size]).reshape(b.shape))
            pos += b.size
        if pos != vector.size:
            raise ValueError(f"vector has {vector.size} entries, expected {pos}")
        n_layers = len(self.weight_means)
        return VariationalPosterior(
            self.architecture,
            pieces[:n_layers],
            pieces[n_layers : 2 * n_layers],
            pieces[2 * n_layers],
            pieces[2 * n_layers + 1],
            self.latent_prior_variance,
            pieces[2 * n_layers + 2],
        )

    def describe_index(self, flat_index: int) -> str:
        """Human-readable location of one entry of :meth:`to_vector`."""
        pos = 0
        for name, b in self.parameter_blocks():
            if flat_index < pos + b.size:
                idx = np.unravel_index(flat_index - pos, b.shape)
                return f"{name}[{', '.join(str(int(i)) for i in idx)}]"
            pos += b.size
        raise IndexError(flat_index)

    def mean_weights(self) -> WeightSample:
        return WeightSample(tuple(m.copy() for m in self.weight_means))

    # -- sampling interface used by the uncertainty estimators ------------

    @property
    def input_dim(self) -> int:
        return self.architecture.input_dim

    @property
    def output_dim(self) -> int:
        return self.architecture.output_dim

    def draw_weights(self, stream: RngStream, n: int) -> WeightSample:
        """``n`` independent weight draws stacked along a new leading axis."""
        noise = stream.normals((n, self.architecture.n_weights))
        layers, pos = [], 0
        for m, lv in zip(self.weight_means, self.weight_log_variances):
            block = noise[:, pos : pos + m.size].reshape((n,) + m.shape)
            layers.append(m + np.sqrt(np.exp(lv)) * block)
            pos += m.size
        return WeightSample(tuple(layers))

    def draw_latents(self, stream: RngStream, shape) -> np.ndarray:
        """Latent inputs from the prior N(0, gamma)."""
        return math.sqrt(self.latent_prior_variance) * stream.normals(shape)

    def forward_tape(self, tape: Tape, x: Var, z: np.ndarray, weights: WeightSample) -> Var:
        """Stacked outputs of shape ``(S, M, K)`` for ``S`` weight draws.

        ``x`` is a tape variable of shape ``(D,)`` shared by every pass; ``z``
        has shape ``(S, M)`` or ``(M,)`` (the same latents for every draw).
        """
        z = np.asarray(z, dtype=np.float64)
        n_draws = weights.layers[0].shape[0]
        if z.ndim == 1:
            z = np.broadcast_to(z, (n_draws, z.shape[0]))
        feats = tape.broadcast_to(x, z.shape + (x.shape[0],))
        inputs = tape.concat([feats, z[..., None]], axis=-1)
        return stacked_forward_tape(tape, inputs, [tape.constant(w) for w in weights.layers])


def _check_input(x: np.ndarray, weights: WeightSample) -> None:
    expected = weights.layers[0].shape[-1] - 2
    if x.shape[-1] != expected:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {expected}")


def forward(x, z: float, weights: WeightSample) -> np.ndarray:
    """Network output ``f(x, z; W)`` for one input and one weight sample."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_input(x, weights)
    h = np.append(x, float(z))
    n_layers = len(weights.layers)
    for l, w in enumerate(weights.layers):
        a = w[:, :-1] @ h + w[:, -1]
        h = np.maximum(a, 0.0) if l < n_layers - 1 else a
    return h


def stacked_forward(inputs: np.ndarray, layers: Sequence[np.ndarray]) -> np.ndarray:
    """Forward pass of ``S`` networks on ``M`` inputs each.

    ``inputs`` has shape ``(S, M, D + 1)`` (features then latent) and layer
    ``l`` has shape ``(S, V_l, V_{l-1} + 1)``; returns ``(S, M, K)``.
    """
    h = inputs
    last = len(layers) - 1
    for l, w in enumerate(layers):
        a = h @ np.swapaxes(w[..., :-1], -1, -2) + w[..., None, :, -1]
        h = np.maximum(a, 0.0) if l < last else a
    return h


def stacked_forward_tape(tape: Tape, inputs: Var, layers: Sequence[Var]) -> Var:
    """Tape-recorded twin of :func:`stacked_forward`."""
    h = inputs
    last = len(layers) - 1
    for l, w in enumerate(layers):
        kernel = tape.swapaxes(w[..., :-1], -1, -2)
        bias = w[..., None, :, -1]
        a = h @ kernel + bias
        h = tape.relu(a) if l < last else a
    return h


def sample_weights(posterior: VariationalPosterior, stream: RngStream) -> WeightSample:
    """One draw of every weight from its Gaussian factor."""
    stacked = posterior.draw_weights(stream, 1)
    return WeightSample(tuple(w[0] for w in stacked.layers))


def sample_latent_prior(gamma: float, stream: RngStream) -> float:
    if not gamma > 0:
        raise ValueError(f"latent prior variance must be > 0, got {gamma}")
    return gaussian_draw(stream, 0.0, gamma)


def log_likelihood(y, prediction: GaussianLikelihood) -> float:
    """Sum over outputs of diagonal-Gaussian log densities."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mean = np.asarray(prediction.mean, dtype=np.float64).reshape(-1)
    var = np.asarray(prediction.variance, dtype=np.float64).reshape(-1)
    if y.shape != mean.shape or var.shape != mean.shape:
        raise ValueError(f"shape mismatch: y {y.shape}, mean {mean.shape}, variance {var.shape}")
    if np.any(~(var > 0)) or np.any(~np.isfinite(var)):
        raise ValueError("likelihood variances must be positive and finite")
    r = y - mean
    return float(np.sum(-0.5 * (LOG_2PI + np.log(var)) - 0.5 * r * r / var))


# -- serialization -----------------------------------------------------------


@dataclass
class TrainedModel:
    """A posterior plus what is needed to use it on raw data."""

    posterior: VariationalPosterior
    standardizer: Standardizer
    feature_names: list[str]
    target_names: list[str]


def model_to_dict(model: TrainedModel) -> dict:
    post = model.posterior
    return {
        "format_version": FORMAT_VERSION,
        "architecture": post.architecture.to_dict(),
        "weight_means": [m.reshape(-1).tolist() for m in post.weight_means],
        "weight_log_variances": [v.reshape(-1).tolist() for v in post.weight_log_variances],
        "latent_prior_variance": post.latent_prior_variance,
        "output_noise_log_variances": post.output_noise_log_variances.tolist(),
        "standardization": model.standardizer.to_dict(),
        "feature_names": list(model.feature_names),
        "target_names": list(model.target_names),
    }


def model_from_dict(doc: dict) -> TrainedModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version!r}, expected {FORMAT_VERSION}")
    arch = NetworkArchitecture.from_dict(doc["architecture"])
    shapes = arch.layer_shapes
    means = [np.asarray(m, dtype=np.float64).reshape(s) for m, s in zip(doc["weight_means"], shapes)]
    log_vars = [np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(doc["weight_log_variances"], shapes)]
    posterior = VariationalPosterior(
        arch,
        means,
        log_vars,
        np.zeros(0),
        np.zeros(0),
        float(doc["latent_prior_variance"]),
        np.asarray(doc["output_noise_log_variances"], dtype=np.float64),
    )
    std = Standardizer.from_dict(doc["standardization"])
    feature_names = doc.get("feature_names") or [f"x{i + 1}" for i in range(arch.input_dim)]
    target_names = doc.get("target_names") or [f"y{k + 1}" for k in range(arch.output_dim)]
    return TrainedModel(posterior, std, list(feature_names), list(target_names))


def save_model(path: str | Path, model: TrainedModel) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
