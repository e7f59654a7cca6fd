"""Datasets: CSV ingestion, standardization, splits and the toy generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from uncsens.rng import RngStream


class DataError(ValueError):
    """Raised for malformed data files or inconsistent dataset configuration."""


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str]
    target_names: list[str]

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.features.shape[0] != self.targets.shape[0]:
            raise DataError(
                f"row count mismatch: {self.features.shape[0]} feature rows, "
                f"{self.targets.shape[0]} target rows"
            )
        if len(self.feature_names) != self.features.shape[1]:
            raise DataError("feature_names does not match the number of feature columns")
        if len(self.target_names) != self.targets.shape[1]:
            raise DataError("target_names does not match the number of target columns")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_targets(self) -> int:
        return self.targets.shape[1]

    def subset(self, rows: np.ndarray) -> Dataset:
        return Dataset(self.features[rows], self.targets[rows], list(self.feature_names), list(self.target_names))


@dataclass
class Standardizer:
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_means: np.ndarray
    target_stds: np.ndarray
    constant_features: list[int] = field(default_factory=list)
    constant_targets: list[int] = field(default_factory=list)

    @classmethod
    def fit(cls, dataset: Dataset) -> Standardizer:
        """Column means and population stds; constant columns get std 1."""

        def moments(a):
            mean = a.mean(axis=0)
            std = a.std(axis=0)
            constant = [int(i) for i in np.flatnonzero(~(std > 0))]
            std = np.where(std > 0, std, 1.0)
            return mean, std, constant

        fm, fs, fc = moments(dataset.features)
        tm, ts, tc = moments(dataset.targets)
        return cls(fm, fs, tm, ts, fc, tc)

    @classmethod
    def identity(cls, n_features: int, n_targets: int) -> Standardizer:
        return cls(np.zeros(n_features), np.ones(n_features), np.zeros(n_targets), np.ones(n_targets))

    def transform_features(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.feature_means) / self.feature_stds

    def transform_targets(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.target_means) / self.target_stds

    def inverse_features(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.feature_stds + self.feature_means

    def inverse_targets(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.target_stds + self.target_means

    def transform(self, dataset: Dataset) -> Dataset:
        return Dataset(
            self.transform_features(dataset.features),
            self.transform_targets(dataset.targets),
            list(dataset.feature_names),
            list(dataset.target_names),
        )

    def inverse(self, dataset: Dataset) -> Dataset:
        return Dataset(
            self.inverse_features(dataset.features),
            self.inverse_targets(dataset.targets),
            list(dataset.feature_names),
            list(dataset.target_names),
        )

    def to_dict(self) -> dict:
        return {
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "target_means": self.target_means.tolist(),
            "target_stds": self.target_stds.tolist(),
            "constant_features": list(self.constant_features),
            "constant_targets": list(self.constant_targets),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(
            np.asarray(d["feature_means"], dtype=np.float64),
            np.asarray(d["feature_stds"], dtype=np.float64),
            np.asarray(d["target_means"], dtype=np.float64),
            np.asarray(d["target_stds"], dtype=np.float64),
            list(d.get("constant_features", [])),
            list(d.get("constant_targets", [])),
        )


def _parse_cell(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric cell {text!r} at row {row}, column {column!r}") from None
    if not math.isfinite(value):
        raise DataError(f"non-finite cell {text!r} at row {row}, column {column!r}")
    return value


def load_csv(path: str | Path, target_columns: Sequence[str] | None = None) -> Dataset:
    """Read a comma-separated file with a header row.

    Rows are numbered from 1 for the first data row (the header is row 0).
    ``target_columns=None`` uses the last column as the single target.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        rows = []
        for row_no, raw in enumerate(reader, start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(raw)} cells, header has {len(header)}")
            rows.append([_parse_cell(c.strip(), row_no, header[j]) for j, c in enumerate(raw)])
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    targets = list(target_columns) if target_columns else [header[-1]]
    missing = [t for t in targets if t not in header]
    if missing:
        raise DataError(f"{path}: target column(s) {missing} not found in header {header}")
    table = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    t_idx = [header.index(t) for t in targets]
    f_idx = [j for j in range(len(header)) if j not in t_idx]
    return Dataset(table[:, f_idx], table[:, t_idx], [header[j] for j in f_idx], targets)


def load_features_csv(path: str | Path, feature_names: Sequence[str]) -> np.ndarray:
    """Read only the named feature columns from a CSV (extra columns ignored)."""
    ds = load_csv(path, target_columns=None)
    header = ds.feature_names + ds.target_names
    table = np.concatenate([ds.features, ds.targets], axis=1)
    missing = [f for f in feature_names if f not in header]
    if missing:
        raise DataError(f"{path}: feature column(s) {missing} not found in header {header}")
    return table[:, [header.index(f) for f in feature_names]]


def write_csv(path: str | Path, dataset: Dataset) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset.feature_names + dataset.target_names)
        for x, y in zip(dataset.features, dataset.targets):
            writer.writerow([repr(float(v)) for v in np.concatenate([x, y])])


def split(dataset: Dataset, train_fraction: float = 0.9, seed: int | RngStream = 0) -> tuple[Dataset, Dataset]:
    """Seeded permutation split into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train > n - 1:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty side for {n} rows")
    stream = seed if isinstance(seed, RngStream) else RngStream(seed).substream("split")
    perm = stream.permutation(n)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


@dataclass
class ToySample:
    dataset: Dataset
    noise: np.ndarray


def generate_toy(n: int = 500, seed: int | RngStream = 0, noise: np.ndarray | None = None) -> ToySample:
    """Heteroskedastic toy regression with two inputs.

    ``y = 7 sin(x1) + 3 |cos(x2 / 2)| eps`` with ``x1 ~ Exp(rate 0.5) - 4``,
    ``x2 ~ U(-4, 4)`` and ``eps ~ N(0, 1)``. Passing ``noise`` overrides the
    sampled ``eps`` (e.g. zeros for the noise-free function).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    stream = seed if isinstance(seed, RngStream) else RngStream(seed).substream("toy")
    rate = 0.5
    u = stream.uniforms(2 * n).reshape(n, 2)
    x1 = -np.log1p(-u[:, 0]) / rate - 4.0
    x2 = -4.0 + 8.0 * u[:, 1]
    eps = stream.normals(n)
    if noise is not None:
        eps = np.broadcast_to(np.asarray(noise, dtype=np.float64), (n,)).copy()
    y = 7.0 * np.sin(x1) + 3.0 * np.abs(np.cos(x2 / 2.0)) * eps
    ds = Dataset(np.stack([x1, x2], axis=1), y[:, None], ["x1", "x2"], ["y"])
    return ToySample(ds, eps)


@dataclass
class Manifest:
    name: str
    path: Path
    target_columns: list[str]
    n_rows: int | None = None
    d_features: int | None = None

    @classmethod
    def load(cls, path: str | Path) -> Manifest:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON manifest ({exc})") from None
        for key in ("name", "path", "target_columns"):
            if key not in doc:
                raise DataError(f"{path}: manifest missing field {key!r}")
        data_path = Path(doc["path"])
        if not data_path.is_absolute():
            data_path = path.parent / data_path
        return cls(doc["name"], data_path, list(doc["target_columns"]), doc.get("n_rows"), doc.get("d_features"))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "path": str(self.path),
            "target_columns": self.target_columns,
            "n_rows": self.n_rows,
            "d_features": self.d_features,
        }

    def load_dataset(self) -> Dataset:
        ds = load_csv(self.path, self.target_columns)
        if self.n_rows is not None and len(ds) != self.n_rows:
            raise DataError(f"manifest {self.name!r}: expected {self.n_rows} rows, found {len(ds)}")
        if self.d_features is not None and ds.n_features != self.d_features:
            raise DataError(f"manifest {self.name!r}: expected {self.d_features} features, found {ds.n_features}")
        return ds
