"""Datasets, tabular ingestion, feature/response transforms, splitting and
synthetic test beds with known conditional quantiles.

A :class:`Dataset` keeps the ``(X_i, A_i, Y_i)`` triples column-wise as numpy
arrays; :meth:`Dataset.sample` returns a single :class:`Sample` view.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .exceptions import ConfigError, DataError

__all__ = [
    "Sample",
    "Dataset",
    "TableSchema",
    "SplitAssignment",
    "Standardizer",
    "SyntheticSpec",
    "load_table",
    "transform_response",
    "fit_standardizer",
    "split_train_calibration",
    "split_train_test",
    "generate_synthetic",
    "sample_group",
    "conditional_quantile",
    "bundled_sample_path",
    "SYNTHETIC_PRESETS",
]


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    group: int
    response: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-wise collection of samples.

    ``X`` has shape ``(n, p)``, ``group`` holds non-negative integer labels
    and ``y`` the real responses. ``skipped`` counts input rows rejected
    during ingestion.
    """

    X: np.ndarray
    group: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...] = ()
    skipped: int = 0

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        group = np.asarray(self.group)
        if group.size and not np.issubdtype(group.dtype, np.integer):
            if not np.all(np.equal(np.mod(group, 1), 0)):
                raise DataError("group labels must be integers")
        group = group.astype(np.int64)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[1] == 0:
            raise DataError("features must form a 2-D array with at least one column")
        if not (len(X) == len(group) == len(y)):
            raise DataError(
                f"length mismatch: {len(X)} feature rows, {len(group)} labels, {len(y)} responses"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("features and responses must be finite")
        if np.any(group < 0):
            raise DataError("group labels must be non-negative")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError("feature_names length does not match feature dimension")
        for arr in (X, group, y):
            arr.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(int(a) for a in np.unique(self.group))

    def __len__(self) -> int:
        return self.n

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.group[i]), float(self.y[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.group[idx], self.y[idx], self.feature_names)

    def with_features(self, X) -> "Dataset":
        return Dataset(X, self.group, self.y, self.feature_names, self.skipped)

    def map_response(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Dataset":
        return Dataset(self.X, self.group, fn(self.y), self.feature_names, self.skipped)

    def group_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.group, return_counts=True)
        return {int(a): int(c) for a, c in zip(labels, counts)}

    def summary(self) -> str:
        """Key-value text report: n, p, skipped rows and per-group counts."""
        lines = [f"n={self.n}", f"p={self.feature_dim}", f"skipped={self.skipped}"]
        lines += [f"group[{a}]={c}" for a, c in self.group_counts().items()]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class TableSchema:
    """Column roles for :func:`load_table`.

    ``group_map`` optionally maps raw string labels to integer groups; without
    it the group column must hold non-negative integers.
    """

    features: tuple[str, ...]
    group: str
    response: str
    group_map: Mapping[str, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise ConfigError("schema needs at least one feature column")
        roles = list(self.features) + [self.group, self.response]
        if len(set(roles)) != len(roles):
            raise ConfigError("schema columns must be distinct")


def _parse_group(raw: str, group_map) -> int | None:
    raw = raw.strip()
    if group_map is not None:
        return group_map.get(raw)
    try:
        value = float(raw)
    except ValueError:
        return None
    if not math.isfinite(value) or value < 0 or value != int(value):
        return None
    return int(value)


def _parse_float(raw: str) -> float | None:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def load_table(path: str | os.PathLike, schema: TableSchema) -> Dataset:
    """Read a comma-delimited file with a header row.

    Rows with a missing or non-numeric entry in any schema column are dropped;
    the number dropped is reported as ``Dataset.skipped``.
    """
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        missing = [c for c in (*schema.features, schema.group, schema.response) if c not in header]
        if missing:
            raise DataError(f"columns not found in {path}: {', '.join(missing)}")
        feat_idx = [header.index(c) for c in schema.features]
        g_idx = header.index(schema.group)
        y_idx = header.index(schema.response)

        X, A, Y = [], [], []
        skipped = 0
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                skipped += 1
                continue
            feats = [_parse_float(row[j]) for j in feat_idx]
            a = _parse_group(row[g_idx], schema.group_map)
            y = _parse_float(row[y_idx])
            if a is None or y is None or any(f is None for f in feats):
                skipped += 1
                continue
            X.append(feats)
            A.append(a)
            Y.append(y)
    if not Y:
        raise DataError(f"{path}: zero usable rows ({skipped} rejected)")
    return Dataset(np.array(X), np.array(A), np.array(Y), schema.features, skipped)


def bundled_sample_path() -> str:
    """Path of the small two-group synthetic CSV shipped with the package."""
    return os.path.join(os.path.dirname(__file__), "resources", "synthetic_sample.csv")


# ---------------------------------------------------------------------------
# transforms


def transform_response(y):
    """``log(1 + y)`` for non-negative utilisation-style scores."""
    arr = np.asarray(y, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DataError("transform_response requires non-negative inputs")
    out = np.log1p(arr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != len(self.mean):
            raise DataError(f"expected {len(self.mean)} features, got {X.shape[-1]}")
        return (X - self.mean) / self.scale

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(
            np.array(d["mean"], dtype=float),
            np.array(d["scale"], dtype=float),
            np.array(d["constant"], dtype=bool),
        )


def fit_standardizer(dataset: Dataset, indices=None) -> Standardizer:
    """Per-feature mean and population standard deviation over ``indices``.

    Constant columns get scale 1 and are flagged instead of raising.
    """
    X = dataset.X if indices is None else dataset.X[np.asarray(indices, dtype=np.int64)]
    if len(X) == 0:
        raise DataError("cannot fit a standardizer on an empty index set")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(constant, 1.0, std)
    return Standardizer(mean, scale, constant)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    proper_train: np.ndarray
    calibration: np.ndarray
    seed: int


def _split_size(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 1e-9))


def split_train_calibration(
    data: Dataset | int, calibration_fraction: float = 0.5, seed: int = 0
) -> SplitAssignment:
    """Uniformly random disjoint split into proper-training and calibration
    indices. The calibration part has ``floor(n * calibration_fraction)``
    elements; both index arrays are returned sorted."""
    n = data if isinstance(data, (int, np.integer)) else len(data)
    if not 0.0 < calibration_fraction < 1.0:
        raise ConfigError("calibration_fraction must lie in (0, 1)")
    m = _split_size(n, calibration_fraction)
    if m == 0 or m == n:
        raise ConfigError(
            f"calibration_fraction={calibration_fraction} leaves an empty part for n={n}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return SplitAssignment(np.sort(perm[m:]), np.sort(perm[:m]), seed)


def split_train_test(n: int, train_fraction: float = 0.8, seed: int = 0):
    """Random ``(train, test)`` index arrays with ``floor(n * train_fraction)``
    training rows."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    k = _split_size(n, train_fraction)
    if k == 0 or k == n:
        raise ConfigError(f"train_fraction={train_fraction} leaves an empty part for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


# ---------------------------------------------------------------------------
# synthetic test beds
#
# Features are Uniform(0, 1)^p, optionally followed by the group label as an
# extra column. Within group a the response is
#   y = offset_a + mean_a(x) + noise_a * scale_a(x) * eps,  eps ~ N(0, 1)
# so every conditional quantile is available in closed form.

MEAN_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": lambda X: np.zeros(len(X)),
    "linear": lambda X: 2.0 * X[:, 0],
    "sum": lambda X: X.sum(axis=1),
    "sine": lambda X: np.sin(2.0 * np.pi * X[:, 0]),
}

SCALE_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": lambda X: np.zeros(len(X)),
    "const": lambda X: np.ones(len(X)),
    "linear": lambda X: 0.1 + 2.0 * X[:, 0],
    "bump": lambda X: 0.2 + 1.5 * np.exp(-((X[:, 0] - 0.5) ** 2) / 0.02),
}


@dataclass(frozen=True)
class SyntheticSpec:
    proportions: tuple[float, ...] = (1.0,)
    means: tuple[str, ...] = ("zero",)
    scales: tuple[str, ...] = ("const",)
    noise: tuple[float, ...] | None = None
    offsets: tuple[float, ...] | None = None
    feature_dim: int = 1
    n: int = 1000
    include_group: bool = False

    def __post_init__(self):
        k = len(self.proportions)
        for name in ("proportions", "means", "scales", "noise", "offsets"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        if k == 0:
            raise ConfigError("at least one group is required")
        if len(self.means) != k or len(self.scales) != k:
            raise ConfigError("means and scales need one entry per group")
        if self.noise is not None and len(self.noise) != k:
            raise ConfigError("noise needs one entry per group")
        if self.offsets is not None and len(self.offsets) != k:
            raise ConfigError("offsets needs one entry per group")
        p = np.asarray(self.proportions, dtype=float)
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigError("proportions must be positive and sum to 1")
        if self.noise is not None and any(s < 0 for s in self.noise):
            raise ConfigError("noise multipliers must be non-negative")
        unknown = [m for m in self.means if m not in MEAN_FUNCTIONS]
        unknown += [s for s in self.scales if s not in SCALE_FUNCTIONS]
        if unknown:
            raise ConfigError(f"unknown synthetic function ids: {unknown}")
        if self.feature_dim < 1 or self.n < 1:
            raise ConfigError("feature_dim and n must be positive")

    @property
    def n_groups(self) -> int:
        return len(self.proportions)

    def _noise(self, a: int) -> float:
        return 1.0 if self.noise is None else float(self.noise[a])

    def _offset(self, a: int) -> float:
        return 0.0 if self.offsets is None else float(self.offsets[a])

    def location(self, X, a: int) -> np.ndarray:
        X = np.atleast_2d(X)[:, : self.feature_dim]
        return self._offset(a) + MEAN_FUNCTIONS[self.means[a]](X)

    def spread(self, X, a: int) -> np.ndarray:
        X = np.atleast_2d(X)[:, : self.feature_dim]
        return self._noise(a) * SCALE_FUNCTIONS[self.scales[a]](X)

    def _with_label(self, X: np.ndarray, a) -> np.ndarray:
        if not self.include_group:
            return X
        col = np.broadcast_to(np.asarray(a, dtype=float), (len(X),))
        return np.column_stack([X, col])


def _response(spec: SyntheticSpec, X: np.ndarray, a: int, eps: np.ndarray) -> np.ndarray:
    spread = spec.spread(X, a)
    # keep the noiseless case exact
    return np.where(spread == 0.0, spec.location(X, a), spec.location(X, a) + spread * eps)


def sample_group(spec: SyntheticSpec, group: int, size: int, rng: np.random.Generator):
    """Draw ``size`` pairs ``(X, y)`` from the conditional law given ``A = group``."""
    X = rng.random((size, spec.feature_dim))
    eps = rng.standard_normal(size)
    return spec._with_label(X, group), _response(spec, X, group, eps)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    A = rng.choice(spec.n_groups, size=spec.n, p=np.asarray(spec.proportions))
    X = rng.random((spec.n, spec.feature_dim))
    eps = rng.standard_normal(spec.n)
    y = np.empty(spec.n)
    for a in range(spec.n_groups):
        mask = A == a
        y[mask] = _response(spec, X[mask], a, eps[mask])
    return Dataset(spec._with_label(X, A), A, y)


def conditional_quantile(spec: SyntheticSpec, X, group: int, level: float) -> np.ndarray:
    """Exact ``level``-quantile of ``Y | X = x, A = group``."""
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return spec.location(X, group) + spec.spread(X, group) * norm.ppf(level)


# Ready-made test beds. "two-group": a large low-noise group and a small
# high-noise one. "hetero": noise grows linearly with the first feature and
# the group label is visible to the base model.
SYNTHETIC_PRESETS: dict[str, SyntheticSpec] = {
    "two-group": SyntheticSpec(
        proportions=(0.8, 0.2),
        means=("linear", "linear"),
        scales=("const", "const"),
        noise=(1.0, 3.0),
        feature_dim=2,
        n=8000,
    ),
    "hetero": SyntheticSpec(
        proportions=(0.6, 0.4),
        means=("linear", "linear"),
        scales=("linear", "linear"),
        noise=(1.0, 1.5),
        offsets=(0.0, 1.0),
        feature_dim=2,
        n=8000,
        include_group=True,
    ),
}
