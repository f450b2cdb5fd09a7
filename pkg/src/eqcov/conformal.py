"""Group-conditional split-conformal calibration.

Conformity scores of calibration points are split by group label and each
group gets its own inflated empirical quantile, so that intervals built from
it cover with probability at least ``1 - alpha`` *within every group*.
Marginal calibration pools all groups into a single correction.

Symmetric calibration uses the score ``max(q_lo(x) - y, y - q_hi(x))`` and
one correction per group; asymmetric calibration treats the two tails
separately at levels ``alpha_lo`` and ``alpha_hi``. The mean-based (CP)
variant uses ``q_lo = q_hi = mu``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .data import Dataset, SplitAssignment
from .exceptions import ConfigError, DataError, GuaranteeError
from .models import (
    MeanModel,
    NetConfig,
    QuantilePairModel,
    TrainingMode,
    fit_linear_mean,
    fit_linear_quantile_pair,
    fit_mean_net,
    fit_quantile_net,
    model_from_dict,
    model_to_dict,
)

__all__ = [
    "CalibrationSpec",
    "GroupCorrections",
    "PredictionInterval",
    "CalibratedPredictor",
    "Learner",
    "quantile_rank",
    "inflated_quantile",
    "cqr_scores",
    "base_interval",
    "tail_corrections",
    "apply_corrections",
    "cp_scores",
    "group_calibration_index",
    "scores_cqr",
    "scores_cp",
    "fit_base_models",
    "calibrate",
    "predict_interval",
    "predict_intervals",
    "fit_calibrated",
    "fit_predict_interval",
    "save_predictor",
    "load_predictor",
]

METHODS = ("cqr", "cp")
COVERAGES = ("marginal", "conditional")
_RANK_SLACK = 1e-12


@dataclass(frozen=True)
class CalibrationSpec:
    """What to calibrate and at which miss level.

    For ``symmetric=False`` the per-tail levels default to ``alpha / 2`` each
    and must add up to ``alpha``.
    """

    method: str = "cqr"
    coverage: str = "conditional"
    symmetric: bool = False
    alpha: float = 0.1
    alpha_lo: float | None = None
    alpha_hi: float | None = None
    mode: str = TrainingMode.JOINT

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.coverage not in COVERAGES:
            raise ConfigError(f"coverage must be one of {COVERAGES}, got {self.coverage!r}")
        TrainingMode.check(self.mode)
        if self.coverage == "marginal" and self.mode == TrainingMode.GROUPWISE:
            raise ConfigError("marginal calibration needs a joint base model")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.symmetric:
            if self.alpha_lo is not None or self.alpha_hi is not None:
                raise ConfigError("alpha_lo/alpha_hi only apply to asymmetric calibration")
            return
        lo = self.alpha / 2 if self.alpha_lo is None else self.alpha_lo
        hi = self.alpha - lo if self.alpha_hi is None else self.alpha_hi
        if not (0.0 < lo < 1.0 and 0.0 < hi < 1.0):
            raise ConfigError("alpha_lo and alpha_hi must lie in (0, 1)")
        if abs(lo + hi - self.alpha) > 1e-12:
            raise ConfigError(f"alpha_lo + alpha_hi = {lo + hi} differs from alpha = {self.alpha}")
        object.__setattr__(self, "alpha_lo", lo)
        object.__setattr__(self, "alpha_hi", hi)

    @property
    def fit_levels(self) -> tuple[float, float]:
        """Quantile levels the base quantile model is fitted at."""
        if self.symmetric:
            return self.alpha / 2, 1.0 - self.alpha / 2
        return self.alpha_lo, 1.0 - self.alpha_hi

    @property
    def conditional(self) -> bool:
        return self.coverage == "conditional"


# ---------------------------------------------------------------------------
# scores and quantiles


def quantile_rank(m: int, alpha) -> int:
    """``k = ceil((1 - alpha)(m + 1))``, the rank of the inflated quantile.

    Exact for :class:`fractions.Fraction` inputs; float inputs subtract a
    tiny slack before the ceiling to absorb representation error.
    """
    if isinstance(alpha, Fraction):
        k = math.ceil((1 - alpha) * (m + 1))
    else:
        k = math.ceil((1.0 - alpha) * (m + 1) - _RANK_SLACK)
    return max(k, 1)


def inflated_quantile(scores, alpha):
    """``k``-th smallest of ``m`` scores with ``k = ceil((1 - alpha)(m + 1))``.

    Returns ``inf`` when ``k > m``. A 2-D input is treated as a batch of
    score sets along the last axis and yields one value per row.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.asarray(scores, dtype=float)
    m = s.shape[-1] if s.ndim else 0
    if m == 0:
        raise GuaranteeError("cannot take a quantile of an empty score set")
    if np.isnan(s).any():
        raise DataError("scores contain NaN")
    k = quantile_rank(m, alpha)
    if k > m:
        return math.inf if s.ndim == 1 else np.full(s.shape[:-1], math.inf)
    q = np.partition(s, k - 1, axis=-1)[..., k - 1]
    return float(q) if s.ndim == 1 else q


def cqr_scores(q_lo, q_hi, y):
    """Signed distance of ``y`` to the nearest endpoint of ``[q_lo, q_hi]``."""
    return np.maximum(np.asarray(q_lo) - y, y - np.asarray(q_hi))


def cp_scores(mu, y):
    return np.abs(np.asarray(y) - mu)


def base_interval(model, X):
    """``(q_lo, q_hi)`` from a quantile model, or ``(mu, mu)`` from a mean model."""
    X = np.asarray(X, dtype=float)
    if isinstance(model, QuantilePairModel):
        return model.predict(X)
    mu = model.predict(X)
    return mu, mu


def group_calibration_index(dataset: Dataset, calibration, labels=None) -> dict[int, np.ndarray]:
    """Partition calibration indices by group label.

    ``labels`` lists the groups to report (default: every label in the
    dataset); labels with no calibration rows map to an empty array.
    """
    idx = np.asarray(calibration, dtype=np.int64)
    g = dataset.group[idx]
    labels = dataset.labels if labels is None else labels
    return {int(a): idx[g == a] for a in labels}


def _grouped_scores(model, dataset, calibration, fn):
    index = group_calibration_index(dataset, calibration)
    out = {}
    for a, rows in index.items():
        lo, hi = base_interval(model, dataset.X[rows])
        out[a] = fn(lo, hi, dataset.y[rows])
    return out


def scores_cqr(model: QuantilePairModel, dataset: Dataset, calibration) -> dict[int, np.ndarray]:
    return _grouped_scores(model, dataset, calibration, cqr_scores)


def scores_cp(model: MeanModel, dataset: Dataset, calibration) -> dict[int, np.ndarray]:
    return _grouped_scores(model, dataset, calibration, lambda mu, _, y: cp_scores(mu, y))


# ---------------------------------------------------------------------------
# corrections and intervals


@dataclass(frozen=True)
class PredictionInterval:
    """Closed interval ``[lower, upper]``; endpoints may be infinite.

    ``lower > upper`` can occur when a negative correction shrinks a narrow
    base interval past zero width; such an interval contains nothing.
    """

    lower: float
    upper: float

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lower) and math.isfinite(self.upper)

    @property
    def length(self) -> float:
        return max(self.upper - self.lower, 0.0)

    def __contains__(self, y) -> bool:
        return self.lower <= y <= self.upper


@dataclass(frozen=True)
class GroupCorrections:
    """Per-group additive corrections ``(lower, upper)``.

    Keys are group labels, or ``None`` for the single pooled correction of a
    marginal predictor. Symmetric corrections have ``lower == upper``.
    """

    table: Mapping[int | None, tuple[float, float]]
    sizes: Mapping[int | None, int]
    symmetric: bool

    def lookup(self, a) -> tuple[float, float]:
        if None in self.table:
            return self.table[None]
        try:
            return self.table[int(a)]
        except KeyError:
            raise GuaranteeError(
                f"group {a} had no calibration data; no coverage guarantee can be issued"
            ) from None

    def to_text(self) -> str:
        """Comma-delimited audit table."""
        lines = ["group,n_calibration,lower_correction,upper_correction"]
        for key in self.table:
            lo, hi = self.table[key]
            lines.append(
                f"{'*' if key is None else key},{self.sizes[key]},{_fmt(lo)},{_fmt(hi)}"
            )
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _unfmt(v) -> float:
    return float(v)


@dataclass(frozen=True, eq=False)
class CalibratedPredictor:
    """Output of calibration: base model(s), spec and correction table.

    ``model`` is the joint base model; ``group_models`` holds one model per
    label in groupwise mode. ``meta`` carries free-form provenance (schema,
    standardizer) for the command line.
    """

    spec: CalibrationSpec
    corrections: GroupCorrections
    model: QuantilePairModel | MeanModel | None = None
    group_models: Mapping[int, QuantilePairModel | MeanModel] | None = None
    meta: Mapping = field(default_factory=dict)

    def model_for(self, a):
        if self.group_models is None:
            return self.model
        try:
            return self.group_models[int(a)]
        except KeyError:
            raise GuaranteeError(f"no base model was trained for group {a}") from None

    def base_interval(self, X, a):
        return base_interval(self.model_for(a), np.atleast_2d(X))

    def scores(self, X, a, y):
        """Tail scores ``(q_lo - y, y - q_hi)`` at rows of ``X`` in group ``a``."""
        lo, hi = self.base_interval(X, a)
        y = np.asarray(y, dtype=float)
        return lo - y, y - hi

    def contains(self, x, a, y) -> bool:
        return y in predict_interval(self, x, a)


def _check_model(method, model):
    want = QuantilePairModel if method == "cqr" else MeanModel
    if not isinstance(model, want):
        raise ConfigError(f"method {method!r} needs a {want.__name__}, got {type(model).__name__}")


def tail_corrections(lo, hi, y, spec: CalibrationSpec) -> tuple[float, float]:
    s_lo, s_hi = lo - y, y - hi
    if spec.symmetric:
        q = inflated_quantile(np.maximum(s_lo, s_hi), spec.alpha)
        return q, q
    return inflated_quantile(s_lo, spec.alpha_lo), inflated_quantile(s_hi, spec.alpha_hi)


def calibrate(models, dataset: Dataset, calibration, spec: CalibrationSpec) -> CalibratedPredictor:
    """Compute the correction table on the calibration rows of ``dataset``.

    ``models`` is a single base model for joint mode, or a mapping from group
    label to base model for groupwise mode.
    """
    groupwise = spec.mode == TrainingMode.GROUPWISE
    if groupwise != isinstance(models, Mapping):
        raise ConfigError(
            "groupwise mode needs a mapping label -> model; joint mode a single model"
        )
    for mdl in models.values() if groupwise else [models]:
        _check_model(spec.method, mdl)

    calibration = np.asarray(calibration, dtype=np.int64)
    table, sizes = {}, {}
    if not spec.conditional:
        if len(calibration) == 0:
            raise GuaranteeError("calibration set is empty")
        lo, hi = base_interval(models, dataset.X[calibration])
        table[None] = tail_corrections(lo, hi, dataset.y[calibration], spec)
        sizes[None] = len(calibration)
    else:
        labels = sorted(models) if groupwise else dataset.labels
        index = group_calibration_index(dataset, calibration, labels)
        for a, rows in index.items():
            if len(rows) == 0:
                raise GuaranteeError(f"group {a} has 0 calibration samples")
            mdl = models[a] if groupwise else models
            lo, hi = base_interval(mdl, dataset.X[rows])
            table[a] = tail_corrections(lo, hi, dataset.y[rows], spec)
            sizes[a] = len(rows)
    corrections = GroupCorrections(table, sizes, spec.symmetric)
    if groupwise:
        return CalibratedPredictor(spec, corrections, group_models=dict(models))
    return CalibratedPredictor(spec, corrections, model=models)


def apply_corrections(lo, hi, q_lo, q_hi):
    return lo - q_lo, hi + q_hi


def predict_interval(predictor: CalibratedPredictor, x, a) -> PredictionInterval:
    q_lo, q_hi = predictor.corrections.lookup(a)
    lo, hi = predictor.base_interval(np.asarray(x, dtype=float).reshape(1, -1), a)
    lower, upper = apply_corrections(float(lo[0]), float(hi[0]), q_lo, q_hi)
    return PredictionInterval(lower, upper)


def predict_intervals(predictor: CalibratedPredictor, X, groups):
    """Vectorised :func:`predict_interval`; returns ``(lower, upper)`` arrays."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    groups = np.asarray(groups).astype(np.int64)
    lower = np.empty(len(X))
    upper = np.empty(len(X))
    for a in np.unique(groups):
        rows = groups == a
        q_lo, q_hi = predictor.corrections.lookup(a)
        lo, hi = predictor.base_interval(X[rows], a)
        lower[rows], upper[rows] = apply_corrections(lo, hi, q_lo, q_hi)
    return lower, upper


# ---------------------------------------------------------------------------
# end-to-end


@dataclass(frozen=True)
class Learner:
    """Base-model factory: ``kind`` is ``"net"`` (quantile / mean network)
    or ``"linear"`` (affine baselines)."""

    kind: str = "net"
    config: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.kind not in ("net", "linear"):
            raise ConfigError(f"learner kind must be 'net' or 'linear', got {self.kind!r}")

    def fit(self, method: str, X, y, levels=(0.05, 0.95), seed: int | None = None):
        if self.kind == "linear":
            if method == "cqr":
                return fit_linear_quantile_pair(X, y, levels)
            return fit_linear_mean(X, y)
        config = self.config if seed is None else self.config.replace(seed=seed)
        if method == "cqr":
            return fit_quantile_net(X, y, levels, config)
        return fit_mean_net(X, y, config)


def _group_seed(base: int, a: int) -> int:
    return int(np.random.SeedSequence([base, a]).generate_state(1)[0])


def fit_base_models(dataset: Dataset, proper_train, spec: CalibrationSpec, learner: Learner):
    """Fit the joint model on all proper-training rows, or one model per
    group on that group's proper-training rows."""
    rows = np.asarray(proper_train, dtype=np.int64)
    if spec.mode == TrainingMode.JOINT:
        return learner.fit(spec.method, dataset.X[rows], dataset.y[rows], spec.fit_levels)
    models = {}
    for a in dataset.labels:
        sub = rows[dataset.group[rows] == a]
        if len(sub) < 2:
            raise DataError(f"group {a} has {len(sub)} proper-training samples; need at least 2")
        models[a] = learner.fit(
            spec.method,
            dataset.X[sub],
            dataset.y[sub],
            spec.fit_levels,
            seed=_group_seed(learner.config.seed, a),
        )
    return models


def fit_calibrated(
    dataset: Dataset, split: SplitAssignment, spec: CalibrationSpec, learner: Learner | None = None
) -> CalibratedPredictor:
    learner = learner or Learner()
    models = fit_base_models(dataset, split.proper_train, spec, learner)
    return calibrate(models, dataset, split.calibration, spec)


def fit_predict_interval(
    dataset: Dataset,
    split: SplitAssignment,
    spec: CalibrationSpec,
    learner: Learner | None,
    x,
    a: int,
) -> PredictionInterval:
    """Fit, calibrate and return the interval for one test point ``(x, a)``."""
    return predict_interval(fit_calibrated(dataset, split, spec, learner), x, a)


# ---------------------------------------------------------------------------
# serialisation

_FORMAT = "eqcov.calibrated/1"


def predictor_to_dict(predictor: CalibratedPredictor) -> dict:
    c = predictor.corrections
    return {
        "format": _FORMAT,
        "spec": asdict(predictor.spec),
        "model": None if predictor.model is None else model_to_dict(predictor.model),
        "group_models": None
        if predictor.group_models is None
        else {str(a): model_to_dict(m) for a, m in predictor.group_models.items()},
        "corrections": {
            "symmetric": c.symmetric,
            "rows": [
                {
                    "group": None if a is None else int(a),
                    "n": int(c.sizes[a]),
                    "lower": _fmt(lo),
                    "upper": _fmt(hi),
                }
                for a, (lo, hi) in c.table.items()
            ],
        },
        "meta": dict(predictor.meta),
    }


def predictor_from_dict(d: Mapping) -> CalibratedPredictor:
    if d.get("format") != _FORMAT:
        raise DataError(f"not a calibrated-predictor document (format={d.get('format')!r})")
    rows = d["corrections"]["rows"]
    table = {r["group"]: (_unfmt(r["lower"]), _unfmt(r["upper"])) for r in rows}
    sizes = {r["group"]: int(r["n"]) for r in rows}
    corrections = GroupCorrections(table, sizes, bool(d["corrections"]["symmetric"]))
    model = None if d["model"] is None else model_from_dict(d["model"])
    group_models = (
        None
        if d["group_models"] is None
        else {int(a): model_from_dict(m) for a, m in d["group_models"].items()}
    )
    return CalibratedPredictor(
        CalibrationSpec(**d["spec"]), corrections, model, group_models, d.get("meta", {})
    )


def save_predictor(predictor: CalibratedPredictor, path) -> None:
    with open(path, "w") as fh:
        json.dump(predictor_to_dict(predictor), fh, indent=1)
        fh.write("\n")


def load_predictor(path) -> CalibratedPredictor:
    with open(path) as fh:
        return predictor_from_dict(json.load(fh))
