"""Per-group coverage and length, residual-based bias diagnostics, and the
repeated train/test experiment comparing marginal and group-conditional methods."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .conformal import (
    CalibrationSpec,
    Learner,
    calibrate,
    fit_base_models,
    predict_intervals,
)
from .data import Dataset, fit_standardizer, split_train_calibration, split_train_test
from .exceptions import ConfigError, DataError, EqcovError
from .models import TrainingMode

__all__ = [
    "GroupCoverage",
    "CoverageReport",
    "evaluate",
    "signed_residuals",
    "ecdf",
    "tail_quantile",
    "tail_quantiles",
    "GroupBias",
    "BiasReport",
    "bias_report",
    "comparison_methods",
    "CellSummary",
    "ExperimentSummary",
    "run_repeated_splits",
]


# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class GroupCoverage:
    coverage: float
    avg_length: float  # over bounded intervals; nan if none
    n: int
    unbounded: int


@dataclass(frozen=True)
class CoverageReport:
    groups: Mapping[int, GroupCoverage]
    coverage: float
    n: int

    def to_records(self, method: str = "") -> list[dict]:
        return [
            {
                "method": method,
                "group": a,
                "coverage": g.coverage,
                "avg_length": g.avg_length,
                "unbounded_count": g.unbounded,
            }
            for a, g in self.groups.items()
        ]

    def to_text(self, method: str = "") -> str:
        return _records_text(self.to_records(method))


_RECORD_FIELDS = ("method", "group", "coverage", "avg_length", "unbounded_count")


def _num(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def _records_text(records) -> str:
    lines = [",".join(_RECORD_FIELDS)]
    lines += [",".join(_num(r[k]) for k in _RECORD_FIELDS) for r in records]
    return "\n".join(lines) + "\n"


def _as_bounds(intervals):
    if isinstance(intervals, tuple) and len(intervals) == 2 and np.ndim(intervals[0]) == 1:
        lower, upper = intervals
    else:
        pairs = [(iv.lower, iv.upper) for iv in intervals]
        lower = [p[0] for p in pairs]
        upper = [p[1] for p in pairs]
    return np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)


def evaluate(intervals, truths, groups) -> CoverageReport:
    """Per-group coverage and average length.

    ``intervals`` is either a sequence of :class:`PredictionInterval` or a
    ``(lower, upper)`` pair of arrays. Intervals with an infinite endpoint
    are left out of the length average and counted in ``unbounded``.
    """
    lower, upper = _as_bounds(intervals)
    y = np.asarray(truths, dtype=float)
    g = np.asarray(groups).astype(np.int64)
    if not (len(lower) == len(upper) == len(y) == len(g)):
        raise DataError("intervals, truths and groups must have equal lengths")
    if len(y) == 0:
        raise DataError("nothing to evaluate")
    hit = (lower <= y) & (y <= upper)
    bounded = np.isfinite(lower) & np.isfinite(upper)
    length = np.where(bounded, np.maximum(upper - lower, 0.0), 0.0)
    out = {}
    for a in np.unique(g):
        rows = g == a
        nb = int(bounded[rows].sum())
        out[int(a)] = GroupCoverage(
            float(hit[rows].mean()),
            float(length[rows].sum() / nb) if nb else math.nan,
            int(rows.sum()),
            int(rows.sum()) - nb,
        )
    return CoverageReport(out, float(hit.mean()), len(y))


# ---------------------------------------------------------------------------
# bias detection


def signed_residuals(model, dataset: Dataset, indices=None) -> dict[int, np.ndarray]:
    """``R_i = Y_i - mu(X_i)`` grouped by label."""
    idx = np.arange(dataset.n) if indices is None else np.asarray(indices, dtype=np.int64)
    r = dataset.y[idx] - model.predict(dataset.X[idx])
    g = dataset.group[idx]
    return {int(a): r[g == a] for a in np.unique(g)}


def ecdf(values):
    """Sorted values and the ECDF ``F(t) = #{v <= t} / m`` as a callable."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise DataError("ECDF of an empty sample")

    def F(t):
        return np.searchsorted(v, t, side="right") / len(v)

    return v, F


def tail_quantile(values, level: float) -> float:
    """Smallest ``r`` with ``F(r) >= level``: the ``ceil(level * m)``-th order
    statistic."""
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise DataError("tail quantile of an empty sample")
    k = max(math.ceil(level * len(v) - 1e-12), 1)
    return float(v[k - 1])


def tail_quantiles(residuals: Mapping[int, np.ndarray], levels=(0.05, 0.95)):
    out = {}
    for a, r in residuals.items():
        if len(r) == 0:
            raise DataError(f"group {a} has no residuals")
        out[a] = (tail_quantile(r, levels[0]), tail_quantile(r, levels[1]))
    return out


@dataclass(frozen=True, eq=False)
class GroupBias:
    residuals: np.ndarray  # sorted
    p_below: float  # P(Y <= Y_hat | A = a)
    r_lo: float
    r_hi: float


@dataclass(frozen=True, eq=False)
class BiasReport:
    groups: Mapping[int, GroupBias]
    levels: tuple[float, float]

    def summary_text(self) -> str:
        lines = ["group,n,p_y_le_pred,r_lo,r_hi"]
        for a, b in self.groups.items():
            lines.append(
                f"{a},{len(b.residuals)},{b.p_below:.6f},{b.r_lo:.6f},{b.r_hi:.6f}"
            )
        return "\n".join(lines) + "\n"

    def ecdf_text(self) -> str:
        lines = ["group,residual,ecdf"]
        for a, b in self.groups.items():
            m = len(b.residuals)
            lines += [f"{a},{r:.6f},{(i + 1) / m:.6f}" for i, r in enumerate(b.residuals)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "groups": {
                str(a): {
                    "n": len(b.residuals),
                    "p_y_le_pred": b.p_below,
                    "r_lo": b.r_lo,
                    "r_hi": b.r_hi,
                }
                for a, b in self.groups.items()
            },
        }


def bias_report(model, dataset: Dataset, indices=None, levels=(0.05, 0.95)) -> BiasReport:
    res = signed_residuals(model, dataset, indices)
    tails = tail_quantiles(res, levels)
    groups = {}
    for a, r in res.items():
        v, F = ecdf(r)
        groups[a] = GroupBias(v, float(F(0.0)), *tails[a])
    return BiasReport(groups, tuple(levels))


# ---------------------------------------------------------------------------
# repeated-split experiment


def comparison_methods(alpha: float = 0.1, symmetric: bool = False, alpha_lo=None, alpha_hi=None):
    """The six (name, spec) pairs compared in the equalized-coverage study."""
    kw = dict(alpha=alpha, symmetric=symmetric, alpha_lo=alpha_lo, alpha_hi=alpha_hi)
    grid = []
    for method, label in (("cp", "CP"), ("cqr", "CQR")):
        grid.append((f"Marginal {label}", CalibrationSpec(method, "marginal", **kw)))
        for mode in (TrainingMode.GROUPWISE, TrainingMode.JOINT):
            grid.append(
                (f"Conditional {label} ({mode})", CalibrationSpec(method, "conditional", mode=mode, **kw))
            )
    return grid


@dataclass(frozen=True)
class CellSummary:
    coverage: float
    avg_length: float
    repetitions: int  # successful repetitions
    unbounded: int
    errors: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class ExperimentSummary:
    methods: tuple[str, ...]
    labels: tuple[int, ...]
    cells: Mapping[tuple[str, int], CellSummary]
    reports: tuple[Mapping[str, CoverageReport | str], ...]
    seeds: tuple[int, ...]

    @property
    def repetitions(self) -> int:
        return len(self.reports)

    def cell(self, method: str, group: int) -> CellSummary:
        return self.cells[(method, group)]

    def to_records(self) -> list[dict]:
        return [
            {
                "method": m,
                "group": a,
                "coverage": self.cells[(m, a)].coverage,
                "avg_length": self.cells[(m, a)].avg_length,
                "unbounded_count": self.cells[(m, a)].unbounded,
            }
            for m in self.methods
            for a in self.labels
        ]

    def to_text(self) -> str:
        return _records_text(self.to_records())

    def to_table(self, group_names: Mapping[int, str] | None = None) -> str:
        names = group_names or {}
        lines = ["Method,Group,Avg. Coverage,Avg. Length"]
        for m in self.methods:
            for a in self.labels:
                c = self.cells[(m, a)]
                lines.append(f"{m},{names.get(a, a)},{_num3(c.coverage)},{_num3(c.avg_length)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "repetitions": self.repetitions,
            "seeds": list(self.seeds),
            "cells": [
                {
                    **rec,
                    "repetitions_ok": self.cells[(rec["method"], rec["group"])].repetitions,
                    "errors": list(self.cells[(rec["method"], rec["group"])].errors),
                }
                for rec in self.to_records()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True) + "\n"


def _num3(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.3f}"


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    return obj


def _derive(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _one_repetition(dataset, methods, rep_seed, train_fraction, calibration_fraction, learner, standardize):
    train, test = split_train_test(dataset.n, train_fraction, rep_seed)
    if standardize:
        scaler = fit_standardizer(dataset, train)
        dataset = dataset.with_features(scaler.transform(dataset.X))
    train_ds = dataset.subset(train)
    inner = split_train_calibration(train_ds, calibration_fraction, _derive(rep_seed, 1))
    rep_learner = Learner(learner.kind, learner.config.replace(seed=_derive(rep_seed, 2)))
    X_test, y_test, g_test = dataset.X[test], dataset.y[test], dataset.group[test]

    cache = {}
    out = {}
    for name, spec in methods:
        try:
            key = (spec.method, spec.mode, spec.fit_levels)
            if key not in cache:
                try:
                    cache[key] = fit_base_models(train_ds, inner.proper_train, spec, rep_learner)
                except EqcovError as exc:
                    cache[key] = exc
            if isinstance(cache[key], Exception):
                raise cache[key]
            predictor = calibrate(cache[key], train_ds, inner.calibration, spec)
            out[name] = evaluate(predict_intervals(predictor, X_test, g_test), y_test, g_test)
        except EqcovError as exc:
            out[name] = f"{type(exc).__name__}: {exc}"
    return out


def run_repeated_splits(
    dataset: Dataset,
    methods: Sequence[tuple[str, CalibrationSpec]] | None = None,
    repetitions: int = 40,
    train_fraction: float = 0.8,
    calibration_fraction: float = 0.5,
    seed: int = 0,
    learner: Learner | None = None,
    standardize: bool = True,
) -> ExperimentSummary:
    """Average per-group coverage and length over random train/test splits.

    Each repetition draws a fresh split, standardises features with training
    statistics, splits the training rows into proper-training and
    calibration halves, fits every base model once and evaluates each method
    on the test rows. Failures are recorded per cell; the run continues.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be at least 1")
    methods = list(methods or comparison_methods())
    names = tuple(name for name, _ in methods)
    if len(set(names)) != len(names):
        raise ConfigError("method names must be unique")
    learner = learner or Learner()
    seeds = tuple(_derive(seed, r) for r in range(repetitions))
    reports = tuple(
        _one_repetition(dataset, methods, s, train_fraction, calibration_fraction, learner, standardize)
        for s in seeds
    )

    labels = dataset.labels
    cells = {}
    for name in names:
        for a in labels:
            cov, lens, unb, errs = [], [], 0, []
            for r, rep in enumerate(reports):
                rpt = rep[name]
                if isinstance(rpt, str):
                    errs.append(f"rep {r}: {rpt}")
                    continue
                g = rpt.groups.get(a)
                if g is None:
                    errs.append(f"rep {r}: group {a} absent from test rows")
                    continue
                cov.append(g.coverage)
                if not math.isnan(g.avg_length):
                    lens.append(g.avg_length)
                unb += g.unbounded
            cells[(name, a)] = CellSummary(
                float(np.mean(cov)) if cov else math.nan,
                float(np.mean(lens)) if lens else math.nan,
                len(cov),
                unb,
                tuple(errs),
            )
    return ExperimentSummary(names, labels, cells, reports, seeds)
