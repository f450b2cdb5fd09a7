"""Base predictors for conformal calibration.

Two families are provided:

* a two-hidden-layer ReLU network trained with Adam, dropout and weight
  decay, either on the summed pinball loss of two quantile levels or on the
  squared loss (conditional mean);
* affine baselines: subgradient descent on the pinball loss, and ordinary
  least squares for the mean.

All fits are deterministic given their seed. Fitted models are immutable and
round-trip exactly through :func:`model_to_dict` / :func:`model_from_dict`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, DataError

__all__ = [
    "pinball_loss",
    "NetConfig",
    "TrainingMode",
    "MLP",
    "NetRegressor",
    "LinearRegressor",
    "QuantilePairModel",
    "MeanModel",
    "fit_quantile_net",
    "fit_mean_net",
    "fit_linear_quantile",
    "fit_linear_quantile_pair",
    "fit_linear_mean",
    "predict_quantiles",
    "predict_mean",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1), got {level}")


def pinball_loss(residual, level: float):
    """Pinball (check) loss of ``residual = y - y_hat`` at quantile ``level``."""
    _check_level(level)
    r = np.asarray(residual, dtype=float)
    out = np.where(r > 0, level * r, (level - 1.0) * r)
    return float(out) if out.ndim == 0 else out


def _pinball_dresidual(r: np.ndarray, levels: np.ndarray) -> np.ndarray:
    return np.where(r > 0, levels, levels - 1.0)


class TrainingMode:
    JOINT = "joint"
    GROUPWISE = "groupwise"
    ALL = (JOINT, GROUPWISE)

    @staticmethod
    def check(mode: str) -> str:
        if mode not in TrainingMode.ALL:
            raise ConfigError(f"training mode must be one of {TrainingMode.ALL}, got {mode!r}")
        return mode


@dataclass(frozen=True)
class NetConfig:
    """Network and optimiser hyperparameters.

    ``patience`` stops training once the validation loss has not improved for
    that many epochs; ``None`` always runs ``max_epochs``.
    """

    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 5e-4
    batch_size: int = 64
    weight_decay: float = 1e-6
    dropout: float = 0.1
    max_epochs: int = 1000
    validation_fraction: float = 0.1
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ConfigError("hidden must hold two positive layer widths")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("learning_rate, batch_size and max_epochs must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive or None")

    def replace(self, **changes) -> "NetConfig":
        return NetConfig(**{**asdict(self), **changes})


# ---------------------------------------------------------------------------
# network


class MLP:
    """``p -> h1 -> h2 -> k`` ReLU network with inverted dropout on both
    hidden layers. Parameters live in ``self.params`` as
    ``[W1, b1, W2, b2, W3, b3]``."""

    def __init__(self, params: Sequence[np.ndarray]):
        self.params = [np.array(p, dtype=float) for p in params]

    @classmethod
    def initialize(cls, n_in: int, hidden: Sequence[int], n_out: int, rng) -> "MLP":
        sizes = [n_in, *hidden, n_out]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            params.append(rng.uniform(-bound, bound, fan_out))
        return cls(params)

    @property
    def n_in(self) -> int:
        return self.params[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.params[-1].shape[0]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, theta: np.ndarray) -> None:
        offset = 0
        for i, p in enumerate(self.params):
            self.params[i] = np.asarray(theta[offset : offset + p.size], dtype=float).reshape(p.shape)
            offset += p.size

    def forward(self, X, dropout: float = 0.0, rng=None):
        W1, b1, W2, b2, W3, b3 = self.params
        z1 = X @ W1 + b1
        h1 = np.maximum(z1, 0.0)
        m1 = None
        if dropout > 0.0:
            m1 = (rng.random(h1.shape) >= dropout) / (1.0 - dropout)
            h1 = h1 * m1
        z2 = h1 @ W2 + b2
        h2 = np.maximum(z2, 0.0)
        m2 = None
        if dropout > 0.0:
            m2 = (rng.random(h2.shape) >= dropout) / (1.0 - dropout)
            h2 = h2 * m2
        out = h2 @ W3 + b3
        return out, (X, z1, h1, m1, z2, h2, m2)

    def backward(self, cache, dout) -> list[np.ndarray]:
        X, z1, h1, m1, z2, h2, m2 = cache
        _, _, W2, _, W3, _ = self.params
        gW3 = h2.T @ dout
        gb3 = dout.sum(axis=0)
        dh2 = dout @ W3.T
        if m2 is not None:
            dh2 = dh2 * m2
        dz2 = dh2 * (z2 > 0)
        gW2 = h1.T @ dz2
        gb2 = dz2.sum(axis=0)
        dh1 = dz2 @ W2.T
        if m1 is not None:
            dh1 = dh1 * m1
        dz1 = dh1 * (z1 > 0)
        gW1 = X.T @ dz1
        gb1 = dz1.sum(axis=0)
        return [gW1, gb1, gW2, gb2, gW3, gb3]

    def predict(self, X) -> np.ndarray:
        return self.forward(np.asarray(X, dtype=float))[0]


def _loss_and_dout(out, Y, levels):
    """Mean over rows of the per-row loss; ``levels=None`` means squared loss."""
    n = len(Y)
    if levels is None:
        diff = out - Y
        return float(np.sum(diff**2) / n), 2.0 * diff / n
    r = Y - out
    loss = np.where(r > 0, levels * r, (levels - 1.0) * r)
    return float(loss.sum() / n), -_pinball_dresidual(r, levels) / n


def network_loss(net: MLP, X, Y, levels=None) -> float:
    """Data loss of ``net`` without dropout or weight decay."""
    out = net.predict(X)
    return _loss_and_dout(out, np.asarray(Y, dtype=float).reshape(out.shape), _levels(levels))[0]


def network_loss_grad(net: MLP, X, Y, levels=None) -> np.ndarray:
    """Backpropagated gradient of :func:`network_loss` as a flat vector."""
    X = np.asarray(X, dtype=float)
    out, cache = net.forward(X)
    _, dout = _loss_and_dout(out, np.asarray(Y, dtype=float).reshape(out.shape), _levels(levels))
    return np.concatenate([g.ravel() for g in net.backward(cache, dout)])


def kink_margin(net: MLP, X, Y, levels=None) -> float:
    """Smallest distance of any ReLU pre-activation or pinball residual to its
    kink at zero."""
    X = np.asarray(X, dtype=float)
    out, (_, z1, _, _, z2, _, _) = net.forward(X)
    margins = [np.abs(z1).min(), np.abs(z2).min()]
    if levels is not None:
        margins.append(np.abs(np.asarray(Y, dtype=float).reshape(out.shape) - out).min())
    return float(min(margins))


def _levels(levels):
    return None if levels is None else np.asarray(levels, dtype=float)


@dataclass(eq=False)
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True, eq=False)
class NetRegressor:
    """Trained network plus the response centring used during training.

    Outputs are ``center + scale * net(x)``. ``history`` records the
    validation loss per epoch and ``best_epoch`` the retained one (1-based).
    """

    net: MLP
    center: float
    scale: float
    config: NetConfig
    history: tuple[float, ...] = ()
    best_epoch: int = 0

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.net.n_in:
            raise DataError(f"expected {self.net.n_in} features, got {X.shape[1]}")
        return self.center + self.scale * self.net.predict(X)

    def to_dict(self) -> dict:
        return {
            "type": "net",
            "config": asdict(self.config),
            "center": self.center,
            "scale": self.scale,
            "params": [p.tolist() for p in self.net.params],
            "history": list(self.history),
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetRegressor":
        return cls(
            MLP([np.array(p, dtype=float) for p in d["params"]]),
            float(d["center"]),
            float(d["scale"]),
            NetConfig(**d["config"]),
            tuple(d.get("history", ())),
            int(d.get("best_epoch", 0)),
        )


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) < 2:
        raise DataError("at least two training pairs are required")
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"feature rows ({len(X)}) and responses ({len(y)}) disagree")
    return X, y


def _train_network(X, y, levels, config: NetConfig) -> NetRegressor:
    X, y = _check_xy(X, y)
    rng = np.random.default_rng(config.seed)
    center = float(y.mean())
    scale = float(y.std()) or 1.0
    t = (y - center) / scale
    n_out = 1 if levels is None else len(levels)
    T = np.repeat(t[:, None], n_out, axis=1)

    n_val = int(math.floor(len(y) * config.validation_fraction))
    if len(y) - n_val < 1:
        n_val = 0
    perm = rng.permutation(len(y))
    val, fit = perm[:n_val], perm[n_val:]
    X_fit, T_fit = X[fit], T[fit]

    net = MLP.initialize(X.shape[1], config.hidden, n_out, rng)
    opt = _Adam(config.learning_rate)
    lv = _levels(levels)
    history: list[float] = []
    best_loss, best_epoch, best_params = math.inf, 0, [p.copy() for p in net.params]

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(fit))
        for start in range(0, len(order), config.batch_size):
            b = order[start : start + config.batch_size]
            out, cache = net.forward(X_fit[b], config.dropout, rng)
            _, dout = _loss_and_dout(out, T_fit[b], lv)
            grads = net.backward(cache, dout)
            if config.weight_decay:
                grads = [g + config.weight_decay * p for g, p in zip(grads, net.params)]
            opt.step(net.params, grads)

        if n_val:
            loss = network_loss(net, X[val], T[val], lv)
            history.append(loss)
            if loss < best_loss:
                best_loss, best_epoch = loss, epoch
                best_params = [p.copy() for p in net.params]
            elif config.patience is not None and epoch - best_epoch >= config.patience:
                break
    if n_val:
        net.params = best_params
    else:
        best_epoch = config.max_epochs
    return NetRegressor(net, center, scale, config, tuple(history), best_epoch)


# ---------------------------------------------------------------------------
# affine baselines


@dataclass(frozen=True, eq=False)
class LinearRegressor:
    coef: np.ndarray  # (p, k)
    intercept: np.ndarray  # (k,)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.coef.shape[0]:
            raise DataError(f"expected {self.coef.shape[0]} features, got {X.shape[1]}")
        return X @ self.coef + self.intercept

    def to_dict(self) -> dict:
        return {"type": "linear", "coef": self.coef.tolist(), "intercept": self.intercept.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinearRegressor":
        return cls(np.array(d["coef"], dtype=float), np.array(d["intercept"], dtype=float))

    @staticmethod
    def stack(parts: Sequence["LinearRegressor"]) -> "LinearRegressor":
        return LinearRegressor(
            np.hstack([r.coef for r in parts]), np.concatenate([r.intercept for r in parts])
        )


def fit_linear_quantile(
    X,
    y,
    level: float,
    iterations: int = 4000,
    step: float = 0.5,
    final_step: float = 1e-5,
) -> LinearRegressor:
    """Affine ``level``-quantile fit by full-batch subgradient descent.

    Step sizes decay geometrically from ``step`` to ``final_step`` over
    ``iterations``; the iterate with the smallest empirical pinball loss is
    returned. Features and response are standardised internally.
    """
    _check_level(level)
    X, y = _check_xy(X, y)
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    yc, ys = float(np.median(y)), float(np.std(y)) or 1.0
    t = (y - yc) / ys
    if np.all(t == t[0]):
        w, b = np.zeros(X.shape[1]), float(t[0])
    else:
        decay = (final_step / step) ** (1.0 / max(iterations - 1, 1))
        n = len(t)
        w, b = np.zeros(X.shape[1]), float(np.quantile(t, level))
        best_w, best_b, best = w.copy(), b, np.inf
        eta = step
        for _ in range(iterations):
            r = t - Z @ w - b
            loss = np.mean(np.where(r > 0, level * r, (level - 1.0) * r))
            if loss < best:
                best, best_w, best_b = loss, w.copy(), b
            psi = np.where(r > 0, level, level - 1.0)
            gw = -(Z.T @ psi) / n
            gb = -psi.mean()
            w = w - eta * gw
            b = b - eta * gb
            eta *= decay
        w, b = best_w, best_b
    coef = ys * w / sd
    intercept = yc + ys * b - float(coef @ mu)
    return LinearRegressor(coef[:, None], np.array([intercept]))


def fit_linear_mean(X, y) -> "MeanModel":
    X, y = _check_xy(X, y)
    D = np.hstack([X, np.ones((len(X), 1))])
    sol, *_ = np.linalg.lstsq(D, y, rcond=None)
    return MeanModel(LinearRegressor(sol[:-1, None], sol[-1:].copy()))


def fit_linear_quantile_pair(X, y, levels=(0.05, 0.95), **schedule) -> "QuantilePairModel":
    levels = _pair_levels(levels)
    parts = [fit_linear_quantile(X, y, lv, **schedule) for lv in levels]
    return QuantilePairModel(LinearRegressor.stack(parts), levels)


# ---------------------------------------------------------------------------
# fitted model wrappers


def _pair_levels(levels) -> tuple[float, float]:
    lo, hi = (float(v) for v in levels)
    _check_level(lo)
    _check_level(hi)
    if not lo < hi:
        raise ConfigError("quantile levels must satisfy lo < hi")
    return lo, hi


@dataclass(frozen=True, eq=False)
class QuantilePairModel:
    """Lower and upper conditional-quantile predictors (two-output regressor)."""

    regressor: NetRegressor | LinearRegressor
    levels: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "levels", _pair_levels(self.levels))

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        out = self.regressor.predict(X)
        return out[:, 0], out[:, 1]


@dataclass(frozen=True, eq=False)
class MeanModel:
    regressor: NetRegressor | LinearRegressor

    def predict(self, X) -> np.ndarray:
        return self.regressor.predict(X)[:, 0]


def fit_quantile_net(X, y, levels=(0.05, 0.95), config: NetConfig | None = None) -> QuantilePairModel:
    """Two-output network trained on the summed pinball losses at ``levels``."""
    levels = _pair_levels(levels)
    reg = _train_network(X, y, levels, config or NetConfig())
    return QuantilePairModel(reg, levels)


def fit_mean_net(X, y, config: NetConfig | None = None) -> MeanModel:
    return MeanModel(_train_network(X, y, None, config or NetConfig()))


def predict_quantiles(model: QuantilePairModel, x):
    """``(q_lo, q_hi)`` at a single feature vector (floats) or a matrix (arrays)."""
    lo, hi = model.predict(x)
    if np.ndim(x) <= 1:
        return float(lo[0]), float(hi[0])
    return lo, hi


def predict_mean(model: MeanModel, x):
    mu = model.predict(x)
    return float(mu[0]) if np.ndim(x) <= 1 else mu


# ---------------------------------------------------------------------------
# serialisation

_FORMAT = "eqcov.model/1"


def _regressor_from_dict(d: Mapping):
    if d["type"] == "net":
        return NetRegressor.from_dict(d)
    if d["type"] == "linear":
        return LinearRegressor.from_dict(d)
    raise DataError(f"unknown regressor type {d['type']!r}")


def model_to_dict(model: QuantilePairModel | MeanModel) -> dict:
    if isinstance(model, QuantilePairModel):
        return {
            "format": _FORMAT,
            "kind": "quantile_pair",
            "levels": list(model.levels),
            "regressor": model.regressor.to_dict(),
        }
    return {"format": _FORMAT, "kind": "mean", "regressor": model.regressor.to_dict()}


def model_from_dict(d: Mapping) -> QuantilePairModel | MeanModel:
    if d.get("format") != _FORMAT:
        raise DataError(f"not an eqcov model document (format={d.get('format')!r})")
    reg = _regressor_from_dict(d["regressor"])
    if d["kind"] == "quantile_pair":
        return QuantilePairModel(reg, tuple(d["levels"]))
    if d["kind"] == "mean":
        return MeanModel(reg)
    raise DataError(f"unknown model kind {d['kind']!r}")


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
