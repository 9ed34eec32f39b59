"""Full-batch first-order update rules.

All rules update the parameter arrays in place. Hyperparameters left as
``None`` on :class:`OptimizerSpec` resolve to the per-rule defaults in
``RULE_DEFAULTS`` (the customary library defaults, except ``lr`` which is
1e-3 everywhere).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigError, DivergedError, InvalidInputError

KINDS = (
    "gd",
    "gd_momentum",
    "adam",
    "adamw",
    "adamax",
    "nadam",
    "radam",
    "adagrad",
    "adadelta",
    "rmsprop",
)

# beta2 doubles as the squared-gradient smoothing constant of rmsprop/adadelta
RULE_DEFAULTS = {
    "gd": dict(momentum=0.0, weight_decay=0.0),
    "gd_momentum": dict(momentum=0.9, weight_decay=0.0),
    "adam": dict(beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0),
    "adamw": dict(beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=1e-2),
    "adamax": dict(beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0),
    "nadam": dict(beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0),
    "radam": dict(beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0),
    "adagrad": dict(epsilon=1e-10, weight_decay=0.0),
    "adadelta": dict(beta2=0.9, epsilon=1e-6, weight_decay=0.0),
    "rmsprop": dict(beta2=0.99, epsilon=1e-8, weight_decay=0.0),
}

_ALIASES = {"sgd": "gd", "momentum": "gd_momentum", "sgd_momentum": "gd_momentum", "amsgrad": "adam"}

NADAM_MOMENTUM_DECAY = 4e-3


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float | None = None
    beta2: float | None = None
    epsilon: float | None = None
    momentum: float | None = None
    weight_decay: float | None = None
    amsgrad: bool = False

    def __post_init__(self):
        kind = str(self.kind).lower().replace("-", "_")
        if kind == "amsgrad":
            object.__setattr__(self, "amsgrad", True)
        kind = _ALIASES.get(kind, kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}", "optimizer")
        object.__setattr__(self, "kind", kind)
        for name, value in RULE_DEFAULTS[kind].items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}", "lr")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}", name)
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be positive", "epsilon")
        if self.momentum is not None and self.momentum < 0:
            raise ConfigError("momentum must be >= 0", "momentum")
        if self.weight_decay is not None and self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", "weight_decay")
        if self.amsgrad and kind not in ("adam", "adamw"):
            raise ConfigError("amsgrad only applies to adam/adamw", "amsgrad")

    @property
    def label(self):
        return "adam_amsgrad" if (self.kind == "adam" and self.amsgrad) else self.kind

    def with_lr(self, lr):
        return replace(self, lr=lr)


@dataclass
class OptimizerState:
    """Moment buffers keyed by name, one array per parameter."""

    step_count: int = 0
    buffers: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)

    def buffer(self, name, params):
        if name not in self.buffers:
            self.buffers[name] = [np.zeros_like(p, dtype=float) for p in params]
        return self.buffers[name]


def init_state(spec: OptimizerSpec, params) -> OptimizerState:
    return OptimizerState()


def step(spec: OptimizerSpec, state: OptimizerState, params, grads):
    """Apply one update in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise InvalidInputError(f"{len(params)} params but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise InvalidInputError(f"param {i} has shape {np.shape(p)} but gradient {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite gradient at step {state.step_count + 1}", step=state.step_count + 1)
    state.step_count += 1
    _RULES[spec.kind](spec, state, params, grads)
    return params, state


def _with_decay(spec, p, g):
    if spec.weight_decay and spec.kind != "adamw":
        return g + spec.weight_decay * p
    return g


def _gd(spec, state, params, grads):
    mom = spec.momentum
    bufs = state.buffer("momentum", params) if mom else None
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _with_decay(spec, p, g)
        if mom:
            if state.step_count == 1:
                bufs[i][...] = g
            else:
                bufs[i] *= mom
                bufs[i] += g
            g = bufs[i]
        p -= spec.lr * g


def _adam(spec, state, params, grads):
    t = state.step_count
    b1, b2, eps = spec.beta1, spec.beta2, spec.epsilon
    m = state.buffer("m", params)
    v = state.buffer("v", params)
    vmax = state.buffer("v_max", params) if spec.amsgrad else None
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if spec.kind == "adamw" and spec.weight_decay:
            p *= 1.0 - spec.lr * spec.weight_decay
        g = _with_decay(spec, p, g)
        m[i] *= b1
        m[i] += (1.0 - b1) * g
        v[i] *= b2
        v[i] += (1.0 - b2) * g * g
        if vmax is not None:
            np.maximum(vmax[i], v[i], out=vmax[i])
            second = vmax[i]
        else:
            second = v[i]
        denom = np.sqrt(second / bc2) + eps
        p -= spec.lr * (m[i] / bc1) / denom


def _adamax(spec, state, params, grads):
    t = state.step_count
    b1, b2, eps = spec.beta1, spec.beta2, spec.epsilon
    m = state.buffer("m", params)
    u = state.buffer("u", params)
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _with_decay(spec, p, g)
        m[i] *= b1
        m[i] += (1.0 - b1) * g
        np.maximum(b2 * u[i], np.abs(g), out=u[i])
        p -= (spec.lr / (1.0 - b1**t)) * m[i] / (u[i] + eps)


def _nadam(spec, state, params, grads):
    t = state.step_count
    b1, b2, eps = spec.beta1, spec.beta2, spec.epsilon
    mu_t = b1 * (1.0 - 0.5 * 0.96 ** (t * NADAM_MOMENTUM_DECAY))
    mu_next = b1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * NADAM_MOMENTUM_DECAY))
    mu_prod = state.scalars.get("mu_product", 1.0) * mu_t
    state.scalars["mu_product"] = mu_prod
    m = state.buffer("m", params)
    v = state.buffer("v", params)
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _with_decay(spec, p, g)
        m[i] *= b1
        m[i] += (1.0 - b1) * g
        v[i] *= b2
        v[i] += (1.0 - b2) * g * g
        denom = np.sqrt(v[i] / bc2) + eps
        p -= spec.lr * (1.0 - mu_t) / (1.0 - mu_prod) * g / denom
        p -= spec.lr * mu_next / (1.0 - mu_prod * mu_next) * m[i] / denom


def _radam(spec, state, params, grads):
    t = state.step_count
    b1, b2, eps = spec.beta1, spec.beta2, spec.epsilon
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
    m = state.buffer("m", params)
    v = state.buffer("v", params)
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt(
            (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _with_decay(spec, p, g)
        m[i] *= b1
        m[i] += (1.0 - b1) * g
        v[i] *= b2
        v[i] += (1.0 - b2) * g * g
        m_hat = m[i] / bc1
        if rect is None:
            p -= spec.lr * m_hat
        else:
            p -= spec.lr * rect * m_hat / (np.sqrt(v[i] / bc2) + eps)


def _adagrad(spec, state, params, grads):
    acc = state.buffer("sum_sq", params)
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _with_decay(spec, p, g)
        acc[i] += g * g
        p -= spec.lr * g / (np.sqrt(acc[i]) + spec.epsilon)


def _adadelta(spec, state, params, grads):
    rho, eps = spec.beta2, spec.epsilon
    sq = state.buffer("sq_avg", params)
    acc = state.buffer("delta_avg", params)
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _with_decay(spec, p, g)
        sq[i] *= rho
        sq[i] += (1.0 - rho) * g * g
        delta = np.sqrt(acc[i] + eps) / np.sqrt(sq[i] + eps) * g
        acc[i] *= rho
        acc[i] += (1.0 - rho) * delta * delta
        p -= spec.lr * delta


def _rmsprop(spec, state, params, grads):
    alpha, eps = spec.beta2, spec.epsilon
    sq = state.buffer("sq_avg", params)
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _with_decay(spec, p, g)
        sq[i] *= alpha
        sq[i] += (1.0 - alpha) * g * g
        p -= spec.lr * g / (np.sqrt(sq[i]) + eps)


_RULES = {
    "gd": _gd,
    "gd_momentum": _gd,
    "adam": _adam,
    "adamw": _adam,
    "adamax": _adamax,
    "nadam": _nadam,
    "radam": _radam,
    "adagrad": _adagrad,
    "adadelta": _adadelta,
    "rmsprop": _rmsprop,
}


def adam_preconditioner_diagonals(spec: OptimizerSpec, state: OptimizerState):
    """Per-parameter ``v_hat ** -1/2`` from an Adam-family state (zeros where v_hat = 0)."""
    if "v" not in state.buffers or state.step_count == 0:
        raise InvalidInputError("state holds no second-moment estimates yet")
    bc2 = 1.0 - spec.beta2**state.step_count
    key = "v_max" if spec.amsgrad else "v"
    out = []
    for v in state.buffers[key]:
        v_hat = v / bc2
        with np.errstate(divide="ignore"):
            out.append(np.where(v_hat > 0, 1.0 / np.sqrt(np.where(v_hat > 0, v_hat, 1.0)), 0.0))
    return out
