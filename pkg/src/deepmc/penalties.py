"""Spectral penalties on the end-product matrix and their gradients.

Every penalty here is a spectral function ``f(sigma)`` of the singular
values, so its gradient has the form ``U diag(df/dsigma) V^T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, DegenerateSpectrumError
from .spectral import ZERO_RTOL, Svd, svd

KINDS = ("none", "ratio", "nuclear", "schatten", "schatten_ratio")
_RATIO_KINDS = ("ratio", "schatten_ratio")


def _parse_exponent(value, key):
    if value is None:
        return None
    try:
        frac = Fraction(str(value)).limit_denominator(1000) if isinstance(value, str) else value
        out = float(frac)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse exponent {value!r}", key) from exc
    if out <= 0:
        raise ConfigError(f"exponent must be positive, got {value!r}", key)
    return out


@dataclass(frozen=True)
class PenaltySpec:
    """Which spectral penalty to add and with what strength.

    ``p`` is the Schatten exponent for ``"schatten"``; ``p`` and ``q`` (with
    ``p < q``) are numerator/denominator exponents for ``"schatten_ratio"``.
    Exponents may be given as floats or as strings like ``"1/3"``.
    """

    kind: str = "none"
    lam: float = 0.0
    p: float | None = None
    q: float | None = None

    def __post_init__(self):
        kind = str(self.kind).lower().replace("-", "_")
        aliases = {"nuc": "nuclear", "sch": "schatten", "sch_ratio": "schatten_ratio", "None": "none"}
        kind = aliases.get(kind, kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}; expected one of {KINDS}", "penalty")
        object.__setattr__(self, "kind", kind)
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}", "lambda")
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "p", _parse_exponent(self.p, "p"))
        object.__setattr__(self, "q", _parse_exponent(self.q, "q"))
        if kind == "schatten" and self.p is None:
            raise ConfigError("schatten penalty needs p", "p")
        if kind == "schatten_ratio":
            if self.p is None or self.q is None:
                raise ConfigError("schatten_ratio penalty needs p and q", "p")
            if not self.p < self.q:
                raise ConfigError(f"schatten_ratio needs p < q, got p={self.p}, q={self.q}", "q")

    @property
    def active(self):
        return self.kind != "none" and self.lam > 0

    @property
    def label(self):
        if self.kind == "schatten":
            return f"schatten({_fmt(self.p)})"
        if self.kind == "schatten_ratio":
            return f"schatten_ratio({_fmt(self.p)}:{_fmt(self.q)})"
        return self.kind

    @property
    def token(self):
        """Round-trips through :func:`parse_penalty`."""
        if self.kind == "schatten":
            return f"schatten:{_fmt(self.p)}"
        if self.kind == "schatten_ratio":
            return f"schatten_ratio:{_fmt(self.p)}:{_fmt(self.q)}"
        return self.kind


def _fmt(x):
    return str(Fraction(x).limit_denominator(12))


class PenaltyEval(NamedTuple):
    value: float
    gradient: np.ndarray


def _schatten_sum(s, p):
    return float(np.sum(s**p))


def _value_from_sigma(spec, s):
    if spec.kind == "none":
        return 0.0
    fro = float(np.sqrt(np.sum(s * s)))
    if spec.kind in _RATIO_KINDS and fro < 1e-12:
        raise DegenerateSpectrumError(f"{spec.kind} penalty undefined at ||W||_F = {fro:.1e}")
    if spec.kind == "nuclear":
        return float(s.sum())
    if spec.kind == "ratio":
        return float(s.sum()) / fro
    if spec.kind == "schatten":
        return _schatten_sum(s, spec.p) ** (1.0 / spec.p)
    return _schatten_sum(s, spec.p) ** (1.0 / spec.p) / _schatten_sum(s, spec.q) ** (1.0 / spec.q)


def penalty_value(spec: PenaltySpec, w) -> float:
    """Unscaled penalty R(W); multiply by ``spec.lam`` for the loss term."""
    if spec.kind == "none":
        return 0.0
    s = np.linalg.svd(np.asarray(w, dtype=float), compute_uv=False)
    return _value_from_sigma(spec, s)


def _schatten_and_grad(s, p, floor):
    # d/dsigma_i (sum sigma^p)^(1/p) = S^(1/p - 1) sigma_i^(p - 1)
    total = _schatten_sum(s, p)
    norm = total ** (1.0 / p)
    clamped = np.maximum(s, floor)
    return norm, total ** (1.0 / p - 1.0) * clamped ** (p - 1.0)


def sigma_derivative(spec: PenaltySpec, sigma):
    """df/dsigma_i for the spectral function behind ``spec``."""
    s = np.asarray(sigma, dtype=float)
    if spec.kind == "none":
        return np.zeros_like(s)
    smax = s.max() if s.size else 0.0
    floor = ZERO_RTOL * smax
    live = s > floor
    fro = float(np.sqrt(np.sum(s * s)))
    if spec.kind in _RATIO_KINDS and fro < 1e-12:
        raise DegenerateSpectrumError(f"{spec.kind} penalty undefined at ||W||_F = {fro:.1e}")
    if spec.kind == "nuclear":
        return live.astype(float)
    if spec.kind == "ratio":
        nuc = float(s.sum())
        return (live.astype(float) - (nuc / fro**2) * s) / fro
    if spec.kind == "schatten":
        return _schatten_and_grad(s, spec.p, floor)[1]
    sp, dp = _schatten_and_grad(s, spec.p, floor)
    sq, dq = _schatten_and_grad(s, spec.q, floor)
    return (dp * sq - sp * dq) / sq**2


def penalty_gradient(spec: PenaltySpec, w_or_svd) -> PenaltyEval:
    """Value and gradient of R at W, from W itself or its thin SVD."""
    if isinstance(w_or_svd, Svd):
        dec = w_or_svd
    else:
        w = np.asarray(w_or_svd, dtype=float)
        if spec.kind == "none":
            return PenaltyEval(0.0, np.zeros_like(w))
        dec = svd(w)
    if spec.kind == "none":
        return PenaltyEval(0.0, np.zeros((dec.u.shape[0], dec.vt.shape[1])))
    value = _value_from_sigma(spec, dec.sigma)
    weights = sigma_derivative(spec, dec.sigma)
    return PenaltyEval(value, (dec.u * weights) @ dec.vt)


def parse_penalty(text, lam=0.0) -> PenaltySpec:
    """``"ratio"``, ``"nuclear"``, ``"none"``, ``"schatten:1/2"`` or ``"schatten_ratio:1/2:2/3"``."""
    parts = [s.strip() for s in str(text).split(":")]
    kind = parts[0]
    if len(parts) > 3:
        raise ConfigError(f"cannot parse penalty {text!r}", "penalty")
    p = parts[1] if len(parts) > 1 else None
    q = parts[2] if len(parts) > 2 else None
    return PenaltySpec(kind, lam, p, q)
