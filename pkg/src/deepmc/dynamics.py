"""Continuous-time predictions for the end-product matrix and a finite-difference check.

Vectorisation is column-major throughout, so ``vec(A X B) = (B^T kron A) vec(X)``.
Under that convention the depth-N gradient-flow preconditioner is

    P_W = sum_j (W^T W)^{(N-j)/N} kron (W W^T)^{(j-1)/N}

and ``vec(dW/dt) = -P_W vec(G)`` with G the gradient of the objective at W.
For a general (not necessarily balanced) net the first-order response of
the end product to per-layer updates is ``sum_j K_j D_j K_j^T`` with
``K_j = (W_{j-1}...W_1)^T kron (W_N...W_{j+1})`` and ``D_j`` the per-entry
step scaling of layer j (identity for GD, ``diag(vec(S_j))`` for Adam).
Both agree on balanced nets.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateSpectrumError, InvalidInputError, UnsupportedOperationError, UnsupportedSizeError
from .models import DeepLinearNet, _prefix_products, end_product, layer_gradients
from .optimizers import OptimizerSpec, OptimizerState, step
from .penalties import PenaltySpec, penalty_gradient
from .spectral import psd_fractional_power, svd, vec
from .training import MaskedMatrix, masked_loss_gradient

DENSE_LIMIT = 2500
DEGENERACY_RTOL = 1e-6

REGIMES = ("gd", "gd_penalty", "adam", "adam_penalty")
_REGIME_ALIASES = {
    "gd+penalty": "gd_penalty",
    "adam+penalty": "adam_penalty",
    "gd+ratio": "gd_penalty",
    "adam+ratio": "adam_penalty",
}


def _regime(name):
    key = str(name).lower().replace("-", "_")
    key = _REGIME_ALIASES.get(key, key)
    if key not in REGIMES:
        raise InvalidInputError(f"unknown regime {name!r}; expected one of {REGIMES}")
    return key


class PreconditionerEval(NamedTuple):
    p_matrix: np.ndarray
    depth: int
    g_diagonals: list | None = None

    @property
    def psd_margin(self):
        """``lambda_min / lambda_max`` of the symmetric part."""
        sym = 0.5 * (self.p_matrix + self.p_matrix.T)
        ev = np.linalg.eigvalsh(sym)
        top = max(abs(ev[-1]), abs(ev[0]))
        return float(ev[0] / top) if top > 0 else 0.0


class VelocityPrediction(NamedTuple):
    sv_velocities: np.ndarray
    w_velocity: np.ndarray
    regime: str
    degenerate: bool = False


def _gram_power(gram, exponent):
    # the zeroth power is the identity, not the range projector
    if exponent == 0:
        return np.eye(gram.shape[0])
    return psd_fractional_power(gram, exponent)


def _gram_powers(w, depth):
    """``[(W W^T)^{k/N}]`` and ``[(W^T W)^{k/N}]`` for k = 0..N-1."""
    w = np.asarray(w, dtype=float)
    left = w @ w.T
    right = w.T @ w
    return (
        [_gram_power(left, k / depth) for k in range(depth)],
        [_gram_power(right, k / depth) for k in range(depth)],
    )


def _check_depth(depth):
    if int(depth) != depth or depth < 1:
        raise InvalidInputError(f"depth must be a positive integer, got {depth}")
    return int(depth)


def _check_dense(m, n):
    if m * n > DENSE_LIMIT:
        raise UnsupportedSizeError(f"dense preconditioner needs mn <= {DENSE_LIMIT}, got {m * n}")


def preconditioner_gd(w, depth) -> PreconditionerEval:
    """Dense ``P_W`` for the end product ``w`` of a depth-``depth`` net."""
    depth = _check_depth(depth)
    w = np.asarray(w, dtype=float)
    m, n = w.shape
    _check_dense(m, n)
    if depth == 1:
        return PreconditionerEval(np.eye(m * n), 1)
    lp, rp = _gram_powers(w, depth)
    p = np.zeros((m * n, m * n))
    for j in range(1, depth + 1):
        p += np.kron(rp[depth - j], lp[j - 1])
    return PreconditionerEval(p, depth)


def apply_preconditioner_gd(w, depth, x):
    """Matrix-free ``unvec(P_W vec(x))``."""
    depth = _check_depth(depth)
    x = np.asarray(x, dtype=float)
    if depth == 1:
        return x.copy()
    lp, rp = _gram_powers(w, depth)
    return sum(lp[depth - j] @ x @ rp[j - 1] for j in range(1, depth + 1))


def _layer_factors(net):
    """``(L_j, R_j)`` with ``L_j = W_N...W_{j+1}`` and ``R_j = W_{j-1}...W_1`` (None for identity)."""
    layers = net.layers
    prefix = _prefix_products(layers)
    out = [None] * len(layers)
    left = None
    for j in range(len(layers) - 1, -1, -1):
        out[j] = (left, prefix[j])
        left = layers[j] if left is None else left @ layers[j]
    return out


def apply_preconditioner_net(net: DeepLinearNet, x, factors=None):
    """Matrix-free ``sum_j L_j (S_j * (L_j^T x R_j^T)) R_j``; S_j = 1 when ``factors`` is None."""
    x = np.asarray(x, dtype=float)
    if x.shape != net.shape:
        raise InvalidInputError(f"shape {x.shape} != end-product shape {net.shape}")
    out = np.zeros_like(x)
    for j, (lf, rf) in enumerate(_layer_factors(net)):
        inner = x if lf is None else lf.T @ x
        inner = inner if rf is None else inner @ rf.T
        if factors is not None:
            inner = factors[j] * inner
        inner = inner if lf is None else lf @ inner
        out += inner if rf is None else inner @ rf
    return out


def _embedding(lf, rf, m, n):
    """``K_j = R_j^T kron L_j`` as an (mn x d_j d_{j-1}) matrix."""
    left = np.eye(m) if lf is None else lf
    right_t = np.eye(n) if rf is None else rf.T
    return np.kron(right_t, left)


def adam_factors(grads, variances, epsilon=0.0):
    """``S_j = 1 / (sqrt(g_j^2 + s_j^2) + epsilon)`` for each layer."""
    out = []
    for j, (g, s2) in enumerate(zip(grads, variances)):
        g = np.asarray(g, dtype=float)
        s2 = np.asarray(s2, dtype=float)
        if g.shape != s2.shape:
            raise InvalidInputError(f"layer {j + 1}: gradient {g.shape} vs variance {s2.shape}")
        if np.any(s2 < 0):
            raise InvalidInputError(f"layer {j + 1}: variances must be non-negative")
        denom = np.sqrt(g * g + s2) + epsilon
        if np.any(denom == 0):
            raise InvalidInputError(f"layer {j + 1}: zero second moment; pass epsilon > 0")
        out.append(1.0 / denom)
    return out


def preconditioner_adam(net: DeepLinearNet, grads=None, variances=None, factors=None, epsilon=0.0,
                        form="exact") -> PreconditionerEval:
    """Dense ``P_{W,G}`` for Adam-scaled layer updates.

    ``factors`` (the per-entry scalings ``S_j``) may be given directly;
    otherwise they are built from ``grads`` and ``variances``. ``form="exact"``
    gives the symmetric PSD operator ``sum_j K_j diag(vec S_j) K_j^T``.
    ``form="product"`` gives ``sum_j P_j diag(vec S_j)`` with P_j the j-th
    Kronecker term of ``P_W``; it needs every layer to share the end
    product's shape and is not symmetric in general.
    """
    if factors is None:
        if grads is None or variances is None:
            raise InvalidInputError("pass either factors or both grads and variances")
        factors = adam_factors(grads, variances, epsilon)
    if len(factors) != net.depth:
        raise InvalidInputError(f"{len(factors)} factor arrays for a depth-{net.depth} net")
    for j, (s, w) in enumerate(zip(factors, net.layers)):
        if np.shape(s) != w.shape:
            raise InvalidInputError(f"layer {j + 1}: factor shape {np.shape(s)} != layer shape {w.shape}")
    m, n = net.shape
    _check_dense(m, n)
    diags = [vec(np.asarray(s, dtype=float)) for s in factors]
    p = np.zeros((m * n, m * n))
    if form == "exact":
        for (lf, rf), d in zip(_layer_factors(net), diags):
            k = _embedding(lf, rf, m, n)
            p += (k * d) @ k.T
    elif form == "product":
        if any(w.shape != (m, n) for w in net.layers):
            raise UnsupportedOperationError("product form needs every layer to have the end-product shape")
        lp, rp = _gram_powers(end_product(net), net.depth)
        big_n = net.depth
        for j in range(1, big_n + 1):
            p += np.kron(rp[big_n - j], lp[j - 1]) * diags[j - 1][None, :]
    else:
        raise InvalidInputError(f"unknown form {form!r}")
    return PreconditionerEval(p, net.depth, diags)


def _degenerate(sigma):
    if sigma.size < 2 or sigma[0] == 0:
        return False
    gaps = np.abs(np.diff(sigma))
    return bool(np.any(gaps < DEGENERACY_RTOL * sigma[0]))


def predict_velocity(regime, w_or_net, loss_grad, penalty: PenaltySpec | None = None, adam_factors=None,
                     depth=None) -> VelocityPrediction:
    """Closed-form ``dW/dt`` and ``d sigma_i/dt`` at the current point.

    GD regimes use ``P_W`` built from W alone (``depth`` defaults to the
    net's depth), so the singular value rates take the closed form
    ``-N sigma_i^{2(N-1)/N} u_i^T G v_i``. Adam regimes need the layer
    matrices and per-layer factors ``S_j``; their singular value rates are
    ``u_i^T dW/dt v_i``. Penalty regimes add ``lam * grad R(W)`` to G and
    flag (with a warning) singular values closer than 1e-6 sigma_1.
    """
    regime = _regime(regime)
    net = w_or_net if isinstance(w_or_net, DeepLinearNet) else None
    w = end_product(net) if net is not None else np.asarray(w_or_net, dtype=float)
    depth = _check_depth(depth if depth is not None else (net.depth if net is not None else 1))
    g = np.asarray(loss_grad, dtype=float)
    if g.shape != w.shape:
        raise InvalidInputError(f"loss gradient shape {g.shape} != W shape {w.shape}")
    dec = svd(w)
    degenerate = False
    if regime.endswith("penalty"):
        if penalty is None:
            raise InvalidInputError(f"regime {regime} needs a penalty")
        degenerate = _degenerate(dec.sigma)
        if degenerate:
            warnings.warn("repeated singular values; singular-vector derivatives are ill-defined", RuntimeWarning)
        if penalty.active:
            g = g + penalty.lam * penalty_gradient(penalty, dec).gradient
    k = dec.sigma.size
    u, vt = dec.u[:, :k], dec.vt[:k]
    if regime.startswith("gd"):
        w_dot = -apply_preconditioner_gd(w, depth, g)
        proj = np.einsum("ik,ij,kj->k", u, g, vt)
        sv_dot = -depth * dec.sigma ** (2.0 * (depth - 1) / depth) * proj
    else:
        if net is None:
            if depth != 1:
                raise InvalidInputError("adam regimes at depth > 1 need the layer matrices")
            net = DeepLinearNet([w])
        if adam_factors is None:
            raise InvalidInputError("adam regimes need per-layer factors")
        w_dot = -apply_preconditioner_net(net, g, adam_factors)
        sv_dot = np.einsum("ik,ij,kj->k", u, w_dot, vt)
    return VelocityPrediction(sv_dot, w_dot, regime, degenerate)


def balanced_net(w, depth, seed=None) -> DeepLinearNet:
    """Layers with ``W_{j+1}^T W_{j+1} = W_j W_j^T`` whose product is ``w``.

    Each layer carries ``Sigma^{1/N}``; interior bases are random
    orthogonal matrices (identity when ``seed`` is None).
    """
    depth = _check_depth(depth)
    w = np.asarray(w, dtype=float)
    m, n = w.shape
    if m != n:
        raise UnsupportedOperationError("balanced factorisation is implemented for square matrices")
    dec = svd(w)
    root = np.diag(dec.sigma ** (1.0 / depth))
    rng = None if seed is None else np.random.default_rng(seed)
    bases = [dec.vt.T]
    for _ in range(depth - 1):
        if rng is None:
            bases.append(np.eye(n))
        else:
            q, r = np.linalg.qr(rng.standard_normal((n, n)))
            bases.append(q * np.sign(np.diag(r)))
    bases.append(dec.u)
    layers = [bases[j + 1] @ root @ bases[j].T for j in range(depth)]
    return DeepLinearNet(layers, seed=seed)


@dataclass
class ValidationReport:
    regime: str
    depth: int
    alphas: list
    matrix_deviation: list
    sv_deviation: list
    psd_margin: float | None
    degenerate: bool
    extra: dict = field(default_factory=dict)

    @property
    def max_deviation(self):
        return [max(a, b) for a, b in zip(self.matrix_deviation, self.sv_deviation)]

    @property
    def richardson_ratios(self):
        """``dev(alpha_k) / dev(alpha_{k+1})``; about 2 for a halving ladder."""
        d = self.max_deviation
        return [d[i] / d[i + 1] if d[i + 1] > 0 else math.inf for i in range(len(d) - 1)]

    def to_dict(self):
        return {
            "regime": self.regime,
            "depth": self.depth,
            "alphas": self.alphas,
            "matrix_deviation": self.matrix_deviation,
            "sv_deviation": self.sv_deviation,
            "max_deviation": self.max_deviation,
            "richardson_ratios": self.richardson_ratios,
            "psd_margin": self.psd_margin,
            "degenerate": self.degenerate,
            **self.extra,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _rel(a, b):
    scale = float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b))) / scale if scale > 0 else float(np.max(np.abs(a)))


def validate_against_trainer(regime, net: DeepLinearNet, data: MaskedMatrix, alpha=1e-5, penalty=None,
                             ladder=3, top_r=None, epsilon=1e-8) -> ValidationReport:
    """Compare one discrete optimizer step with the predicted velocity.

    For each step size ``alpha / 2**k`` (k < ``ladder``) a copy of ``net``
    takes one full-batch step from a fresh optimizer state. The finite
    differences ``(W_{t+1} - W_t) / alpha`` and ``(sigma_{t+1} - sigma_t) / alpha``
    are compared with :func:`predict_velocity`; deviations are maximum
    absolute errors relative to the largest predicted magnitude.

    GD regimes are predicted from ``P_W`` of the end product, which matches
    the trainer only on balanced nets. Adam regimes use the factors the
    first Adam step divides by, ``1 / (|g| + epsilon)``.
    """
    regime = _regime(regime)
    if alpha > 1e-4:
        raise InvalidInputError(f"step size {alpha} too large for a first-order comparison (<= 1e-4)")
    penalty = penalty if penalty is not None else PenaltySpec()
    if regime.endswith("penalty") and not penalty.active:
        raise InvalidInputError(f"regime {regime} needs an active penalty")
    if not regime.endswith("penalty"):
        penalty = PenaltySpec()
    w0 = end_product(net)
    sigma0 = np.linalg.svd(w0, compute_uv=False)
    top_r = sigma0.size if top_r is None else int(top_r)
    grad = masked_loss_gradient(w0, data)
    total = grad + (penalty.lam * penalty_gradient(penalty, w0).gradient if penalty.active else 0.0)
    kind = "gd" if regime.startswith("gd") else "adam"
    factors = None
    if kind == "adam":
        factors = [1.0 / (np.abs(g) + epsilon) for g in layer_gradients(net, total)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pred = predict_velocity(regime, net, grad, penalty if regime.endswith("penalty") else None,
                                adam_factors=factors, depth=net.depth)
    alphas, mdev, sdev = [], [], []
    for k in range(ladder):
        a = alpha / 2**k
        trial = net.copy()
        grads = layer_gradients(trial, total)
        step(OptimizerSpec(kind=kind, lr=a, epsilon=epsilon if kind == "adam" else None), OptimizerState(),
             trial.params, grads)
        w1 = end_product(trial)
        fd_w = (w1 - w0) / a
        fd_s = (np.linalg.svd(w1, compute_uv=False) - sigma0) / a
        alphas.append(a)
        mdev.append(_rel(fd_w, pred.w_velocity))
        sdev.append(_rel(fd_s[:top_r], pred.sv_velocities[:top_r]))
    margin = None
    m, n = w0.shape
    if m * n <= DENSE_LIMIT:
        if kind == "gd":
            margin = preconditioner_gd(w0, net.depth).psd_margin
        else:
            margin = preconditioner_adam(net, factors=factors).psd_margin
    return ValidationReport(regime, net.depth, alphas, mdev, sdev, margin, pred.degenerate,
                            extra={"top_r": top_r, "penalty": penalty.label})


__all__ = [
    "PreconditionerEval",
    "VelocityPrediction",
    "ValidationReport",
    "preconditioner_gd",
    "preconditioner_adam",
    "apply_preconditioner_gd",
    "apply_preconditioner_net",
    "adam_factors",
    "predict_velocity",
    "balanced_net",
    "validate_against_trainer",
    "DegenerateSpectrumError",
]
