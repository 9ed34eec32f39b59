"""Convex completion baselines: SoftImpute and minimum nuclear norm."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import InvalidInputError
from .training import MaskedMatrix, TrainConfig, masked_loss, snapshot


class BaselineResult(NamedTuple):
    estimate: np.ndarray
    iterations: int
    converged: bool
    objective_trace: np.ndarray


def svt(matrix, tau):
    """Singular value soft-thresholding, the prox of ``tau * ||.||_*``."""
    u, s, vt = np.linalg.svd(np.asarray(matrix, dtype=float), full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def _nuclear(a):
    return float(np.linalg.svd(a, compute_uv=False).sum())


def _require_observations(data):
    if data.n_observed == 0:
        raise InvalidInputError("baselines need at least one observed entry")


def soft_impute(data: MaskedMatrix, shrink=None, max_iters=100, tol=1e-3, init=None) -> BaselineResult:
    """SoftImpute with a fixed shrinkage value.

    Iterates ``Z <- SVT_shrink(P_Omega(M) + P_Omega_perp(Z))`` from a zero
    fill until the relative Frobenius change falls below ``tol``. The
    default ``shrink`` is ``sigma_1(P_Omega(M)) / 50``. The returned
    estimate keeps the observed values and takes the rest from Z.
    """
    _require_observations(data)
    mask = data.mask
    observed = data.observed_dense
    if shrink is None:
        shrink = float(np.linalg.norm(observed, 2)) / 50.0
    if shrink < 0:
        raise InvalidInputError("shrink must be >= 0")
    z = np.zeros(data.shape) if init is None else np.array(init, dtype=float)
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        filled = np.where(mask, observed, z)
        z_new = svt(filled, shrink)
        resid = (observed - z_new)[mask]
        trace.append(0.5 * float(resid @ resid) + shrink * _nuclear(z_new))
        denom = np.linalg.norm(z)
        change = np.linalg.norm(z_new - z) / denom if denom > 0 else np.inf
        z = z_new
        if change < tol:
            converged = True
            break
    return BaselineResult(np.where(mask, observed, z), it, converged, np.array(trace))


def soft_impute_path(data: MaskedMatrix, n_shrinks=20, final_ratio=1e-3, max_iters=100, tol=1e-4) -> BaselineResult:
    """SoftImpute along a geometric shrink ladder with warm starts.

    The ladder runs from ``sigma_1(P_Omega(M))`` down to
    ``final_ratio * sigma_1``; the result is the solution at the last rung.
    """
    _require_observations(data)
    top = float(np.linalg.norm(data.observed_dense, 2))
    z = None
    total = 0
    trace = []
    res = None
    for shrink in np.geomspace(top, final_ratio * top, n_shrinks):
        res = soft_impute(data, shrink=shrink, max_iters=max_iters, tol=tol, init=z)
        z = res.estimate
        total += res.iterations
        trace.extend(res.objective_trace)
    return BaselineResult(res.estimate, total, res.converged, np.array(trace))


def nuclear_min(data: MaskedMatrix, max_iters=20000, tol=1e-6, final_ratio=1e-8, decay=0.5,
                rung_iters=1000, rung_tol=1e-6) -> BaselineResult:
    """Approximate ``min ||W||_*  s.t.  P_Omega(W) = P_Omega(M)``.

    Accelerated proximal gradient on ``0.5 ||P_Omega(W - M)||^2 + mu ||W||_*``
    with continuation: mu shrinks by ``decay`` from ``sigma_1(P_Omega(M))``
    down to ``final_ratio * sigma_1``, warm-starting each rung. A rung ends
    when the relative change of the iterate drops below ``rung_tol`` or after
    ``rung_iters`` steps. The returned matrix takes the observed values on
    Omega, so the data constraint holds exactly; ``converged`` means the
    last rung settled and the pre-projection residual on Omega, relative
    to the data scale, is below ``tol``.
    """
    _require_observations(data)
    mask = data.mask
    observed = data.observed_dense
    top = float(np.linalg.norm(observed, 2))
    scale = max(float(np.max(np.abs(data.values))), 1e-300)
    ladder = [top]
    while ladder[-1] * decay > final_ratio * top:
        ladder.append(ladder[-1] * decay)
    ladder.append(final_ratio * top)
    x = np.zeros(data.shape)
    trace = []
    it = 0
    settled = False
    for mu in ladder:
        y = x.copy()
        t = 1.0
        settled = False
        for _ in range(rung_iters):
            if it >= max_iters:
                break
            it += 1
            x_new = svt(y - np.where(mask, y - observed, 0.0), mu)
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-300)
            x, t = x_new, t_new
            if change < rung_tol:
                settled = True
                break
        trace.append(_nuclear(np.where(mask, observed, x)))
        if it >= max_iters:
            break
    residual = float(np.max(np.abs((x - observed)[mask]))) / scale
    converged = settled and mu == ladder[-1] and residual < tol
    return BaselineResult(np.where(mask, observed, x), it, converged, np.array(trace))


def baseline_snapshots(result: BaselineResult, data: MaskedMatrix, top_k=10):
    """Single-row trajectory (final estimate) for unified CSV reporting."""
    cfg = TrainConfig(top_k=top_k)
    loss = masked_loss(result.estimate, data)
    return [snapshot(result.estimate, data, result.iterations, loss, cfg)]
