"""Full-batch training of a deep linear network on a masked matrix."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import (
    ConfigError,
    DegenerateSpectrumError,
    DivergedError,
    InvalidInputError,
    UnsupportedOperationError,
)
from .models import DeepLinearNet, end_product, layer_gradients
from .optimizers import OptimizerSpec, OptimizerState, step
from .penalties import PenaltySpec, penalty_gradient
from .spectral import effective_rank, svd


class MaskedMatrix:
    """Observed entries ``(rows[k], cols[k]) -> values[k]`` of an m x n matrix."""

    def __init__(self, shape, rows, cols, values, ground_truth=None):
        self.shape = (int(shape[0]), int(shape[1]))
        self.rows = np.asarray(rows, dtype=np.int64).ravel()
        self.cols = np.asarray(cols, dtype=np.int64).ravel()
        self.values = np.asarray(values, dtype=float).ravel()
        if not (self.rows.size == self.cols.size == self.values.size):
            raise InvalidInputError("rows, cols and values must have equal length")
        m, n = self.shape
        if self.rows.size:
            if self.rows.min() < 0 or self.rows.max() >= m or self.cols.min() < 0 or self.cols.max() >= n:
                raise InvalidInputError("observed index out of range")
            flat = self.rows * n + self.cols
            if np.unique(flat).size != flat.size:
                raise InvalidInputError("duplicate observed indices")
            if not np.all(np.isfinite(self.values)):
                raise InvalidInputError("observed values must be finite")
        if ground_truth is not None:
            ground_truth = np.asarray(ground_truth, dtype=float)
            if ground_truth.shape != self.shape:
                raise InvalidInputError(f"ground truth shape {ground_truth.shape} != {self.shape}")
        self.ground_truth = ground_truth
        self._mask = None
        self._dense = None

    @classmethod
    def from_dense(cls, matrix, mask=None, ground_truth=None):
        """Build from a dense array; NaN marks missing entries unless ``mask`` is given."""
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2:
            raise InvalidInputError("expected a 2-D array")
        mask = np.isfinite(a) if mask is None else np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        return cls(a.shape, rows, cols, a[rows, cols], ground_truth=ground_truth)

    @property
    def n_observed(self):
        return int(self.values.size)

    @property
    def mask(self):
        if self._mask is None:
            mask = np.zeros(self.shape, dtype=bool)
            mask[self.rows, self.cols] = True
            self._mask = mask
        return self._mask

    @property
    def observed_dense(self):
        """P_Omega of the data: observed values, zeros elsewhere."""
        if self._dense is None:
            dense = np.zeros(self.shape)
            dense[self.rows, self.cols] = self.values
            self._dense = dense
        return self._dense

    def to_nan_matrix(self):
        out = np.full(self.shape, np.nan)
        out[self.rows, self.cols] = self.values
        return out


def masked_loss(w, data: MaskedMatrix) -> float:
    """Sum of squared residuals over the observed entries (no penalty)."""
    w = np.asarray(w)
    if w.shape != data.shape:
        raise InvalidInputError(f"shape {w.shape} != data shape {data.shape}")
    if data.n_observed == 0:
        return 0.0
    r = w[data.rows, data.cols] - data.values
    return float(r @ r)


def masked_loss_gradient(w, data: MaskedMatrix):
    return 2.0 * (w - data.observed_dense) * data.mask


def test_error(w, data: MaskedMatrix) -> float:
    """Mean squared error against the ground truth over unobserved entries."""
    if data.ground_truth is None:
        raise UnsupportedOperationError("test error needs a ground truth matrix")
    unobserved = ~data.mask
    count = int(unobserved.sum())
    if count == 0:
        raise UnsupportedOperationError("every entry is observed; the test set is empty")
    diff = (np.asarray(w) - data.ground_truth)[unobserved]
    return float(diff @ diff) / count


@dataclass
class TrainConfig:
    """Stopping rules, logging cadence, penalty and optimizer for one run.

    ``loss_floor`` is compared against the full training objective
    (data loss plus ``lam * R``). ``plateau_tol`` enables an extra stop when
    the relative change of W over ``plateau_window`` iterations drops below
    it; None disables the check. The check is armed only once the data loss
    is at most ``plateau_arm`` times its initial value, so that a deep net
    resting on a saddle early in training is not mistaken for converged.
    """

    max_iters: int = 500_000
    loss_floor: float = 1e-7
    snapshot_every: int = 100
    seed: int = 0
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    top_k: int = 10
    divergence_threshold: float = 1e12
    plateau_tol: float | None = None
    plateau_window: int = 2000
    plateau_arm: float = 1e-3
    early_snapshots: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1", "max_iters")
        if not self.loss_floor > 0:
            raise ConfigError("loss_floor must be > 0", "loss_floor")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1", "snapshot_every")
        if self.plateau_tol is not None and self.plateau_window < 1:
            raise ConfigError("plateau_window must be >= 1", "plateau_window")
        if not 0 < self.plateau_arm <= 1:
            raise ConfigError("plateau_arm must lie in (0, 1]", "plateau_arm")


@dataclass
class TrajectorySnapshot:
    iter: int
    train_loss: float
    test_error: float
    effective_rank: float
    top_singular_values: np.ndarray
    objective: float = math.nan


class TrainResult(NamedTuple):
    net: DeepLinearNet
    snapshots: list
    stop_reason: str
    iterations: int


def _early_schedule(limit):
    out = set()
    decade = 1
    while decade <= limit:
        for k in (1, 2, 5):
            if k * decade <= limit:
                out.add(k * decade)
        decade *= 10
    return out


def snapshot(w, data, it, loss, cfg, objective=math.nan, dec=None):
    s = dec.sigma if dec is not None else np.linalg.svd(w, compute_uv=False)
    try:
        erank = effective_rank(s)
    except DegenerateSpectrumError:
        erank = math.nan
    try:
        terr = test_error(w, data)
    except UnsupportedOperationError:
        terr = math.nan
    return TrajectorySnapshot(
        iter=it,
        train_loss=loss,
        test_error=terr,
        effective_rank=erank,
        top_singular_values=np.array(s[: cfg.top_k]),
        objective=objective,
    )


def objective_gradient(w, data, penalty: PenaltySpec):
    """Data loss, penalty value, and gradient of the full objective at W.

    Returns ``(loss, penalty_value, grad, svd_or_None)``.
    """
    loss = masked_loss(w, data)
    grad = masked_loss_gradient(w, data)
    dec = None
    pval = 0.0
    if penalty.active:
        dec = svd(w)
        ev = penalty_gradient(penalty, dec)
        pval = ev.value
        grad = grad + penalty.lam * ev.gradient
    return loss, pval, grad, dec


def train(net: DeepLinearNet, data: MaskedMatrix, cfg: TrainConfig, state: OptimizerState | None = None,
          callback=None) -> TrainResult:
    """Run the full-batch loop until the loss floor, a plateau, or ``max_iters``.

    ``net`` is trained in place and also returned. Raises
    :class:`DivergedError` (carrying the last snapshot and the partial
    result) when the loss turns non-finite or exceeds the divergence
    threshold.
    """
    if net.shape != data.shape:
        raise InvalidInputError(f"network output {net.shape} != data shape {data.shape}")
    state = state if state is not None else OptimizerState()
    early = _early_schedule(cfg.max_iters) if cfg.early_snapshots else set()
    snaps = []
    has_bias = net.bias is not None
    plateau_ref = None
    loss0 = None
    stop_reason = "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        w = end_product(net)
        pred = net.predict_matrix() if has_bias else w
        loss = masked_loss(pred, data)
        loss0 = loss if loss0 is None else loss0
        data_grad = masked_loss_gradient(pred, data)
        grad = data_grad
        pval = 0.0
        dec = None
        if cfg.penalty.active:
            try:
                dec = svd(w)
                ev = penalty_gradient(cfg.penalty, dec)
            except DegenerateSpectrumError as exc:
                raise DivergedError(str(exc), step=it, snapshot=snaps[-1] if snaps else None) from exc
            pval = ev.value
            grad = data_grad + cfg.penalty.lam * ev.gradient
        objective = loss + cfg.penalty.lam * pval
        if not math.isfinite(objective) or objective > cfg.divergence_threshold:
            last = snaps[-1] if snaps else None
            err = DivergedError(f"objective {objective:.3e} at iteration {it}", step=it, snapshot=last)
            err.result = TrainResult(net, snaps, "diverged", it - 1)
            raise err
        # snapshot describes the iterate before this step's update
        if it == 1 or it % cfg.snapshot_every == 0 or it in early:
            snaps.append(snapshot(pred, data, it - 1, loss, cfg, objective, dec if not has_bias else None))
            if callback is not None:
                callback(snaps[-1])
        if objective < cfg.loss_floor:
            stop_reason = "loss_floor"
            it -= 1
            break
        grads = layer_gradients(net, grad)
        if has_bias:
            grads.append(data_grad if net.bias.ndim == 2 else data_grad.sum(axis=1))
        try:
            step(cfg.optimizer, state, net.params, grads)
        except DivergedError as exc:
            exc.snapshot = snaps[-1] if snaps else None
            exc.result = TrainResult(net, snaps, "diverged", it - 1)
            raise
        if cfg.plateau_tol is not None and it % cfg.plateau_window == 0:
            if loss > cfg.plateau_arm * loss0:
                plateau_ref = None
                continue
            current = end_product(net)
            if plateau_ref is not None:
                denom = max(np.linalg.norm(current), 1e-300)
                if np.linalg.norm(current - plateau_ref) / denom < cfg.plateau_tol:
                    stop_reason = "plateau"
                    break
            plateau_ref = current.copy()
    final_pred = net.predict_matrix()
    final_loss = masked_loss(final_pred, data)
    final_obj = final_loss
    if cfg.penalty.active:
        from .penalties import penalty_value

        final_obj += cfg.penalty.lam * penalty_value(cfg.penalty, end_product(net))
    if not math.isfinite(final_obj):
        err = DivergedError(f"objective {final_obj} after iteration {it}", step=it,
                            snapshot=snaps[-1] if snaps else None)
        err.result = TrainResult(net, snaps, "diverged", it)
        raise err
    if not snaps or snaps[-1].iter != it:
        if snaps and snaps[-1].iter > it:
            snaps.pop()
        snaps.append(snapshot(final_pred, data, it, final_loss, cfg, final_obj))
    return TrainResult(net, snaps, stop_reason, it)


def snapshots_to_csv(snapshots, path, top_k=None):
    """Write ``iter,train_loss,test_error,effective_rank,sv_1..sv_K``."""
    if top_k is None:
        top_k = max((len(s.top_singular_values) for s in snapshots), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "train_loss", "test_error", "effective_rank"] + [f"sv_{i + 1}" for i in range(top_k)])
        for s in snapshots:
            svs = list(s.top_singular_values[:top_k]) + [math.nan] * (top_k - len(s.top_singular_values))
            writer.writerow([s.iter, repr(s.train_loss), repr(s.test_error), repr(s.effective_rank)] + [repr(float(v)) for v in svs])


def snapshots_from_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        sv_cols = [c for c in reader.fieldnames if c.startswith("sv_")]
        for row in reader:
            out.append(
                TrajectorySnapshot(
                    iter=int(row["iter"]),
                    train_loss=float(row["train_loss"]),
                    test_error=float(row["test_error"]),
                    effective_rank=float(row["effective_rank"]),
                    top_singular_values=np.array([float(row[c]) for c in sv_cols]),
                )
            )
    return out
