"""scikit-learn style wrappers: fit on a matrix with NaN holes, transform fills them."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baselines import nuclear_min, soft_impute, soft_impute_path
from .models import EmbeddingModel, embedding_loss_and_grads, init_gaussian, predict_ratings
from .optimizers import OptimizerSpec, OptimizerState, step
from .penalties import parse_penalty, penalty_gradient
from .training import MaskedMatrix, TrainConfig, train
from .validation import check_nan_matrix, check_pairs, check_ratings, check_same_shape


class _CompleterMixin(TransformerMixin):
    def transform(self, X):
        """Return ``X`` with its NaN entries replaced by the fitted estimate."""
        check_is_fitted(self, "completed_")
        a = check_nan_matrix(X, allow_empty=True)
        check_same_shape(self.completed_, a)
        return np.where(np.isnan(a), self.completed_, a)

    def predict(self, X=None):
        """The full fitted matrix (observed entries included)."""
        check_is_fitted(self, "completed_")
        return self.completed_.copy()


class DeepLinearCompleter(_CompleterMixin, BaseEstimator):
    """Deep linear network ``W_N ... W_1`` fitted to the observed entries.

    ``width`` sets the hidden dimensions (defaults to the column count).
    ``penalty`` takes the string form accepted by :func:`parse_penalty`.
    """

    def __init__(self, depth=1, width=None, optimizer="adam", lr=1e-3, penalty="ratio", lam=0.05,
                 init_std=1e-3, max_iters=500_000, loss_floor=1e-7, plateau_tol=None, plateau_window=2000,
                 plateau_arm=1e-3, snapshot_every=100, top_k=10, seed=0):
        self.depth = depth
        self.width = width
        self.optimizer = optimizer
        self.lr = lr
        self.penalty = penalty
        self.lam = lam
        self.init_std = init_std
        self.max_iters = max_iters
        self.loss_floor = loss_floor
        self.plateau_tol = plateau_tol
        self.plateau_window = plateau_window
        self.plateau_arm = plateau_arm
        self.snapshot_every = snapshot_every
        self.top_k = top_k
        self.seed = seed

    def _config(self):
        return TrainConfig(
            max_iters=self.max_iters,
            loss_floor=self.loss_floor,
            snapshot_every=self.snapshot_every,
            seed=self.seed,
            penalty=parse_penalty(self.penalty, self.lam),
            optimizer=OptimizerSpec(self.optimizer, lr=self.lr),
            top_k=self.top_k,
            plateau_tol=self.plateau_tol,
            plateau_window=self.plateau_window,
            plateau_arm=self.plateau_arm,
        )

    def fit(self, X, y=None, ground_truth=None):
        a = check_nan_matrix(X)
        cfg = self._config()
        data = MaskedMatrix.from_dense(a, ground_truth=ground_truth)
        m, n = a.shape
        width = n if self.width is None else int(self.width)
        dims = [n] + [width] * (self.depth - 1) + [m]
        net = init_gaussian(dims, self.init_std, self.seed)
        result = train(net, data, cfg)
        self.net_ = result.net
        self.snapshots_ = result.snapshots
        self.stop_reason_ = result.stop_reason
        self.n_iter_ = result.iterations
        self.completed_ = result.net.predict_matrix()
        return self


class SoftImputeCompleter(_CompleterMixin, BaseEstimator):
    """SoftImpute; ``ladder=True`` walks a warm-started geometric shrink ladder."""

    def __init__(self, shrink=None, max_iters=100, tol=1e-3, ladder=False, n_shrinks=20, final_ratio=1e-3):
        self.shrink = shrink
        self.max_iters = max_iters
        self.tol = tol
        self.ladder = ladder
        self.n_shrinks = n_shrinks
        self.final_ratio = final_ratio

    def fit(self, X, y=None):
        data = MaskedMatrix.from_dense(check_nan_matrix(X))
        if self.ladder:
            res = soft_impute_path(data, self.n_shrinks, self.final_ratio, self.max_iters, self.tol)
        else:
            res = soft_impute(data, self.shrink, self.max_iters, self.tol)
        self.result_ = res
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        self.completed_ = res.estimate
        return self


class NuclearNormCompleter(_CompleterMixin, BaseEstimator):
    """Minimum nuclear norm interpolant of the observed entries."""

    def __init__(self, max_iters=20000, tol=1e-6):
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y=None):
        data = MaskedMatrix.from_dense(check_nan_matrix(X))
        res = nuclear_min(data, self.max_iters, self.tol)
        self.result_ = res
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        self.completed_ = res.estimate
        return self


class EmbeddingRecommender(RegressorMixin, BaseEstimator):
    """Biased dot-product model trained with mini-batch updates on rating triples.

    ``X`` holds (user, item) index pairs and ``y`` the ratings. The batch
    loss is the mean squared error plus ``lam_user * R(user_embed)`` and
    ``lam_item * R(item_embed)``. Training stops early once the epoch
    training error has risen for ``patience`` consecutive epochs, keeping
    the best epoch's parameters.
    """

    def __init__(self, n_factors=64, optimizer="adam", lr=1e-3, batch_size=256, n_epochs=100, penalty="ratio",
                 lam_user=0.01, lam_item=0.0, init_std=0.1, patience=3, seed=0, n_users=None, n_items=None):
        self.n_factors = n_factors
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.penalty = penalty
        self.lam_user = lam_user
        self.lam_item = lam_item
        self.init_std = init_std
        self.patience = patience
        self.seed = seed
        self.n_users = n_users
        self.n_items = n_items

    def fit(self, X, y):
        pairs = check_pairs(X)
        ratings = check_ratings(y, len(pairs))
        n_users = self.n_users or int(pairs[:, 0].max()) + 1
        n_items = self.n_items or int(pairs[:, 1].max()) + 1
        pen = parse_penalty(self.penalty, 1.0)
        rng = np.random.default_rng(self.seed)
        model = EmbeddingModel.init(n_users, n_items, self.n_factors, self.init_std, self.seed)
        spec = OptimizerSpec(self.optimizer, lr=self.lr)
        state = OptimizerState()
        best = None
        best_err = np.inf
        prev = np.inf
        rising = 0
        history = []
        for _ in range(self.n_epochs):
            order = rng.permutation(len(pairs))
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                _, grads = embedding_loss_and_grads(model, pairs[idx, 0], pairs[idx, 1], ratings[idx])
                grads = [g / idx.size for g in grads]
                for slot, lam in ((0, self.lam_user), (1, self.lam_item)):
                    if pen.kind != "none" and lam > 0:
                        grads[slot] = grads[slot] + lam * penalty_gradient(pen, model.params[slot]).gradient
                step(spec, state, model.params, grads)
            err = float(np.mean((predict_ratings(model, pairs[:, 0], pairs[:, 1]) - ratings) ** 2))
            history.append(err)
            if err < best_err:
                best_err = err
                best = [p.copy() for p in model.params]
            rising = rising + 1 if err > prev else 0
            prev = err
            if rising >= self.patience:
                break
        model = EmbeddingModel(*best[:4], global_bias=float(best[4]))
        self.model_ = model
        self.train_mse_ = history
        self.n_iter_ = len(history)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        pairs = check_pairs(X, self.model_.n_users, self.model_.n_items)
        return predict_ratings(self.model_, pairs[:, 0], pairs[:, 1])


__all__ = ["DeepLinearCompleter", "SoftImputeCompleter", "NuclearNormCompleter", "EmbeddingRecommender"]
