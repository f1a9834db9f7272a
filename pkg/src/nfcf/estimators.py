"""Estimator-style wrappers so the models compose with the sklearn ecosystem.

``MFRecommender`` and ``NCFRecommender`` fit on an (n, 2) integer array of
positive (user, item) pairs, treat everything unobserved as implicit
negatives, and score pairs with ``predict``. ``EmbeddingDebiaser`` is a
transformer that learns the gender direction from labeled embedding rows and
projects it out. Constructor arguments are stored untouched; validation
happens in ``fit`` (so ``get_params``/``set_params``/``clone`` behave).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .datasets import InteractionDataset
from .errors import ContractError
from .evaluate import topk_recommend
from .fairness import bias_vector, debias
from .models import forward_fn, init_mf, init_ncf
from .training import (
    _S_DEV_EVAL,
    _S_PRETRAIN_EPOCHS,
    _S_PRETRAIN_INIT,
    TrainConfig,
    _epoch_instances,
    _train_loop,
    stage_seed,
)
from .validation import check_embeddings, check_genders, check_pairs


class _ImplicitRecommender(BaseEstimator):
    _kind = ""

    def _config(self) -> TrainConfig:
        raise NotImplementedError

    def _init_params(self, n_users: int, n_items: int, cfg: TrainConfig):
        raise NotImplementedError

    def fit(self, X, y=None, *, n_users=None, n_items=None, dev=None):
        """Train on positive pairs; ``dev`` pairs enable best-epoch selection.

        Vocabulary sizes default to one past the largest index seen across
        the training and dev pairs.
        """
        X = check_pairs(X)
        if dev is not None:
            dev = check_pairs(dev)
        seen = X if dev is None else np.vstack([X, dev])
        if seen.size == 0 and (n_users is None or n_items is None):
            raise ContractError("empty training data requires explicit n_users and n_items")
        n_users = int(n_users) if n_users is not None else int(seen[:, 0].max()) + 1
        n_items = int(n_items) if n_items is not None else int(seen[:, 1].max()) + 1
        check_pairs(seen, n_users, n_items)
        cfg = self._config()
        ds = InteractionDataset(
            [str(u) for u in range(n_users)],
            [str(i) for i in range(n_items)],
            np.zeros(n_items, dtype=bool),
            X,
        )
        params = self._init_params(n_users, n_items, cfg)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _S_PRETRAIN_EPOCHS]))
        params, history, _ = _train_loop(
            params,
            ds,
            cfg,
            epochs=cfg.pretrain_epochs,
            batch_size=cfg.pretrain_batch,
            rng=rng,
            stage="fit",
            instance_fn=lambda r: _epoch_instances(ds, ds.pairs_local(False), cfg.negatives, r, False),
            dev_pairs=dev if dev is not None and dev.size else None,
            dev_sensitive=False,
            monitor=("hr", cfg.pretrain_k[0]),
            dev_seed=stage_seed(cfg.seed, _S_DEV_EVAL),
            k_list=cfg.pretrain_k,
        )
        self.params_ = params
        self.history_ = history
        self.dataset_ = ds
        self.n_users_ = n_users
        self.n_items_ = n_items
        return self

    def predict(self, X) -> np.ndarray:
        """Interaction probabilities for (user, item) pairs."""
        self._check_fitted()
        X = check_pairs(X, self.n_users_, self.n_items_)
        return forward_fn(self.params_)(X[:, 0], X[:, 1])

    def recommend(self, user: int, k: int = 10) -> np.ndarray:
        """Top-k unseen items for one user, ties broken by the seeded rule."""
        self._check_fitted()
        return topk_recommend(
            forward_fn(self.params_), int(user), self.dataset_, k, sensitive=False, seed=self.seed
        )

    @property
    def user_embeddings_(self) -> np.ndarray:
        self._check_fitted()
        return self.params_.user_emb.data

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ContractError(f"{type(self).__name__} is not fitted yet")


class MFRecommender(_ImplicitRecommender):
    """Biased matrix factorization trained on implicit feedback."""

    _kind = "mf"

    def __init__(self, n_factors=128, lr=0.001, epochs=20, batch_size=2048, negatives=5,
                 seed=0, patience=5, eval_k=(10, 25), n_candidates=100, reduction="mean"):
        self.n_factors = n_factors
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.negatives = negatives
        self.seed = seed
        self.patience = patience
        self.eval_k = eval_k
        self.n_candidates = n_candidates
        self.reduction = reduction

    def _config(self) -> TrainConfig:
        return TrainConfig(
            variant="typical",
            model="mf",
            n_factors=self.n_factors,
            lr=self.lr,
            pretrain_epochs=self.epochs,
            pretrain_batch=self.batch_size,
            negatives=self.negatives,
            seed=self.seed,
            patience=self.patience,
            pretrain_k=tuple(self.eval_k),
            n_candidates=self.n_candidates,
            reduction=self.reduction,
        )

    def _init_params(self, n_users, n_items, cfg):
        return init_mf(n_users, n_items, cfg.n_factors, seed=[cfg.seed, _S_PRETRAIN_INIT])


class NCFRecommender(_ImplicitRecommender):
    """Tower-MLP collaborative filtering trained on implicit feedback."""

    _kind = "ncf"

    def __init__(self, n_factors=128, tower=(256, 64, 32, 16), lr=0.001, epochs=20,
                 batch_size=2048, negatives=5, seed=0, patience=5, eval_k=(10, 25),
                 n_candidates=100, reduction="mean"):
        self.n_factors = n_factors
        self.tower = tower
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.negatives = negatives
        self.seed = seed
        self.patience = patience
        self.eval_k = eval_k
        self.n_candidates = n_candidates
        self.reduction = reduction

    def _config(self) -> TrainConfig:
        return TrainConfig(
            variant="typical",
            model="ncf",
            n_factors=self.n_factors,
            tower=tuple(self.tower),
            lr=self.lr,
            pretrain_epochs=self.epochs,
            pretrain_batch=self.batch_size,
            negatives=self.negatives,
            seed=self.seed,
            patience=self.patience,
            pretrain_k=tuple(self.eval_k),
            n_candidates=self.n_candidates,
            reduction=self.reduction,
        )

    def _init_params(self, n_users, n_items, cfg):
        return init_ncf(n_users, n_items, cfg.n_factors, cfg.tower, seed=[cfg.seed, _S_PRETRAIN_INIT])


class EmbeddingDebiaser(BaseEstimator, TransformerMixin):
    """Removes the learned gender direction from embedding rows.

    fit(X, y): X is a (n, dim) embedding matrix, y holds per-row labels
    ('m' / 'f' / 'u'); rows labeled 'u' do not influence the direction.
    transform(X) projects each row orthogonally to the direction, and is
    idempotent.
    """

    def fit(self, X, y):
        X = check_embeddings(X)
        y = check_genders(y, X.shape[0])
        self.bias_direction_ = bias_vector(X, y)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "bias_direction_"):
            raise ContractError("EmbeddingDebiaser is not fitted yet")
        X = check_embeddings(X)
        return debias(X, self.bias_direction_)
