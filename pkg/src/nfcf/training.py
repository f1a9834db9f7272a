"""Training loops: pre-training, fair fine-tuning, and baseline variants.

All variants minimize the implicit-feedback negative log-likelihood over the
positive pairs plus freshly sampled negatives (k per positive, new draws each
epoch). The fair fine-tuning objective adds a hinge penalty on the epsilon
mean estimated from each batch's positive predictions, weighted by
``lam``. Every run draws all of its randomness from per-stage generators
derived from the one configured seed, so identical configs reproduce
identical artifacts bit for bit.

Variant dispatch covers the full comparison suite: the fair pipeline with and
without each of its components, plain and pre-trained MF/NCF, gender-balanced
resampling, the Huber-smoothed absolute-unfairness MF, logistic regression on
debiased user vectors, and a feature-based deep classifier.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._version import __version__ as _pkg_version
from .autodiff import Tape, Tensor
from .datasets import (
    FEMALE,
    MALE,
    InteractionDataset,
    Split,
    UserCatalog,
)
from .errors import ConfigError, ContractError, TrainingDiverged
from .evaluate import RankedEvalResult, ranked_eval
from .fairness import (
    FairnessReport,
    bias_vector,
    debias,
    df_penalty,
    fairness_report,
    huber_uabs_penalty,
)
from .models import (
    MFParams,
    NCFParams,
    forward_fn,
    init_mf,
    init_ncf,
    mf_forward,
    ncf_forward,
    transfer_for_finetune,
    transfer_mf_for_finetune,
)
from .optim import Adam

VARIANTS = (
    "NFCF",
    "NFCF_embd",
    "typical",
    "resampling",
    "mf_uabs",
    "projection_cf",
    "dnn_classifier",
)

# fixed stage tags for seed derivation
_S_PRETRAIN_INIT = 0
_S_PRETRAIN_EPOCHS = 1
_S_TRANSFER = 2
_S_FINETUNE_EPOCHS = 3
_S_DEV_EVAL = 4
_S_TEST_EVAL = 5
_S_RESAMPLE = 6
_S_CLASSIFIER = 7


def stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def _stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage]))


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; serializes to/from JSON for the CLI."""

    variant: str = "NFCF"
    model: str = "ncf"
    use_pretrain: bool = True
    use_debias: bool = True
    n_factors: int = 128
    tower: tuple[int, ...] = (256, 64, 32, 16)
    lr: float = 0.001
    pretrain_epochs: int = 20
    finetune_epochs: int = 50
    pretrain_batch: int = 2048
    finetune_batch: int = 256
    negatives: int = 5
    lam: float = 0.1
    eps0: float = 0.0
    alpha: float = 1.0
    huber_delta: float = 1.0
    seed: int = 0
    patience: int = 5
    reduction: str = "mean"
    transfer_output: bool = True
    pretrain_k: tuple[int, ...] = (10, 25)
    finetune_k: tuple[int, ...] = (5, 7)
    n_candidates: int = 100
    # combined-vocabulary (from-scratch) training is a big-data stage; it
    # defaults to the pre-training batch size and epoch budget
    combined_batch: int | None = None
    combined_epochs: int | None = None

    def __post_init__(self):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.model not in ("ncf", "mf"):
            problems.append(f"model must be 'ncf' or 'mf', got {self.model!r}")
        if self.variant == "mf_uabs" and self.model != "mf":
            problems.append("variant mf_uabs requires model='mf'")
        if self.lam < 0:
            problems.append(f"lam must be >= 0, got {self.lam}")
        if self.negatives < 1:
            problems.append(f"negatives must be >= 1, got {self.negatives}")
        if self.pretrain_batch < 1 or self.finetune_batch < 1:
            problems.append("batch sizes must be >= 1")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            problems.append("epoch counts must be >= 0")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if self.reduction not in ("mean", "sum"):
            problems.append(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.combined_batch is not None and self.combined_batch < 1:
            problems.append("combined_batch must be >= 1")
        if self.combined_epochs is not None and self.combined_epochs < 0:
            problems.append("combined_epochs must be >= 0")
        if self.alpha <= 0:
            problems.append(f"alpha must be > 0, got {self.alpha}")
        if self.huber_delta <= 0:
            problems.append(f"huber_delta must be > 0, got {self.huber_delta}")
        if problems:
            raise ConfigError("; ".join(problems))
        object.__setattr__(self, "tower", tuple(self.tower))
        object.__setattr__(self, "pretrain_k", tuple(self.pretrain_k))
        object.__setattr__(self, "finetune_k", tuple(self.finetune_k))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tower"] = list(self.tower)
        d["pretrain_k"] = list(self.pretrain_k)
        d["finetune_k"] = list(self.finetune_k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# loss

def bce_loss(y_hat: Tensor, y, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of Bernoulli targets under predicted probabilities.

    Predictions are clamped to [1e-12, 1 - 1e-12] before the logs; use
    :func:`bce_clamp_count` to see how often the clamp engaged.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.data.shape:
        raise ContractError(f"targets shape {y.shape} != predictions shape {y_hat.data.shape}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    p = ad.clip(y_hat, 1e-12, 1.0 - 1e-12)
    per = ad.mul(
        ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y)),
        -1.0,
    )
    return ad.mean_(per) if reduction == "mean" else ad.sum_(per)


def bce_clamp_count(y_hat: Tensor) -> int:
    p = y_hat.data
    return int(((p <= 1e-12) | (p >= 1.0 - 1e-12)).sum())


# ---------------------------------------------------------------------------
# epoch construction

def _draw_negatives(ds: InteractionDataset, rep_users: np.ndarray, rng, sensitive: bool) -> np.ndarray:
    """One uniform non-interacted item per row of ``rep_users``."""
    pool = ds.n_items(sensitive)
    out = rng.integers(0, pool, size=rep_users.size)
    mask = ds.positives_mask(sensitive)
    if mask is not None:
        idx = np.arange(out.size)
        rounds = 0
        while idx.size:
            bad = mask[rep_users[idx], out[idx]]
            idx = idx[bad]
            if idx.size == 0:
                break
            out[idx] = rng.integers(0, pool, size=idx.size)
            rounds += 1
            if rounds > 1000:
                raise ContractError("negative sampling cannot avoid positives; a user interacted with everything")
    else:
        positives = ds.positives(sensitive)
        for row in range(out.size):
            u = int(rep_users[row])
            while int(out[row]) in positives[u]:
                out[row] = rng.integers(0, pool)
    return out


def _epoch_instances(ds, train_pairs: np.ndarray, k: int, rng, sensitive: bool):
    """Positives plus k fresh negatives per positive, shuffled together."""
    pos = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    rep_users = np.repeat(pos[:, 0], k)
    negs = _draw_negatives(ds, rep_users, rng, sensitive)
    users = np.concatenate([pos[:, 0], rep_users])
    items = np.concatenate([pos[:, 1], negs])
    labels = np.concatenate([np.ones(pos.shape[0]), np.zeros(rep_users.size)])
    perm = rng.permutation(users.size)
    return users[perm], items[perm], labels[perm]


def _combined_epoch_instances(ds, train_pairs_global: np.ndarray, k: int, rng):
    """Like :func:`_epoch_instances` but over the combined item vocabulary.

    Negatives are drawn within the positive's own item class and mapped back
    to global indices.
    """
    pairs = np.asarray(train_pairs_global, dtype=np.int64).reshape(-1, 2)
    users_parts, items_parts, labels_parts = [], [], []
    for sensitive in (False, True):
        sel = ds.item_sensitive[pairs[:, 1]] == sensitive
        if not sel.any():
            continue
        sub = pairs[sel]
        local = sub.copy()
        local[:, 1] = ds.to_local(sub[:, 1], sensitive)
        rep_users = np.repeat(local[:, 0], k)
        negs_local = _draw_negatives(ds, rep_users, rng, sensitive)
        to_global = ds.class_item_globals(sensitive)
        users_parts += [local[:, 0], rep_users]
        items_parts += [sub[:, 1], to_global[negs_local]]
        labels_parts += [np.ones(sub.shape[0]), np.zeros(rep_users.size)]
    users = np.concatenate(users_parts)
    items = np.concatenate(items_parts)
    labels = np.concatenate(labels_parts)
    perm = rng.permutation(users.size)
    return users[perm], items[perm], labels[perm]


# ---------------------------------------------------------------------------
# the shared loop

def _forward_for(params):
    if isinstance(params, NCFParams):
        return ncf_forward
    if isinstance(params, MFParams):
        return mf_forward
    raise ConfigError(f"unsupported params type {type(params).__name__}")


def _train_loop(
    params,
    ds,
    cfg: TrainConfig,
    *,
    epochs: int,
    batch_size: int,
    rng,
    stage: str,
    instance_fn,
    penalty_fn=None,
    dev_pairs=None,
    dev_sensitive: bool = False,
    monitor: tuple[str, int] | None = None,
    dev_seed: int = 0,
    k_list=(10,),
    history: list | None = None,
    dev_fairness=None,
):
    """Adam-minimize the (optionally penalized) objective; early-stop on dev.

    Returns the best-on-dev parameter snapshot (final parameters when there
    is no dev set) and appends one history row per epoch.
    """
    forward = _forward_for(params)
    trainable = params.trainable()
    opt = Adam(lr=cfg.lr)
    history = history if history is not None else []
    clamp_events = 0
    best_metric, best_params, since_best = -np.inf, None, 0
    for epoch in range(1, epochs + 1):
        users, items, labels = instance_fn(rng)
        loss_terms: list[float] = []
        for lo in range(0, users.size, batch_size):
            hi = min(lo + batch_size, users.size)
            bu, bi, by = users[lo:hi], items[lo:hi], labels[lo:hi]
            with Tape() as tape:
                y_hat = forward(params, bu, bi)
                clamp_events += bce_clamp_count(y_hat)
                loss = bce_loss(y_hat, by, cfg.reduction)
                if penalty_fn is not None:
                    loss = ad.add(loss, penalty_fn(y_hat, bu, bi, by))
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"{stage}: non-finite loss {loss_value} at epoch {epoch}, batch {lo // batch_size}"
                    )
                grads = tape.backward(loss, trainable)
            opt.step(trainable, grads)
            loss_terms.append(loss_value)
        for t in trainable:
            if not np.isfinite(t.data).all():
                raise TrainingDiverged(f"{stage}: non-finite parameter {t.name} after epoch {epoch}")
        row = {"stage": stage, "epoch": epoch, "loss": float(np.mean(loss_terms)) if loss_terms else 0.0}
        if dev_pairs is not None and dev_pairs.size:
            result = ranked_eval(
                forward_fn(params),
                dev_pairs,
                ds,
                k_list=k_list,
                n_candidates=cfg.n_candidates,
                seed=dev_seed,
                sensitive=dev_sensitive,
            )
            for k in k_list:
                row[f"hr@{k}"] = result.hr[k]
                row[f"ndcg@{k}"] = result.ndcg[k]
            if dev_fairness is not None:
                e_mean, u = dev_fairness(params)
                row["epsilon_mean"] = e_mean
                row["u_abs"] = u
            metric = result.hr[monitor[1]] if monitor[0] == "hr" else result.ndcg[monitor[1]]
            if metric > best_metric:
                best_metric, best_params, since_best = metric, params.copy(), 0
            else:
                since_best += 1
            history.append(row)
            if since_best >= cfg.patience:
                break
        else:
            history.append(row)
    final = best_params if best_params is not None else params
    return final, history, clamp_events


# ---------------------------------------------------------------------------
# stages

def pretrain(ds: InteractionDataset, split_: Split, cfg: TrainConfig):
    """Train the chosen model on the non-sensitive training pairs.

    Monitors dev HR at the first configured cutoff and returns the best-dev
    checkpoint (the initialized parameters when ``pretrain_epochs`` is 0).
    """
    train_pairs = split_.pairs(ds, "train", False)
    if cfg.pretrain_epochs > 0 and train_pairs.size == 0:
        raise ContractError("non-sensitive training split is empty")
    n_items = ds.n_items(False)
    if cfg.model == "ncf":
        params = init_ncf(ds.n_users, n_items, cfg.n_factors, cfg.tower, seed=[cfg.seed, _S_PRETRAIN_INIT])
    else:
        params = init_mf(ds.n_users, n_items, cfg.n_factors, seed=[cfg.seed, _S_PRETRAIN_INIT])
    rng = _stage_rng(cfg.seed, _S_PRETRAIN_EPOCHS)
    dev_pairs = split_.pairs(ds, "dev", False)
    params, history, clamps = _train_loop(
        params,
        ds,
        cfg,
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.pretrain_batch,
        rng=rng,
        stage="pretrain",
        instance_fn=lambda r: _epoch_instances(ds, train_pairs, cfg.negatives, r, False),
        dev_pairs=dev_pairs if dev_pairs.size else None,
        dev_sensitive=False,
        monitor=("hr", cfg.pretrain_k[0]),
        dev_seed=stage_seed(cfg.seed, _S_DEV_EVAL),
        k_list=cfg.pretrain_k,
    )
    return params, history, clamps


def _df_penalty_fn(cfg: TrainConfig, catalog: UserCatalog, item_classes=None):
    """Batch hook adding lam * hinge(epsilon_mean) over the positive entries.

    ``item_classes`` maps global item index -> sensitive flag for combined
    vocabularies; None means every item in the batch is sensitive.
    """

    def hook(y_hat, users, items, labels):
        sel = labels == 1.0
        if item_classes is not None:
            sel = sel & item_classes[items]
        pos_idx = np.flatnonzero(sel)
        if pos_idx.size == 0:
            return Tensor(0.0)
        scores = ad.gather_rows(y_hat, pos_idx)
        penalty = df_penalty(
            scores,
            catalog.labels_for(users[pos_idx]),
            items[pos_idx],
            alpha=cfg.alpha,
            eps0=cfg.eps0,
        )
        return ad.mul(penalty, cfg.lam)

    return hook


def _huber_penalty_fn(cfg: TrainConfig, catalog: UserCatalog, item_classes):
    """Batch hook adding lam * Huber-smoothed absolute unfairness."""

    def hook(y_hat, users, items, labels):
        sel = item_classes[items]
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            return Tensor(0.0)
        scores = ad.gather_rows(y_hat, idx)
        penalty = huber_uabs_penalty(
            scores,
            labels[idx],
            catalog.labels_for(users[idx]),
            items[idx],
            delta=cfg.huber_delta,
        )
        return ad.mul(penalty, cfg.lam)

    return hook


def _dev_fairness_fn(ds, catalog, split_, cfg, local_to_score_fn):
    dev_pairs = split_.pairs(ds, "dev", True)
    if dev_pairs.size == 0:
        return None
    users = np.unique(dev_pairs[:, 0])
    labels = catalog.labels_for(users)
    if not ((labels == MALE).any() and (labels == FEMALE).any()):
        return None

    def compute(params):
        rep = _sensitive_fairness(local_to_score_fn(params), dev_pairs, ds, catalog, cfg.alpha)
        return rep.epsilon_mean, rep.u_abs

    return compute


def _run_sensitive_stage(params, ds, catalog, split_, cfg, penalized: bool, stage: str):
    train_pairs = split_.pairs(ds, "train", True)
    if cfg.finetune_epochs > 0 and train_pairs.size == 0:
        raise ContractError("sensitive training split is empty")
    rng = _stage_rng(cfg.seed, _S_FINETUNE_EPOCHS)
    penalty_fn = _df_penalty_fn(cfg, catalog) if penalized and cfg.lam > 0 else None
    dev_pairs = split_.pairs(ds, "dev", True)
    return _train_loop(
        params,
        ds,
        cfg,
        epochs=cfg.finetune_epochs,
        batch_size=cfg.finetune_batch,
        rng=rng,
        stage=stage,
        instance_fn=lambda r: _epoch_instances(ds, train_pairs, cfg.negatives, r, True),
        penalty_fn=penalty_fn,
        dev_pairs=dev_pairs if dev_pairs.size else None,
        dev_sensitive=True,
        monitor=("ndcg", cfg.finetune_k[0]),
        dev_seed=stage_seed(cfg.seed, _S_DEV_EVAL),
        k_list=cfg.finetune_k,
        dev_fairness=_dev_fairness_fn(ds, catalog, split_, cfg, forward_fn),
    )


def finetune_nfcf(
    pretrained,
    ds: InteractionDataset,
    catalog: UserCatalog,
    split_: Split,
    cfg: TrainConfig,
    user_table: np.ndarray | None = None,
    penalized: bool = True,
):
    """Transfer a pre-trained model to the sensitive vocabulary and fine-tune.

    ``user_table`` is the (debiased) user embedding matrix to freeze; the
    pre-trained table is used as-is when omitted. The fairness penalty is
    active when ``penalized`` and ``cfg.lam > 0``.
    """
    if user_table is None:
        user_table = pretrained.user_emb.data
    n_s = ds.n_items(True)
    if isinstance(pretrained, NCFParams):
        params = transfer_for_finetune(
            pretrained, user_table, n_s, seed=[cfg.seed, _S_TRANSFER], transfer_output=cfg.transfer_output
        )
    else:
        params = transfer_mf_for_finetune(pretrained, user_table, n_s, seed=[cfg.seed, _S_TRANSFER])
    return _run_sensitive_stage(params, ds, catalog, split_, cfg, penalized, "finetune")


def _train_sensitive_scratch(ds, catalog, split_, cfg, penalized: bool = True):
    """The fine-tuning stage run from a random start: no transfer, no freeze.

    This is the "no pre-training" configuration of the fair pipeline; with
    nothing to protect, the user embeddings train along with everything else.
    """
    n_s = ds.n_items(True)
    if cfg.model == "ncf":
        params = init_ncf(ds.n_users, n_s, cfg.n_factors, cfg.tower, seed=[cfg.seed, _S_PRETRAIN_INIT])
    else:
        params = init_mf(ds.n_users, n_s, cfg.n_factors, seed=[cfg.seed, _S_PRETRAIN_INIT])
    return _run_sensitive_stage(params, ds, catalog, split_, cfg, penalized, "scratch")


def _train_combined(
    ds: InteractionDataset,
    catalog: UserCatalog,
    split_: Split,
    cfg: TrainConfig,
    train_pairs_global: np.ndarray,
    penalty: str | None = None,
):
    """Scratch training over the combined vocabulary (both item classes)."""
    n_items = ds.n_items(None)
    if cfg.model == "ncf":
        params = init_ncf(ds.n_users, n_items, cfg.n_factors, cfg.tower, seed=[cfg.seed, _S_PRETRAIN_INIT])
    else:
        params = init_mf(ds.n_users, n_items, cfg.n_factors, seed=[cfg.seed, _S_PRETRAIN_INIT])
    item_classes = ds.item_sensitive.copy()
    if penalty == "df":
        penalty_fn = _df_penalty_fn(cfg, catalog, item_classes) if cfg.lam > 0 else None
    elif penalty == "huber":
        penalty_fn = _huber_penalty_fn(cfg, catalog, item_classes) if cfg.lam > 0 else None
    elif penalty is None:
        penalty_fn = None
    else:
        raise ConfigError(f"unknown penalty {penalty!r}")
    to_global = ds.class_item_globals(True)

    def local_score_fn(params_):
        fwd = forward_fn(params_)
        return lambda u, i_local: fwd(u, to_global[np.asarray(i_local, dtype=np.int64)])

    rng = _stage_rng(cfg.seed, _S_FINETUNE_EPOCHS)
    dev_pairs = split_.pairs(ds, "dev", True)
    params, history, clamps = _train_loop(
        params,
        ds,
        cfg,
        epochs=cfg.combined_epochs if cfg.combined_epochs is not None else cfg.pretrain_epochs,
        batch_size=cfg.combined_batch if cfg.combined_batch is not None else cfg.pretrain_batch,
        rng=rng,
        stage="combined",
        instance_fn=lambda r: _combined_epoch_instances(ds, train_pairs_global, cfg.negatives, r),
        penalty_fn=penalty_fn,
        dev_pairs=dev_pairs if dev_pairs.size else None,
        dev_sensitive=True,
        monitor=("ndcg", cfg.finetune_k[0]),
        dev_seed=stage_seed(cfg.seed, _S_DEV_EVAL),
        k_list=cfg.finetune_k,
        dev_fairness=_dev_fairness_fn(ds, catalog, split_, cfg, local_score_fn),
    )
    return params, history, clamps, local_score_fn(params)


# ---------------------------------------------------------------------------
# feature-based baselines

@dataclass
class ClassifierParams:
    """Tower MLP over binary interaction features with a softmax head."""

    weights: list[Tensor]
    biases: list[Tensor]

    def named_tensors(self):
        out = []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"weight_{l}", w))
            out.append((f"bias_{l}", b))
        return out

    def trainable(self):
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def copy(self):
        return ClassifierParams(
            [Tensor(w.data.copy(), requires_grad=True, name=w.name) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True, name=b.name) for b in self.biases],
        )


def _init_classifier(n_features: int, hidden: tuple[int, ...], n_classes: int, seed) -> ClassifierParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dims = (n_features,) + tuple(hidden) + (n_classes,)
    weights, biases = [], []
    for l, (fi, fo) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fi + fo))
        weights.append(Tensor(rng.uniform(-limit, limit, size=(fi, fo)), requires_grad=True, name=f"weight_{l}"))
        biases.append(Tensor(np.zeros(fo), requires_grad=True, name=f"bias_{l}"))
    return ClassifierParams(weights, biases)


def _classifier_logits(params: ClassifierParams, features: np.ndarray) -> Tensor:
    z = Tensor(features)
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = ad.affine(z, w, b)
        if l != last:
            z = ad.relu(z)
    return z


def _feature_rows(positive_sets, users: np.ndarray, n_features: int) -> np.ndarray:
    X = np.zeros((users.size, n_features))
    for row, u in enumerate(users):
        pos = positive_sets[int(u)]
        if pos:
            X[row, np.fromiter(pos, dtype=np.int64)] = 1.0
    return X


def _train_dnn_classifier(ds, catalog, split_, cfg):
    """Softmax tower on binary non-sensitive interaction features."""
    train_s = split_.pairs(ds, "train", True)
    if train_s.size == 0:
        raise ContractError("sensitive training split is empty")
    n_features = ds.n_items(False)
    n_classes = ds.n_items(True)
    # features come from the non-sensitive training interactions only
    train_n = split_.pairs(ds, "train", False)
    feature_sets: list[set[int]] = [set() for _ in range(ds.n_users)]
    for u, i in train_n:
        feature_sets[u].add(int(i))
    params = _init_classifier(n_features, cfg.tower, n_classes, seed=[cfg.seed, _S_CLASSIFIER])
    rng = _stage_rng(cfg.seed, _S_FINETUNE_EPOCHS)
    dev_pairs = split_.pairs(ds, "dev", True)

    def score_fn_for(params_):
        cache: dict[int, np.ndarray] = {}

        def score(users, items):
            users = np.asarray(users, dtype=np.int64)
            items = np.asarray(items, dtype=np.int64)
            missing = [u for u in np.unique(users) if int(u) not in cache]
            if missing:
                X = _feature_rows(feature_sets, np.asarray(missing, dtype=np.int64), n_features)
                logits = _classifier_logits(params_, X).data
                logits -= logits.max(axis=1, keepdims=True)
                probs = np.exp(logits)
                probs /= probs.sum(axis=1, keepdims=True)
                for row, u in enumerate(missing):
                    cache[int(u)] = probs[row]
            return np.array([cache[int(u)][int(i)] for u, i in zip(users, items)])

        return score

    opt = Adam(lr=cfg.lr)
    trainable = params.trainable()
    history: list[dict] = []
    best_metric, best_params, since_best = -np.inf, None, 0
    users_all = train_s[:, 0]
    labels_all = train_s[:, 1]
    for epoch in range(1, cfg.finetune_epochs + 1):
        perm = rng.permutation(users_all.size)
        losses = []
        for lo in range(0, users_all.size, cfg.finetune_batch):
            sel = perm[lo : lo + cfg.finetune_batch]
            X = _feature_rows(feature_sets, users_all[sel], n_features)
            onehot = np.zeros((sel.size, n_classes))
            onehot[np.arange(sel.size), labels_all[sel]] = 1.0
            with Tape() as tape:
                logits = _classifier_logits(params, X)
                ls = ad.log_softmax(logits, axis=1)
                loss = ad.mul(ad.sum_(ad.mul(ls, onehot)), -1.0 / sel.size)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(f"dnn_classifier: non-finite loss at epoch {epoch}")
                grads = tape.backward(loss, trainable)
            opt.step(trainable, grads)
            losses.append(value)
        row = {"stage": "dnn_classifier", "epoch": epoch, "loss": float(np.mean(losses))}
        if dev_pairs.size:
            result = ranked_eval(
                score_fn_for(params),
                dev_pairs,
                ds,
                k_list=cfg.finetune_k,
                n_candidates=cfg.n_candidates,
                seed=stage_seed(cfg.seed, _S_DEV_EVAL),
                sensitive=True,
            )
            for k in cfg.finetune_k:
                row[f"hr@{k}"] = result.hr[k]
                row[f"ndcg@{k}"] = result.ndcg[k]
            metric = result.ndcg[cfg.finetune_k[0]]
            if metric > best_metric:
                best_metric, best_params, since_best = metric, params.copy(), 0
            else:
                since_best += 1
            history.append(row)
            if since_best >= cfg.patience:
                break
        else:
            history.append(row)
    final = best_params if best_params is not None else params
    return final, history, score_fn_for(final)


def _train_projection_cf(ds, catalog, split_, cfg):
    """Pre-train, debias the user vectors, then multinomial logistic regression."""
    from sklearn.linear_model import LogisticRegression

    pre, history, clamps = pretrain(ds, split_, cfg)
    direction = bias_vector(pre.user_emb.data, catalog)
    table = debias(pre.user_emb.data, direction)
    train_s = split_.pairs(ds, "train", True)
    if train_s.size == 0:
        raise ContractError("sensitive training split is empty")
    clf = LogisticRegression(max_iter=1000)
    clf.fit(table[train_s[:, 0]], train_s[:, 1])
    n_classes = ds.n_items(True)
    class_pos = {int(c): k for k, c in enumerate(clf.classes_)}

    def score(users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        probs = clf.predict_proba(table[users])
        out = np.zeros(users.size)
        for row, i in enumerate(items):
            k = class_pos.get(int(i))
            out[row] = probs[row, k] if k is not None else 0.0
        return out

    return history, clamps, score, direction


# ---------------------------------------------------------------------------
# evaluation plumbing shared by the variants

def _sensitive_fairness(score_fn, eval_pairs, ds, catalog, alpha) -> FairnessReport:
    """Fairness report over the users holding pairs in ``eval_pairs``."""
    users = np.unique(np.asarray(eval_pairs, dtype=np.int64).reshape(-1, 2)[:, 0])
    n_s = ds.n_items(True)
    grid_u = np.repeat(users, n_s)
    grid_i = np.tile(np.arange(n_s, dtype=np.int64), users.size)
    scores = np.asarray(score_fn(grid_u, grid_i), dtype=np.float64).reshape(users.size, n_s)
    observed = np.zeros((users.size, n_s))
    row_of = {int(u): r for r, u in enumerate(users)}
    for u, i in np.asarray(eval_pairs, dtype=np.int64).reshape(-1, 2):
        observed[row_of[int(u)], int(i)] = 1.0
    return fairness_report(scores, observed, catalog.labels_for(users), ds.item_ids_for(True), alpha)


@dataclass
class RunArtifacts:
    """Everything a finished run produced, with a disk layout writer."""

    config: TrainConfig
    manifest: dict
    history: list[dict]
    eval_result: RankedEvalResult | None = None
    fairness: FairnessReport | None = None
    params: object | None = None
    extras: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        k_all = sorted({int(k.split("@")[1]) for row in self.history for k in row if "@" in k})
        cols = ["stage", "epoch", "loss"]
        for k in k_all:
            cols += [f"hr@{k}", f"ndcg@{k}"]
        cols += ["epsilon_mean", "u_abs"]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", restval="")
        writer.writeheader()
        for row in self.history:
            writer.writerow(row)
        return buf.getvalue()

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2), encoding="utf-8")
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True), encoding="utf-8")
        (out / "metrics.csv").write_text(self.metrics_csv(), encoding="utf-8")
        if self.eval_result is not None:
            self.eval_result.save(out / "eval.json", out / "eval.csv")
        if self.fairness is not None:
            self.fairness.save(out / "fairness.json")
        if self.params is not None and isinstance(self.params, (NCFParams, MFParams)):
            from .models import save_params

            save_params(self.params, out / "model.ckpt", extra={"config_hash": self.config.hash()})


def build_manifest(cfg: TrainConfig, ds: InteractionDataset, clamp_events: int = 0, data_fingerprints=None) -> dict:
    return {
        "package_version": _pkg_version,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "dataset": ds.summary(),
        "data_fingerprints": data_fingerprints or {},
        "seeds": {
            "pretrain_init": stage_seed(cfg.seed, _S_PRETRAIN_INIT),
            "pretrain_epochs": stage_seed(cfg.seed, _S_PRETRAIN_EPOCHS),
            "transfer": stage_seed(cfg.seed, _S_TRANSFER),
            "finetune_epochs": stage_seed(cfg.seed, _S_FINETUNE_EPOCHS),
            "dev_eval": stage_seed(cfg.seed, _S_DEV_EVAL),
            "test_eval": stage_seed(cfg.seed, _S_TEST_EVAL),
        },
        "decisions": {
            "embedding_init": "normal(0, 0.01^2)",
            "mlp_init": "glorot_uniform",
            "bias_init": "zeros",
            "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
            "loss_reduction": cfg.reduction,
            "negatives_fresh_each_epoch": True,
            "negative_sampling": "uniform over non-interacted items of the positive's class",
            "monitor": {"pretrain": f"hr@{cfg.pretrain_k[0]}", "finetune": f"ndcg@{cfg.finetune_k[0]}"},
            "penalty_scope": "batch positive instances on sensitive items",
            "tie_breaking": "per-instance seeded permutation",
            "transfer_output_weights": cfg.transfer_output,
            "alpha": cfg.alpha,
            "eps0": cfg.eps0,
            "huber_delta": cfg.huber_delta,
        },
        "clamp_events": clamp_events,
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }


def run_variant(
    cfg: TrainConfig,
    ds: InteractionDataset,
    catalog: UserCatalog,
    split_: Split,
    pretrained=None,
) -> RunArtifacts:
    """Execute one full variant and evaluate it on the sensitive test split.

    ``pretrained`` lets callers reuse an existing pre-trained model for the
    variants that start from one; when omitted it is trained here with the
    same per-stage seeds, so the results are identical either way.
    """
    history: list[dict] = []
    clamp_events = 0
    extras: dict = {}
    params = None
    test_pairs = split_.pairs(ds, "test", True)
    eval_seed = stage_seed(cfg.seed, _S_TEST_EVAL)

    def needs_pretrain() -> object:
        nonlocal clamp_events
        if pretrained is not None:
            return pretrained
        p, h, c = pretrain(ds, split_, cfg)
        history.extend(h)
        clamp_events += c
        return p

    if cfg.variant in ("NFCF", "NFCF_embd") or (cfg.variant == "typical" and cfg.use_pretrain):
        if cfg.variant == "NFCF" and not cfg.use_pretrain:
            # ablation: no pre-training also removes the projection step; the
            # sensitive model trains from a random start, penalty still on
            params, h, c = _train_sensitive_scratch(ds, catalog, split_, cfg)
            history.extend(h)
            clamp_events += c
            score_fn = forward_fn(params)
        else:
            pre = needs_pretrain()
            user_table = pre.user_emb.data
            direction = None
            if cfg.variant == "NFCF" and cfg.use_debias:
                direction = bias_vector(user_table, catalog)
                user_table = debias(user_table, direction)
            if cfg.variant == "NFCF_embd":
                direction = bias_vector(user_table, catalog)  # computed now, applied after
            penalized = cfg.variant == "NFCF"
            params, h, c = finetune_nfcf(
                pre, ds, catalog, split_, cfg, user_table=user_table, penalized=penalized
            )
            history.extend(h)
            clamp_events += c
            if cfg.variant == "NFCF_embd":
                params.user_emb.data = debias(params.user_emb.data, direction)
            if direction is not None:
                extras["bias_direction"] = direction
            score_fn = forward_fn(params)
    elif cfg.variant == "typical" or cfg.variant == "mf_uabs":
        penalty = "huber" if cfg.variant == "mf_uabs" else None
        params, h, c, score_fn = _train_combined(
            ds, catalog, split_, cfg, ds.pairs[split_combined_train(split_)], penalty=penalty
        )
        history.extend(h)
        clamp_events += c
    elif cfg.variant == "resampling":
        rng = _stage_rng(cfg.seed, _S_RESAMPLE)
        from .datasets import resample_balanced

        train_view = ds.with_pairs(ds.pairs[split_combined_train(split_)])
        balanced = resample_balanced(train_view, catalog, rng)
        params, h, c, score_fn = _train_combined(ds, catalog, split_, cfg, balanced.pairs, penalty=None)
        history.extend(h)
        clamp_events += c
    elif cfg.variant == "projection_cf":
        h, c, score_fn, direction = _train_projection_cf(ds, catalog, split_, cfg)
        history.extend(h)
        clamp_events += c
        extras["bias_direction"] = direction
    elif cfg.variant == "dnn_classifier":
        params, h, score_fn = _train_dnn_classifier(ds, catalog, split_, cfg)
        history.extend(h)
        params = None  # feature classifier does not use the checkpoint format
    else:
        raise ConfigError(f"unknown variant {cfg.variant!r}")

    eval_result = None
    fairness = None
    if test_pairs.size:
        eval_result = ranked_eval(
            score_fn,
            test_pairs,
            ds,
            k_list=cfg.finetune_k,
            n_candidates=cfg.n_candidates,
            seed=eval_seed,
            sensitive=True,
        )
        labels = catalog.labels_for(np.unique(test_pairs[:, 0]))
        if (labels == MALE).any() and (labels == FEMALE).any():
            fairness = _sensitive_fairness(score_fn, test_pairs, ds, catalog, cfg.alpha)
    manifest = build_manifest(cfg, ds, clamp_events)
    return RunArtifacts(
        config=cfg,
        manifest=manifest,
        history=history,
        eval_result=eval_result,
        fairness=fairness,
        params=params,
        extras=extras,
    )


def split_combined_train(split_: Split) -> np.ndarray:
    """Indices into ds.pairs of the training pairs of both item classes."""
    return np.sort(
        np.concatenate([split_.pair_indices("train", False), split_.pair_indices("train", True)])
    )
