"""Bias-direction estimation, embedding debiasing, and fairness measures.

The gender bias direction is the normalized difference between the female and
male mean user embeddings. Debiasing removes each embedding's component along
that direction, which also zeroes the entire group-mean difference (the
direction is the difference, normalized).

Group fairness of item predictions is quantified per item by the smallest
epsilon bounding both outcome log-ratios estimated from Dirichlet-smoothed
soft counts of predicted probabilities, and summarized by the mean over
items. Absolute unfairness compares the groups' absolute estimation errors.
Both have differentiable counterparts usable as training penalties.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import FEMALE, MALE, UserCatalog
from .errors import ContractError, DegenerateDirectionError


def group_mean(user_table: np.ndarray, genders, gender: str) -> np.ndarray:
    """Arithmetic mean of one gender's user embedding rows."""
    genders = _labels(genders)
    table = np.asarray(user_table, dtype=np.float64)
    mask = genders == gender
    if not mask.any():
        raise ContractError(f"no users with gender {gender!r}")
    return table[mask].mean(axis=0)


def bias_vector(user_table: np.ndarray, genders) -> np.ndarray:
    """Unit vector from the male mean embedding toward the female mean."""
    v_female = group_mean(user_table, genders, FEMALE)
    v_male = group_mean(user_table, genders, MALE)
    diff = v_female - v_male
    norm = float(np.linalg.norm(diff))
    scale = max(1.0, float(np.linalg.norm(v_female)), float(np.linalg.norm(v_male)))
    if norm <= 1e-12 * scale:
        raise DegenerateDirectionError("female and male mean embeddings coincide")
    return diff / norm


def debias(vectors: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Remove the component along ``direction`` from one vector or each row."""
    v = np.asarray(direction, dtype=np.float64).reshape(-1)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ContractError("bias direction must be unit-norm")
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != v.shape[0]:
        raise ContractError(f"dimension mismatch: vectors {x.shape} vs direction {v.shape}")
    return x - np.outer(x @ v, v).reshape(x.shape) if x.ndim == 2 else x - (x @ v) * v


def _labels(genders) -> np.ndarray:
    if isinstance(genders, UserCatalog):
        return genders.genders
    return np.asarray(genders, dtype="<U1")


# ---------------------------------------------------------------------------
# differential fairness

def _soft_count_ratios(s_m: float, n_m: int, s_f: float, n_f: int, alpha: float):
    pos = ((s_m + alpha) * (n_f + 2.0 * alpha)) / ((n_m + 2.0 * alpha) * (s_f + alpha))
    neg = ((n_m - s_m + alpha) * (n_f + 2.0 * alpha)) / ((n_m + 2.0 * alpha) * (n_f - s_f + alpha))
    return pos, neg


def epsilon_item(scores: np.ndarray, genders, alpha: float = 1.0) -> float:
    """Smallest epsilon satisfying both smoothed outcome-ratio bounds for one item.

    ``scores`` are predicted interaction probabilities for a single item over
    users whose labels are given in ``genders``; unlabeled users are ignored.
    """
    if alpha <= 0.0:
        raise ContractError("alpha must be > 0")
    scores = np.asarray(scores, dtype=np.float64)
    genders = _labels(genders)
    if scores.shape != genders.shape:
        raise ContractError(f"scores shape {scores.shape} != genders shape {genders.shape}")
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ContractError("scores must lie in [0, 1]")
    male = genders == MALE
    female = genders == FEMALE
    n_m, n_f = int(male.sum()), int(female.sum())
    if n_m == 0 or n_f == 0:
        raise ContractError("both genders must be present to estimate epsilon")
    s_m = math.fsum(scores[male].tolist())
    s_f = math.fsum(scores[female].tolist())
    pos, neg = _soft_count_ratios(s_m, n_m, s_f, n_f, alpha)
    return max(abs(math.log(pos)), abs(math.log(neg)))


def epsilon_mean(values) -> float:
    """Arithmetic mean of per-item epsilon values."""
    values = list(values)
    if not values:
        raise ContractError("epsilon_mean of an empty list")
    return math.fsum(values) / len(values)


def u_abs(pred_dis, obs_dis, pred_adv, obs_adv) -> float:
    """Mean gap between the groups' absolute estimation errors, over items.

    Inputs are per-item averages for the disadvantaged (female) and advantaged
    (male) groups; NaN entries mark items lacking one group and are skipped.
    """
    pd_, od, pa, oa = (np.asarray(a, dtype=np.float64) for a in (pred_dis, obs_dis, pred_adv, obs_adv))
    if not (pd_.shape == od.shape == pa.shape == oa.shape):
        raise ContractError("u_abs inputs must share one shape")
    ok = np.isfinite(pd_) & np.isfinite(od) & np.isfinite(pa) & np.isfinite(oa)
    if not ok.any():
        raise ContractError("no items with observations from both groups")
    gaps = np.abs(np.abs(pd_[ok] - od[ok]) - np.abs(pa[ok] - oa[ok]))
    return math.fsum(gaps.tolist()) / int(ok.sum())


@dataclass
class FairnessReport:
    """Per-item epsilons plus the aggregate fairness metrics of one evaluation."""

    alpha: float
    epsilon_per_item: dict[str, float]
    epsilon_mean: float | None
    u_abs: float | None
    skipped_items: list[str] = field(default_factory=list)
    soft_counts: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "alpha": self.alpha,
                "epsilon_per_item": [
                    {"item": k, "epsilon": v} for k, v in self.epsilon_per_item.items()
                ],
                "epsilon_mean": self.epsilon_mean,
                "u_abs": self.u_abs,
                "skipped_items": self.skipped_items,
            },
            indent=2,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def fairness_report(
    scores: np.ndarray,
    observed: np.ndarray,
    genders,
    item_ids,
    alpha: float = 1.0,
) -> FairnessReport:
    """Evaluate epsilon per item, the epsilon mean, and absolute unfairness.

    ``scores`` and ``observed`` are (users x items) matrices of predicted
    probabilities and empirical interaction indicators for the evaluation
    population; users without a gender label are ignored.
    """
    scores = np.asarray(scores, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    genders = _labels(genders)
    if scores.shape != observed.shape or scores.shape[0] != genders.shape[0]:
        raise ContractError("scores, observed, and genders are misaligned")
    item_ids = [str(i) for i in item_ids]
    if len(item_ids) != scores.shape[1]:
        raise ContractError("item_ids length does not match the score matrix")
    male = genders == MALE
    female = genders == FEMALE
    n_m, n_f = int(male.sum()), int(female.sum())
    eps: dict[str, float] = {}
    counts: dict[str, dict[str, float]] = {}
    skipped: list[str] = []
    pred_d, obs_d, pred_a, obs_a = [], [], [], []
    for j, item in enumerate(item_ids):
        if n_m == 0 or n_f == 0:
            skipped.append(item)
            pred_d.append(np.nan), obs_d.append(np.nan), pred_a.append(np.nan), obs_a.append(np.nan)
            continue
        col = scores[:, j]
        eps[item] = epsilon_item(col, genders, alpha)
        counts[item] = {
            "male_soft": math.fsum(col[male].tolist()),
            "female_soft": math.fsum(col[female].tolist()),
            "n_male": n_m,
            "n_female": n_f,
        }
        pred_d.append(col[female].mean())
        obs_d.append(observed[female, j].mean())
        pred_a.append(col[male].mean())
        obs_a.append(observed[male, j].mean())
    if eps:
        e_mean = epsilon_mean(eps.values())
        u = u_abs(pred_d, obs_d, pred_a, obs_a)
    else:
        e_mean = None
        u = None
    return FairnessReport(
        alpha=alpha,
        epsilon_per_item=eps,
        epsilon_mean=e_mean,
        u_abs=u,
        skipped_items=skipped,
        soft_counts=counts,
    )


# ---------------------------------------------------------------------------
# differentiable training penalties

def df_penalty(scores: Tensor, genders, items, alpha: float = 1.0, eps0: float = 0.0) -> Tensor:
    """Hinge on the batch-estimated epsilon mean; gradients flow through scores.

    ``scores`` are the batch's positive-instance predicted probabilities with
    per-entry gender labels and item indices. Items lacking one gender in the
    batch contribute nothing: the mean runs over the estimable items.
    """
    if alpha <= 0.0:
        raise ContractError("alpha must be > 0")
    genders = _labels(genders)
    items = np.asarray(items, dtype=np.int64)
    if scores.data.shape != genders.shape or scores.data.shape != items.shape:
        raise ContractError("scores, genders, and items are misaligned")
    if items.size == 0:
        return Tensor(0.0)
    male = genders == MALE
    female = genders == FEMALE
    contributions = []
    distinct = np.unique(items)
    for item in distinct:
        here = items == item
        m_mask = (here & male).astype(np.float64)
        f_mask = (here & female).astype(np.float64)
        n_m, n_f = m_mask.sum(), f_mask.sum()
        if n_m == 0 or n_f == 0:
            continue
        s_m = ad.sum_(ad.mul(scores, m_mask))
        s_f = ad.sum_(ad.mul(scores, f_mask))
        log_pos = ad.sub(
            ad.log(ad.div(ad.add(s_m, alpha), n_m + 2.0 * alpha)),
            ad.log(ad.div(ad.add(s_f, alpha), n_f + 2.0 * alpha)),
        )
        log_neg = ad.sub(
            ad.log(ad.div(ad.add(ad.sub(n_m, s_m), alpha), n_m + 2.0 * alpha)),
            ad.log(ad.div(ad.add(ad.sub(n_f, s_f), alpha), n_f + 2.0 * alpha)),
        )
        contributions.append(ad.maximum(ad.absolute(log_pos), ad.absolute(log_neg)))
    if not contributions:
        return Tensor(0.0)
    total = contributions[0]
    for c in contributions[1:]:
        total = ad.add(total, c)
    batch_eps_mean = ad.div(total, float(len(contributions)))
    return ad.relu(ad.sub(batch_eps_mean, eps0))


def _huber(x: Tensor, delta: float) -> Tensor:
    quadratic = ad.mul(ad.mul(x, x), 0.5)
    linear = ad.mul(ad.sub(ad.absolute(x), 0.5 * delta), delta)
    in_core = (np.abs(x.data) <= delta).astype(np.float64)
    return ad.add(ad.mul(quadratic, in_core), ad.mul(linear, 1.0 - in_core))


def huber_uabs_penalty(
    scores: Tensor,
    targets,
    genders,
    items,
    delta: float = 1.0,
) -> Tensor:
    """Absolute-unfairness surrogate with every absolute value Huber-smoothed.

    Estimated from the batch: per item, the female and male mean prediction
    errors against the batch targets. Items lacking one gender are skipped.
    """
    if delta <= 0.0:
        raise ContractError("delta must be > 0")
    genders = _labels(genders)
    targets = np.asarray(targets, dtype=np.float64)
    items = np.asarray(items, dtype=np.int64)
    if scores.data.shape != targets.shape or targets.shape != genders.shape or targets.shape != items.shape:
        raise ContractError("scores, targets, genders, and items are misaligned")
    male = genders == MALE
    female = genders == FEMALE
    contributions = []
    for item in np.unique(items):
        here = items == item
        m_mask = (here & male).astype(np.float64)
        f_mask = (here & female).astype(np.float64)
        n_m, n_f = m_mask.sum(), f_mask.sum()
        if n_m == 0 or n_f == 0:
            continue
        err_d = ad.sub(
            ad.div(ad.sum_(ad.mul(scores, f_mask)), n_f), float((targets * f_mask).sum() / n_f)
        )
        err_a = ad.sub(
            ad.div(ad.sum_(ad.mul(scores, m_mask)), n_m), float((targets * m_mask).sum() / n_m)
        )
        contributions.append(_huber(ad.sub(_huber(err_d, delta), _huber(err_a, delta)), delta))
    if not contributions:
        return Tensor(0.0)
    total = contributions[0]
    for c in contributions[1:]:
        total = ad.add(total, c)
    return ad.div(total, float(len(contributions)))
