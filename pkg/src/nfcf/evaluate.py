"""Ranking evaluation over sampled candidates, plus gender-conditioned audits.

Each held-out (user, item) pair is ranked against candidate items the user
never interacted with: a random sample of ``n_candidates`` of them for large
vocabularies, or every remaining item when the class is small enough that the
sample would cover it anyway. The hit ratio checks presence in the top K; the
discounted gain scores the hit position as 1/log2(rank + 1). Score ties are
broken by a per-instance random permutation drawn from the evaluation seed,
so degenerate models get no systematic optimism.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import FEMALE, MALE, InteractionDataset, UserCatalog
from .errors import ContractError

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

_CHUNK = 262144


def _score_chunked(score_fn: ScoreFn, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    out = np.empty(users.shape[0], dtype=np.float64)
    for lo in range(0, users.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, users.shape[0])
        out[lo:hi] = np.asarray(score_fn(users[lo:hi], items[lo:hi]), dtype=np.float64).reshape(-1)
    return out


@dataclass
class RankedEvalResult:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_instances: int
    n_skipped: int
    n_candidates: int
    full_ranking: bool
    seed: int

    def rows(self) -> list[dict]:
        return [
            {"k": k, "hr": self.hr[k], "ndcg": self.ndcg[k]}
            for k in sorted(self.hr)
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "metrics": self.rows(),
                "n_instances": self.n_instances,
                "n_skipped": self.n_skipped,
                "n_candidates": self.n_candidates,
                "full_ranking": self.full_ranking,
                "seed": self.seed,
            },
            indent=2,
        )

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(self.to_json(), encoding="utf-8")
        if csv_path is not None:
            lines = ["k,hr,ndcg"] + [f"{r['k']},{r['hr']!r},{r['ndcg']!r}" for r in self.rows()]
            Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _rank_with_ties(scores: np.ndarray, tiebreak: np.ndarray) -> int:
    """1-based rank of entry 0 after sorting by score desc, tiebreak asc."""
    order = np.lexsort((tiebreak, -scores))
    return int(np.flatnonzero(order == 0)[0]) + 1


def ranked_eval(
    score_fn: ScoreFn,
    test_pairs: np.ndarray,
    ds: InteractionDataset,
    k_list=(10,),
    n_candidates: int = 100,
    seed: int = 0,
    sensitive: bool = False,
    full: bool | None = None,
) -> RankedEvalResult:
    """Average HR@K and NDCG@K of held-out pairs over sampled candidates.

    ``test_pairs`` uses class-local item indices. ``full=None`` selects full
    ranking automatically when the class vocabulary fits within
    ``n_candidates + 1`` items. Instances whose user has no candidate items
    are skipped and counted.
    """
    k_list = sorted(int(k) for k in k_list)
    if not k_list or k_list[0] < 1:
        raise ContractError(f"invalid k_list {k_list}")
    test_pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    pool = ds.n_items(sensitive)
    if full is None:
        full = pool <= n_candidates + 1
    if not full and n_candidates < max(k_list):
        raise ContractError(f"n_candidates={n_candidates} is below max(k)={max(k_list)}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    positives = ds.positives(sensitive)

    users_cat: list[np.ndarray] = []
    items_cat: list[np.ndarray] = []
    tiebreaks: list[np.ndarray] = []
    skipped = 0
    for u, test_item in test_pairs:
        u, test_item = int(u), int(test_item)
        excluded = positives[u] | {test_item}
        if full:
            cands = np.array([j for j in range(pool) if j not in excluded], dtype=np.int64)
        else:
            n_avail = pool - len(excluded)
            if n_avail <= 0:
                cands = np.array([], dtype=np.int64)
            else:
                cands = _draw_candidates(rng, pool, excluded, min(n_candidates, n_avail))
        if cands.size == 0:
            skipped += 1
            continue
        row_items = np.concatenate([[test_item], cands])
        users_cat.append(np.full(row_items.size, u, dtype=np.int64))
        items_cat.append(row_items)
        tiebreaks.append(rng.permutation(row_items.size))

    hr = {k: [] for k in k_list}
    ndcg = {k: [] for k in k_list}
    if users_cat:
        scores = _score_chunked(score_fn, np.concatenate(users_cat), np.concatenate(items_cat))
        offset = 0
        for row_items, tiebreak in zip(items_cat, tiebreaks):
            s = scores[offset : offset + row_items.size]
            offset += row_items.size
            rank = _rank_with_ties(s, tiebreak)
            for k in k_list:
                hit = rank <= k
                hr[k].append(1.0 if hit else 0.0)
                ndcg[k].append(1.0 / math.log2(rank + 1.0) if hit else 0.0)
    n_eval = test_pairs.shape[0] - skipped
    return RankedEvalResult(
        hr={k: (math.fsum(v) / n_eval if n_eval else math.nan) for k, v in hr.items()},
        ndcg={k: (math.fsum(v) / n_eval if n_eval else math.nan) for k, v in ndcg.items()},
        n_instances=n_eval,
        n_skipped=skipped,
        n_candidates=n_candidates,
        full_ranking=bool(full),
        seed=seed,
    )


def _draw_candidates(rng: np.random.Generator, pool: int, excluded: set[int], k: int) -> np.ndarray:
    if pool - len(excluded) == k:
        return np.array([j for j in range(pool) if j not in excluded], dtype=np.int64)
    chosen: list[int] = []
    seen = set(excluded)
    need = k
    while need > 0:
        for item in rng.integers(0, pool, size=max(2 * need + 8, 16)):
            item = int(item)
            if item not in seen:
                seen.add(item)
                chosen.append(item)
                need -= 1
                if need == 0:
                    break
    return np.array(chosen, dtype=np.int64)


def topk_recommend(
    score_fn: ScoreFn,
    user: int,
    ds: InteractionDataset,
    k: int,
    sensitive: bool = True,
    seed: int = 0,
) -> np.ndarray:
    """Highest-scoring class items the user has not interacted with.

    Returns class-local indices in descending score order (seeded random
    order within ties); fewer than k when the user has seen almost everything.
    """
    if not (0 <= user < ds.n_users):
        raise ContractError(f"user index {user} out of range")
    pool = ds.n_items(sensitive)
    pos = ds.positives(sensitive)[user]
    cands = np.array([j for j in range(pool) if j not in pos], dtype=np.int64)
    if cands.size == 0:
        return cands
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scores = np.asarray(score_fn(np.full(cands.size, user, dtype=np.int64), cands), dtype=np.float64).reshape(-1)
    order = np.lexsort((rng.permutation(cands.size), -scores))
    return cands[order[: min(k, cands.size)]]


@dataclass
class AuditResult:
    """Top-1 recommendation shares and data shares by gender, per item."""

    rows: list[dict]                       # item, data_* and rec_* counts/shares
    top_items: dict[str, list[str]]        # gender -> items by recommendation count
    n_audited: dict[str, int] = field(default_factory=dict)

    def distribution_csv(self) -> str:
        header = "item,data_male,data_female,data_female_share,rec_male,rec_female,rec_female_share"
        lines = [header]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        _csv_escape(r["item"]),
                        str(r["data_male"]),
                        str(r["data_female"]),
                        _fmt(r["data_female_share"]),
                        str(r["rec_male"]),
                        str(r["rec_female"]),
                        _fmt(r["rec_female_share"]),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def top_items_csv(self, depth: int = 10) -> str:
        lines = ["rank,male,female"]
        males = self.top_items.get(MALE, [])
        females = self.top_items.get(FEMALE, [])
        for r in range(min(depth, max(len(males), len(females)))):
            m = males[r] if r < len(males) else ""
            f = females[r] if r < len(females) else ""
            lines.append(f"{r + 1},{_csv_escape(m)},{_csv_escape(f)}")
        return "\n".join(lines) + "\n"

    def save(self, distribution_path, top_items_path) -> None:
        Path(distribution_path).write_text(self.distribution_csv(), encoding="utf-8")
        Path(top_items_path).write_text(self.top_items_csv(), encoding="utf-8")


def _csv_escape(s: str) -> str:
    if "," in s or '"' in s:
        return '"' + s.replace('"', '""') + '"'
    return s


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def gender_audit(
    score_fn: ScoreFn,
    ds: InteractionDataset,
    catalog: UserCatalog,
    users=None,
    sensitive: bool = True,
    seed: int = 0,
) -> AuditResult:
    """Who gets recommended what: top-1 shares by gender, next to data shares.

    Audits the given users (default: every user holding a pair of this item
    class); users without a gender label are excluded. For each item the
    result reports how many audited users of each gender received it as their
    top-1 recommendation, alongside the gender counts of the observed
    interactions, plus per-gender frequency-ranked recommendation lists.
    """
    labels = catalog.genders
    pairs = ds.pairs_local(sensitive)
    if users is None:
        users = np.unique(pairs[:, 0]) if pairs.size else np.array([], dtype=np.int64)
    users = np.asarray(users, dtype=np.int64)
    users = users[np.isin(labels[users], (MALE, FEMALE))]
    if users.size == 0:
        raise ContractError("no labeled users to audit")
    pool = ds.n_items(sensitive)
    item_ids = ds.item_ids_for(sensitive)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    positives = ds.positives(sensitive)

    all_items = np.arange(pool, dtype=np.int64)
    rec_counts = {MALE: np.zeros(pool, dtype=np.int64), FEMALE: np.zeros(pool, dtype=np.int64)}
    for u in users:
        scores = np.asarray(
            score_fn(np.full(pool, u, dtype=np.int64), all_items), dtype=np.float64
        ).reshape(-1).copy()
        if positives[u]:
            scores[np.fromiter(positives[u], dtype=np.int64)] = -np.inf
        if not np.isfinite(scores).any():
            continue
        top = int(np.lexsort((rng.permutation(pool), -scores))[0])
        rec_counts[labels[u]][top] += 1

    data_counts = {MALE: np.zeros(pool, dtype=np.int64), FEMALE: np.zeros(pool, dtype=np.int64)}
    for u, i in pairs:
        g = labels[u]
        if g in (MALE, FEMALE):
            data_counts[g][i] += 1

    rows = []
    for j in range(pool):
        dm, df = int(data_counts[MALE][j]), int(data_counts[FEMALE][j])
        rm, rf = int(rec_counts[MALE][j]), int(rec_counts[FEMALE][j])
        rows.append(
            {
                "item": item_ids[j],
                "data_male": dm,
                "data_female": df,
                "data_female_share": (df / (dm + df)) if dm + df else None,
                "rec_male": rm,
                "rec_female": rf,
                "rec_female_share": (rf / (rm + rf)) if rm + rf else None,
            }
        )
    top_items = {
        g: [item_ids[j] for j in np.lexsort((np.arange(pool), -rec_counts[g])) if rec_counts[g][j] > 0]
        for g in (MALE, FEMALE)
    }
    n_audited = {
        MALE: int((labels[users] == MALE).sum()),
        FEMALE: int((labels[users] == FEMALE).sum()),
    }
    return AuditResult(rows=rows, top_items=top_items, n_audited=n_audited)
