"""Implicit-feedback datasets: loading, filtering, splitting, negative sampling.

Two input formats are supported:

* MovieLens-1M: ``ratings.dat`` (``UserID::MovieID::Rating::Timestamp``) and
  ``users.dat`` (``UserID::Gender::Age::Occupation::Zip-code``). Every rating
  becomes a positive interaction regardless of its star value; the declared
  occupation becomes the user's single sensitive-item interaction.
* Generic CSV: ``interactions.csv`` with header ``user_id,item_id,item_class``
  (item_class in {nonsensitive, sensitive}) and ``users.csv`` with header
  ``user_id,gender`` (m/f/unknown). UTF-8, comma-delimited.

Item indices are dense per item class; user indices are dense over the full
user set and stay stable through preprocessing, so a :class:`UserCatalog`
built at load time remains valid afterwards.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

MALE = "m"
FEMALE = "f"
UNKNOWN = "u"

NONSENSITIVE = "nonsensitive"
SENSITIVE = "sensitive"

# MovieLens-1M occupation codes, verbatim from the distribution's README.
ML_OCCUPATIONS = {
    0: "other or not specified",
    1: "academic/educator",
    2: "artist",
    3: "clerical/admin",
    4: "college/grad student",
    5: "customer service",
    6: "doctor/health care",
    7: "executive/managerial",
    8: "farmer",
    9: "homemaker",
    10: "K-12 student",
    11: "lawyer",
    12: "programmer",
    13: "retired",
    14: "sales/marketing",
    15: "scientist",
    16: "self-employed",
    17: "technician/engineer",
    18: "tradesman/craftsman",
    19: "unemployed",
    20: "writer",
}

# Occupations that do not count as careers for recommendation purposes.
ML_EXCLUDED_OCCUPATIONS = (
    "other or not specified",
    "K-12 student",
    "retired",
    "unemployed",
)

_GENDER_ALIASES = {
    "m": MALE, "male": MALE,
    "f": FEMALE, "female": FEMALE,
    "u": UNKNOWN, "unknown": UNKNOWN, "": UNKNOWN, "n/a": UNKNOWN,
}


class UserCatalog:
    """Per-user protected attribute (m / f / u), immutable after load."""

    def __init__(self, genders):
        arr = np.asarray(genders, dtype="<U1")
        bad = set(np.unique(arr)) - {MALE, FEMALE, UNKNOWN}
        if bad:
            raise ContractError(f"unknown gender labels: {sorted(bad)}")
        arr.setflags(write=False)
        self.genders = arr

    def __len__(self) -> int:
        return len(self.genders)

    @property
    def male_mask(self) -> np.ndarray:
        return self.genders == MALE

    @property
    def female_mask(self) -> np.ndarray:
        return self.genders == FEMALE

    @property
    def n_male(self) -> int:
        return int(self.male_mask.sum())

    @property
    def n_female(self) -> int:
        return int(self.female_mask.sum())

    def labels_for(self, users: np.ndarray) -> np.ndarray:
        return self.genders[np.asarray(users, dtype=np.int64)]


class InteractionDataset:
    """Deduplicated positive (user, item) pairs over a tagged item vocabulary.

    ``pairs`` holds global item indices; per-class views with class-local
    dense item indices are derived lazily and cached. At most one sensitive
    interaction per user is allowed (careers / majors are one-per-user data).
    """

    def __init__(self, user_ids, item_ids, item_sensitive, pairs):
        self.user_ids = tuple(str(u) for u in user_ids)
        self.item_ids = tuple(str(i) for i in item_ids)
        self.item_sensitive = np.asarray(item_sensitive, dtype=bool)
        if len(self.item_ids) != self.item_sensitive.shape[0]:
            raise ContractError("item_ids and item_sensitive length mismatch")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size:
            if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= len(self.user_ids):
                raise ContractError("user index out of range")
            if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= len(self.item_ids):
                raise ContractError("item index out of range")
        self.pairs = np.unique(pairs, axis=0) if pairs.size else pairs.copy()
        # loaded datasets are immutable and safe to share across threads
        self.pairs.setflags(write=False)
        self.item_sensitive.setflags(write=False)
        self.user_index = {u: k for k, u in enumerate(self.user_ids)}
        self.item_index = {i: k for k, i in enumerate(self.item_ids)}
        sens_users = self.pairs[self.item_sensitive[self.pairs[:, 1]], 0] if self.pairs.size else np.array([], dtype=np.int64)
        if sens_users.size and np.bincount(sens_users).max() > 1:
            raise ContractError("a user has more than one sensitive interaction")
        self._local_cache: dict[bool, tuple[np.ndarray, np.ndarray]] = {}
        self._pairs_cache: dict[bool, np.ndarray] = {}
        self._positives_cache: dict[bool, list[set[int]]] = {}

    # --- vocabulary views -------------------------------------------------
    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def class_item_globals(self, sensitive: bool) -> np.ndarray:
        """Global indices of the items in one class, in global order."""
        if sensitive not in self._local_cache:
            globals_ = np.flatnonzero(self.item_sensitive == sensitive)
            global_to_local = np.full(len(self.item_ids), -1, dtype=np.int64)
            global_to_local[globals_] = np.arange(globals_.size)
            self._local_cache[sensitive] = (globals_, global_to_local)
        return self._local_cache[sensitive][0]

    def n_items(self, sensitive: bool | None = None) -> int:
        if sensitive is None:
            return len(self.item_ids)
        return int(self.class_item_globals(sensitive).size)

    def item_ids_for(self, sensitive: bool) -> tuple[str, ...]:
        return tuple(self.item_ids[g] for g in self.class_item_globals(sensitive))

    def to_local(self, global_items: np.ndarray, sensitive: bool) -> np.ndarray:
        self.class_item_globals(sensitive)
        local = self._local_cache[sensitive][1][np.asarray(global_items, dtype=np.int64)]
        if local.size and local.min() < 0:
            raise ContractError("item does not belong to the requested class")
        return local

    def pairs_local(self, sensitive: bool) -> np.ndarray:
        """(n, 2) array of (user, class-local item) positives for one class."""
        if sensitive not in self._pairs_cache:
            mask = self.item_sensitive[self.pairs[:, 1]] == sensitive if self.pairs.size else np.array([], dtype=bool)
            sub = self.pairs[mask] if self.pairs.size else self.pairs
            out = sub.copy()
            if out.size:
                out[:, 1] = self.to_local(sub[:, 1], sensitive)
            self._pairs_cache[sensitive] = out
        return self._pairs_cache[sensitive]

    def positives(self, sensitive: bool) -> list[set[int]]:
        """Per-user set of class-local positive items."""
        if sensitive not in self._positives_cache:
            sets: list[set[int]] = [set() for _ in range(self.n_users)]
            for u, i in self.pairs_local(sensitive):
                sets[u].add(int(i))
            self._positives_cache[sensitive] = sets
        return self._positives_cache[sensitive]

    def n_class_users(self, sensitive: bool) -> int:
        p = self.pairs_local(sensitive)
        return int(np.unique(p[:, 0]).size) if p.size else 0

    def positives_mask(self, sensitive: bool) -> np.ndarray | None:
        """Dense users-by-items boolean positive matrix, or None if too large."""
        key = ("mask", sensitive)
        if key not in self._local_cache:
            if self.n_users * self.n_items(sensitive) > 200_000_000:
                self._local_cache[key] = (None, None)
            else:
                mask = np.zeros((self.n_users, self.n_items(sensitive)), dtype=bool)
                p = self.pairs_local(sensitive)
                if p.size:
                    mask[p[:, 0], p[:, 1]] = True
                self._local_cache[key] = (mask, None)
        return self._local_cache[key][0]

    def with_pairs(self, pairs: np.ndarray) -> "InteractionDataset":
        """Same vocabulary and user space, different pair set."""
        return InteractionDataset(self.user_ids, self.item_ids, self.item_sensitive, pairs)

    def summary(self) -> dict:
        return {
            "users": self.n_users,
            "nonsensitive_items": self.n_items(False),
            "sensitive_items": self.n_items(True),
            "nonsensitive_pairs": int(self.pairs_local(False).shape[0]),
            "sensitive_pairs": int(self.pairs_local(True).shape[0]),
        }


# ---------------------------------------------------------------------------
# loaders

def _read_lines(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", str(path)) from exc
    return text.splitlines()


def load_movielens(ratings_path, users_path):
    """Parse MovieLens-1M files into a dataset plus a gender catalog.

    Every rating line yields a positive pair (the star value is discarded);
    each user's declared occupation yields one sensitive pair. Users whose
    occupation code is not a known MovieLens code have that line rejected:
    they keep their movie interactions but carry no gender and no occupation.
    """
    genders: dict[str, str] = {}
    occupations: dict[str, str] = {}
    for ln, line in enumerate(_read_lines(users_path), start=1):
        if not line.strip():
            continue
        fields = line.split("::")
        if len(fields) != 5:
            raise ParseError(f"expected 5 '::'-delimited fields, got {len(fields)}", str(users_path), ln)
        uid, gender, _age, occ_code, _zip = fields
        try:
            code = int(occ_code)
        except ValueError:
            raise ParseError(f"occupation code {occ_code!r} is not an integer", str(users_path), ln)
        if code not in ML_OCCUPATIONS:
            continue  # reject the record
        if gender not in ("M", "F"):
            raise ParseError(f"gender must be M or F, got {gender!r}", str(users_path), ln)
        genders[uid] = MALE if gender == "M" else FEMALE
        occupations[uid] = ML_OCCUPATIONS[code]

    raw_pairs: list[tuple[str, str]] = []
    for ln, line in enumerate(_read_lines(ratings_path), start=1):
        if not line.strip():
            continue
        fields = line.split("::")
        if len(fields) != 4:
            raise ParseError(f"expected 4 '::'-delimited fields, got {len(fields)}", str(ratings_path), ln)
        uid, mid, rating, _ts = fields
        try:
            float(rating)
        except ValueError:
            raise ParseError(f"rating {rating!r} is not numeric", str(ratings_path), ln)
        raw_pairs.append((uid, mid))

    user_ids = sorted({u for u, _ in raw_pairs} | set(genders), key=_numeric_key)
    movie_ids = sorted({m for _, m in raw_pairs}, key=_numeric_key)
    occupation_names = [ML_OCCUPATIONS[c] for c in sorted(ML_OCCUPATIONS)]
    item_ids = movie_ids + occupation_names
    item_sensitive = np.array([False] * len(movie_ids) + [True] * len(occupation_names))

    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    pairs = [(uidx[u], iidx[m]) for u, m in raw_pairs]
    pairs += [(uidx[u], iidx[occ]) for u, occ in occupations.items()]
    ds = InteractionDataset(user_ids, item_ids, item_sensitive, np.array(pairs, dtype=np.int64).reshape(-1, 2))
    catalog = UserCatalog([genders.get(u, UNKNOWN) for u in user_ids])
    return ds, catalog


def _numeric_key(s: str):
    return (0, int(s)) if s.isdigit() else (1, s)


def load_csv(interactions_path, users_path):
    """Parse the generic CSV schema; duplicate pairs are collapsed."""
    rows = _read_lines(interactions_path)
    if not rows:
        raise ParseError("empty interactions file", str(interactions_path), 1)
    reader = csv.reader(rows)
    header = next(reader)
    if [h.strip().lower() for h in header] != ["user_id", "item_id", "item_class"]:
        raise ParseError("header must be user_id,item_id,item_class", str(interactions_path), 1)
    raw: list[tuple[str, str, bool]] = []
    for ln, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 3:
            raise ParseError(f"expected 3 columns, got {len(rec)}", str(interactions_path), ln)
        uid, iid, cls = (c.strip() for c in rec)
        if cls not in (NONSENSITIVE, SENSITIVE):
            raise ParseError(f"item_class must be {NONSENSITIVE!r} or {SENSITIVE!r}, got {cls!r}", str(interactions_path), ln)
        raw.append((uid, iid, cls == SENSITIVE))

    genders: dict[str, str] = {}
    urows = _read_lines(users_path)
    if not urows:
        raise ParseError("empty users file", str(users_path), 1)
    ureader = csv.reader(urows)
    uheader = next(ureader)
    if [h.strip().lower() for h in uheader] != ["user_id", "gender"]:
        raise ParseError("header must be user_id,gender", str(users_path), 1)
    for ln, rec in enumerate(ureader, start=2):
        if not rec:
            continue
        if len(rec) != 2:
            raise ParseError(f"expected 2 columns, got {len(rec)}", str(users_path), ln)
        uid, g = (c.strip() for c in rec)
        gl = _GENDER_ALIASES.get(g.lower())
        if gl is None:
            raise ParseError(f"unrecognized gender {g!r}", str(users_path), ln)
        genders[uid] = gl

    item_class: dict[str, bool] = {}
    for _, iid, sens in raw:
        if item_class.setdefault(iid, sens) != sens:
            raise ParseError(f"item {iid!r} appears in both classes", str(interactions_path))
    user_ids = sorted({u for u, _, _ in raw} | set(genders), key=_numeric_key)
    item_ids = sorted(item_class, key=_numeric_key)
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    pairs = np.array([(uidx[u], iidx[i]) for u, i, _ in raw], dtype=np.int64).reshape(-1, 2)
    item_sensitive = np.array([item_class[i] for i in item_ids])
    ds = InteractionDataset(user_ids, item_ids, item_sensitive, pairs)
    catalog = UserCatalog([genders.get(u, UNKNOWN) for u in user_ids])
    return ds, catalog


# ---------------------------------------------------------------------------
# preprocessing

def preprocess(
    ds: InteractionDataset,
    min_item_count: int = 5,
    excluded_sensitive_labels=ML_EXCLUDED_OCCUPATIONS,
) -> InteractionDataset:
    """Drop rare non-sensitive items and excluded sensitive labels.

    Non-sensitive items with fewer than ``min_item_count`` interactions are
    removed (one pass). Sensitive pairs whose item id is in
    ``excluded_sensitive_labels`` are removed along with those items. Item
    indices are re-densified; the user index space is untouched.
    """
    if min_item_count < 1:
        raise ContractError("min_item_count must be >= 1")
    counts = np.zeros(len(ds.item_ids), dtype=np.int64)
    if ds.pairs.size:
        np.add.at(counts, ds.pairs[:, 1], 1)
    excluded = set(excluded_sensitive_labels or ())
    keep_item = np.ones(len(ds.item_ids), dtype=bool)
    for g, iid in enumerate(ds.item_ids):
        if ds.item_sensitive[g]:
            keep_item[g] = iid not in excluded
        else:
            keep_item[g] = counts[g] >= min_item_count
    new_globals = np.flatnonzero(keep_item)
    remap = np.full(len(ds.item_ids), -1, dtype=np.int64)
    remap[new_globals] = np.arange(new_globals.size)
    kept_pairs = ds.pairs[keep_item[ds.pairs[:, 1]]] if ds.pairs.size else ds.pairs
    new_pairs = kept_pairs.copy()
    if new_pairs.size:
        new_pairs[:, 1] = remap[kept_pairs[:, 1]]
    return InteractionDataset(
        ds.user_ids,
        [ds.item_ids[g] for g in new_globals],
        ds.item_sensitive[new_globals],
        new_pairs,
    )


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class SplitSpec:
    """Held-out fractions per item class plus the split seed.

    Test fractions are taken from the full pair set; dev fractions are taken
    from what remains after the test cut.
    """

    nonsensitive_test: float = 0.01
    sensitive_test: float = 0.30
    nonsensitive_dev: float = 0.01
    sensitive_dev: float = 0.20
    seed: int = 0

    def __post_init__(self):
        for name in ("nonsensitive_test", "sensitive_test", "nonsensitive_dev", "sensitive_dev"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ContractError(f"{name} must be in [0, 1), got {v}")


@dataclass
class Split:
    """Pair-index lists (into ``ds.pairs``) for train/dev/test per class."""

    spec: SplitSpec
    indices: dict = field(default_factory=dict)  # (part, sensitive) -> index array

    def pair_indices(self, part: str, sensitive: bool) -> np.ndarray:
        return self.indices[(part, sensitive)]

    def pairs(self, ds: InteractionDataset, part: str, sensitive: bool) -> np.ndarray:
        """Class-local (user, item) pairs for one part of the split."""
        sub = ds.pairs[self.pair_indices(part, sensitive)]
        out = sub.copy()
        if out.size:
            out[:, 1] = ds.to_local(sub[:, 1], sensitive)
        return out


def split(ds: InteractionDataset, spec: SplitSpec, catalog: UserCatalog | None = None) -> Split:
    """Random pair-level partition into train/dev/test, per item class.

    The sensitive partition is stratified by gender (m / f / unknown) when a
    catalog is supplied, so that fairness metrics stay estimable on the test
    set. The same spec (including seed) always yields the same split.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    out = Split(spec=spec)
    for sensitive, f_test, f_dev in (
        (False, spec.nonsensitive_test, spec.nonsensitive_dev),
        (True, spec.sensitive_test, spec.sensitive_dev),
    ):
        mask = ds.item_sensitive[ds.pairs[:, 1]] == sensitive if ds.pairs.size else np.array([], dtype=bool)
        idx = np.flatnonzero(mask)
        if sensitive and catalog is not None and idx.size:
            strata = [idx[catalog.labels_for(ds.pairs[idx, 0]) == g] for g in (MALE, FEMALE, UNKNOWN)]
        else:
            strata = [idx]
        train_parts, dev_parts, test_parts = [], [], []
        for stratum in strata:
            if stratum.size == 0:
                continue
            perm = stratum[rng.permutation(stratum.size)]
            n_test = int(round(f_test * perm.size))
            test_parts.append(perm[:n_test])
            rest = perm[n_test:]
            n_dev = int(round(f_dev * rest.size))
            dev_parts.append(rest[:n_dev])
            train_parts.append(rest[n_dev:])
        cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
        out.indices[("train", sensitive)] = cat(train_parts)
        out.indices[("dev", sensitive)] = cat(dev_parts)
        out.indices[("test", sensitive)] = cat(test_parts)
    if catalog is not None and ds.pairs_local(True).shape[0] > 0:
        test_users = ds.pairs[out.indices[("test", True)], 0] if out.indices[("test", True)].size else np.array([], dtype=np.int64)
        labels = catalog.labels_for(test_users)
        for g, name in ((MALE, "male"), (FEMALE, "female")):
            if not np.any(labels == g):
                warnings.warn(
                    f"no {name} users in the sensitive test split; fairness metrics will be undefined",
                    stacklevel=2,
                )
    return out


def save_split_manifest(split_: Split, path) -> None:
    payload = {
        "spec": {
            "nonsensitive_test": split_.spec.nonsensitive_test,
            "sensitive_test": split_.spec.sensitive_test,
            "nonsensitive_dev": split_.spec.nonsensitive_dev,
            "sensitive_dev": split_.spec.sensitive_dev,
            "seed": split_.spec.seed,
        },
        "indices": {
            f"{part}:{'sensitive' if sens else 'nonsensitive'}": split_.indices[(part, sens)].tolist()
            for (part, sens) in split_.indices
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_split_manifest(path) -> Split:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    spec = SplitSpec(**payload["spec"])
    out = Split(spec=spec)
    for key, values in payload["indices"].items():
        part, cls = key.split(":")
        out.indices[(part, cls == "sensitive")] = np.asarray(values, dtype=np.int64)
    return out


# ---------------------------------------------------------------------------
# sampling

def sample_negatives(
    ds: InteractionDataset,
    user: int,
    k: int,
    rng: np.random.Generator,
    sensitive: bool = False,
    positives: set[int] | None = None,
) -> np.ndarray:
    """Uniformly sample k distinct non-interacted class-local items for a user.

    Falls back to returning every candidate when fewer than k exist. The
    caller may pass a precomputed positive set to avoid re-deriving it.
    """
    n = ds.n_items(sensitive)
    pos = ds.positives(sensitive)[user] if positives is None else positives
    n_candidates = n - len(pos)
    if n_candidates <= 0:
        return np.array([], dtype=np.int64)
    if n_candidates <= k:
        return np.array(sorted(set(range(n)) - pos), dtype=np.int64)
    if len(pos) == 0:
        return rng.choice(n, size=k, replace=False)
    # rejection sampling with growing oversampling; cheap for sparse users
    chosen: list[int] = []
    seen = set(pos)
    need = k
    while need > 0:
        draw = rng.integers(0, n, size=max(2 * need + 8, 16))
        for item in draw:
            item = int(item)
            if item not in seen:
                seen.add(item)
                chosen.append(item)
                need -= 1
                if need == 0:
                    break
    return np.array(chosen, dtype=np.int64)


def resample_balanced(
    ds: InteractionDataset, catalog: UserCatalog, rng: np.random.Generator
) -> InteractionDataset:
    """Keep the pairs of an equal-size random sample of male and female users.

    Samples min(N_m, N_f) users from each gender without replacement and
    drops everyone else's pairs (unknown-gender users included). Index
    spaces are preserved so the catalog stays valid.
    """
    males = np.flatnonzero(catalog.male_mask)
    females = np.flatnonzero(catalog.female_mask)
    if males.size == 0 or females.size == 0:
        raise ContractError("balanced resampling needs users of both genders")
    n = min(males.size, females.size)
    keep = np.concatenate([
        rng.choice(males, size=n, replace=False),
        rng.choice(females, size=n, replace=False),
    ])
    keep_mask = np.zeros(ds.n_users, dtype=bool)
    keep_mask[keep] = True
    return ds.with_pairs(ds.pairs[keep_mask[ds.pairs[:, 0]]])
