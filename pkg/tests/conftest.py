import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import make_planted_csv

from nfcf.datasets import InteractionDataset, SplitSpec, UserCatalog, load_csv, preprocess, split
from nfcf.training import TrainConfig, run_variant


def ml1m_dir():
    """MovieLens-1M location, or None when the dataset is not available."""
    for candidate in (os.environ.get("NFCF_ML1M_DIR"), Path(__file__).parent.parent / "data" / "ml-1m"):
        if candidate and Path(candidate).is_dir():
            p = Path(candidate)
            if (p / "ratings.dat").exists() and (p / "users.dat").exists():
                return p
    return None


requires_ml1m = pytest.mark.skipif(
    ml1m_dir() is None,
    reason="MovieLens-1M not found (set NFCF_ML1M_DIR or place it under data/ml-1m)",
)


@pytest.fixture
def tiny_ds():
    """Six users, four movies, three careers; both genders everywhere."""
    users = [f"u{i}" for i in range(6)]
    items = ["m0", "m1", "m2", "m3", "job0", "job1", "job2"]
    sensitive = [False, False, False, False, True, True, True]
    pairs = [
        (0, 0), (0, 1), (1, 0), (1, 2), (2, 1), (2, 3),
        (3, 0), (3, 3), (4, 2), (4, 3), (5, 1), (5, 2),
        (0, 4), (1, 5), (2, 6), (3, 4), (4, 5), (5, 6),
    ]
    ds = InteractionDataset(users, items, sensitive, np.array(pairs))
    catalog = UserCatalog(["m", "f", "m", "f", "m", "f"])
    return ds, catalog


# --- synthetic planted-bias corpus, shared by training/CLI/acceptance tests ---

SYNTH_SEED = 5

SYNTH_CFG = dict(
    model="ncf",
    n_factors=16,
    tower=(32, 16, 8),
    lr=0.004,
    pretrain_epochs=25,
    finetune_epochs=50,
    pretrain_batch=512,
    finetune_batch=256,
    negatives=4,
    patience=12,
    finetune_k=(10, 5),
    pretrain_k=(10,),
    alpha=1.0,
    combined_batch=256,
    combined_epochs=50,
    seed=SYNTH_SEED,
)

# lam chosen by the usual grid on the synthetic dev split: largest fairness
# gain with under 2% accuracy give-up
SYNTH_LAM = 0.2


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    return make_planted_csv(tmp_path_factory.mktemp("planted"))


@pytest.fixture(scope="session")
def synth_data(synth_dir):
    ds, catalog = load_csv(synth_dir / "interactions.csv", synth_dir / "users.csv")
    ds = preprocess(ds, min_item_count=5)
    split_ = split(ds, SplitSpec(seed=SYNTH_SEED), catalog)
    return ds, catalog, split_


@pytest.fixture(scope="session")
def synth_runs(synth_data):
    """Lazily trained, cached variant runs on the planted corpus."""
    ds, catalog, split_ = synth_data
    cache: dict[str, object] = {}

    def get(name: str):
        if name in cache:
            return cache[name]
        overrides = {
            "nfcf": dict(variant="NFCF", lam=SYNTH_LAM),
            "nfcf_lam0_nodebias": dict(variant="NFCF", lam=0.0, use_debias=False),
            "nfcf_no_penalty": dict(variant="NFCF", lam=0.0),
            "nfcf_embd": dict(variant="NFCF_embd", lam=0.0),
            "nfcf_mf": dict(variant="NFCF", model="mf", lam=SYNTH_LAM),
            "nfcf_no_pretrain": dict(variant="NFCF", use_pretrain=False, lam=SYNTH_LAM),
            "ncf_plain": dict(variant="typical", use_pretrain=False, lam=0.0),
            "ncf_pretrain": dict(variant="typical", use_pretrain=True, lam=0.0),
            "mf_plain": dict(variant="typical", model="mf", use_pretrain=False, lam=0.0),
            "mf_uabs": dict(variant="mf_uabs", model="mf", lam=SYNTH_LAM),
            "resampling": dict(variant="resampling", lam=0.0),
            "projection_cf": dict(variant="projection_cf", lam=0.0),
            "dnn_classifier": dict(variant="dnn_classifier", lam=0.0),
        }[name]
        cfg = TrainConfig(**{**SYNTH_CFG, **overrides})
        cache[name] = run_variant(cfg, ds, catalog, split_)
        return cache[name]

    return get
