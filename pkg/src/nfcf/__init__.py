"""Fairness-aware collaborative filtering on implicit feedback.

Pre-train a neural recommender on abundant non-sensitive interactions, remove
the gender direction from the learned user embeddings by linear projection,
and fine-tune on the scarce sensitive items under a differential-fairness
penalty. Ships the surrounding apparatus: dataset handling, baseline model
variants, ranked evaluation, fairness auditing, and a stage-per-command CLI.
"""

from ._version import __version__
from .autodiff import Tape, Tensor, backward
from .datasets import (
    InteractionDataset,
    SplitSpec,
    UserCatalog,
    load_csv,
    load_movielens,
    load_split_manifest,
    preprocess,
    resample_balanced,
    sample_negatives,
    save_split_manifest,
    split,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateDirectionError,
    ParseError,
    ShapeError,
    TrainingDiverged,
)
from .evaluate import RankedEvalResult, gender_audit, ranked_eval, topk_recommend
from .fairness import (
    FairnessReport,
    bias_vector,
    debias,
    df_penalty,
    epsilon_item,
    epsilon_mean,
    fairness_report,
    group_mean,
    huber_uabs_penalty,
    u_abs,
)
from .models import (
    MFParams,
    NCFParams,
    init_params,
    load_params,
    mf_score,
    ncf_forward,
    save_params,
    transfer_for_finetune,
)
from .optim import Adam, adam_step
from .training import RunArtifacts, TrainConfig, bce_loss, finetune_nfcf, pretrain, run_variant

from .estimators import EmbeddingDebiaser, MFRecommender, NCFRecommender  # noqa: E402  (depends on the above)

__all__ = [
    "Adam",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DegenerateDirectionError",
    "EmbeddingDebiaser",
    "FairnessReport",
    "InteractionDataset",
    "MFParams",
    "MFRecommender",
    "NCFParams",
    "NCFRecommender",
    "ParseError",
    "RankedEvalResult",
    "RunArtifacts",
    "ShapeError",
    "SplitSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "UserCatalog",
    "adam_step",
    "backward",
    "bce_loss",
    "bias_vector",
    "debias",
    "df_penalty",
    "epsilon_item",
    "epsilon_mean",
    "fairness_report",
    "finetune_nfcf",
    "gender_audit",
    "group_mean",
    "huber_uabs_penalty",
    "init_params",
    "load_csv",
    "load_movielens",
    "load_params",
    "load_split_manifest",
    "mf_score",
    "ncf_forward",
    "preprocess",
    "pretrain",
    "ranked_eval",
    "resample_balanced",
    "run_variant",
    "sample_negatives",
    "save_params",
    "save_split_manifest",
    "split",
    "topk_recommend",
    "transfer_for_finetune",
    "u_abs",
]
