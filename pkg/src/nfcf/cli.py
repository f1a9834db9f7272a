"""Stage-per-command pipeline driver.

The commands mirror the training stages so ablations are command-line
recombinations: ``pretrain`` fits the base recommender on non-sensitive data,
``debias`` projects the gender direction out of a checkpoint's user table,
``finetune`` adapts a checkpoint to the sensitive vocabulary under the
fairness penalty, ``evaluate`` and ``audit`` report ranking and fairness
numbers, and ``baseline`` runs any end-to-end variant in one shot.

Every command re-derives the data split deterministically from the seed (or
loads an explicit split manifest), writes its artifacts into ``--out-dir``,
and never mutates the artifacts of an earlier stage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .datasets import (
    SplitSpec,
    load_csv,
    load_movielens,
    load_split_manifest,
    preprocess,
    save_split_manifest,
    split,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateDirectionError,
    ParseError,
    TrainingDiverged,
)
from .evaluate import gender_audit, ranked_eval
from .fairness import bias_vector, debias
from .models import forward_fn, load_params, save_params
from .training import (
    RunArtifacts,
    TrainConfig,
    VARIANTS,
    _sensitive_fairness,
    build_manifest,
    finetune_nfcf,
    pretrain,
    run_variant,
    stage_seed,
)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_data(data_dir: str, min_item_count: int):
    """Detect the directory format, load, and preprocess."""
    root = Path(data_dir)
    fingerprints = {}
    if (root / "ratings.dat").exists() and (root / "users.dat").exists():
        ds, catalog = load_movielens(root / "ratings.dat", root / "users.dat")
        fingerprints = {p: _sha256(root / p) for p in ("ratings.dat", "users.dat")}
    elif (root / "interactions.csv").exists() and (root / "users.csv").exists():
        ds, catalog = load_csv(root / "interactions.csv", root / "users.csv")
        fingerprints = {p: _sha256(root / p) for p in ("interactions.csv", "users.csv")}
    else:
        raise FileNotFoundError(
            f"{data_dir}: expected ratings.dat/users.dat (MovieLens) or interactions.csv/users.csv"
        )
    ds = preprocess(ds, min_item_count=min_item_count)
    return ds, catalog, fingerprints


def _build_config(args) -> TrainConfig:
    payload = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        payload.pop("split", None)
    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        payload["variant"] = args.variant
    if getattr(args, "lam", None) is not None:
        payload["lam"] = args.lam
    if getattr(args, "alpha", None) is not None:
        payload["alpha"] = args.alpha
    if getattr(args, "model", None) is not None:
        payload["model"] = args.model
    if getattr(args, "epochs", None) is not None:
        if args.command == "pretrain":
            payload["pretrain_epochs"] = args.epochs
        elif args.command == "baseline":
            payload["pretrain_epochs"] = args.epochs
            payload["finetune_epochs"] = args.epochs
        else:
            payload["finetune_epochs"] = args.epochs
    if getattr(args, "k_list", None) is not None:
        ks = tuple(int(x) for x in args.k_list.split(","))
        if args.command == "pretrain":
            payload["pretrain_k"] = ks
        elif args.command == "evaluate":
            payload["pretrain_k"] = ks
            payload["finetune_k"] = ks
        else:
            payload["finetune_k"] = ks
    return TrainConfig.from_dict(payload)


def _split_spec(args, cfg: TrainConfig) -> SplitSpec:
    payload = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if path.exists():
            payload = json.loads(path.read_text(encoding="utf-8")).get("split", {})
    payload.setdefault("seed", cfg.seed)
    return SplitSpec(**payload)


def _get_split(args, ds, catalog, cfg):
    if getattr(args, "split", None):
        return load_split_manifest(args.split)
    return split(ds, _split_spec(args, cfg), catalog)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_common(p: argparse.ArgumentParser, checkpoint: bool = False):
    p.add_argument("--config", help="JSON config file (TrainConfig fields, optional 'split' block)")
    p.add_argument("--data-dir", required=True, help="directory with the dataset files")
    p.add_argument("--out-dir", required=True, help="directory for this stage's artifacts")
    p.add_argument("--seed", type=int, default=None, help="seed for every stage-level RNG")
    p.add_argument("--split", default=None, help="existing split manifest to reuse")
    p.add_argument("--min-item-count", type=int, default=5, help="drop rarer non-sensitive items")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="input model checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfcf", description="fairness-aware collaborative filtering pipeline"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base recommender on non-sensitive items")
    _add_common(p)
    p.add_argument("--model", choices=("ncf", "mf"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k-list", default=None, help="comma-separated eval cutoffs")

    p = sub.add_parser("debias", help="project the gender direction out of a checkpoint")
    _add_common(p, checkpoint=True)
    p.add_argument("--bias-vector", default=None, help="reuse a previously computed direction")

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on sensitive items")
    _add_common(p, checkpoint=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="fairness penalty weight")
    p.add_argument("--alpha", type=float, default=None, help="soft-count smoothing")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k-list", default=None)

    p = sub.add_parser("evaluate", help="ranked metrics and fairness report for a checkpoint")
    _add_common(p, checkpoint=True)
    p.add_argument("--item-class", choices=("auto", "sensitive", "nonsensitive"), default="auto")
    p.add_argument("--k-list", default=None)
    p.add_argument("--alpha", type=float, default=None)

    p = sub.add_parser("audit", help="gender distribution of top-1 recommendations")
    _add_common(p, checkpoint=True)

    p = sub.add_parser("baseline", help="run a full variant end to end")
    _add_common(p)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--model", choices=("ncf", "mf"), default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k-list", default=None)
    return parser


def cmd_pretrain(args) -> int:
    cfg = _build_config(args)
    ds, catalog, prints = _load_data(args.data_dir, args.min_item_count)
    split_ = _get_split(args, ds, catalog, cfg)
    out = _out_dir(args)
    params, history, clamps = pretrain(ds, split_, cfg)
    save_split_manifest(split_, out / "split.json")
    save_params(
        params, out / "pretrained.ckpt",
        extra={"stage": "pretrain", "seed": cfg.seed, "config_hash": cfg.hash()},
    )
    test_pairs = split_.pairs(ds, "test", False)
    eval_result = None
    if test_pairs.size:
        eval_result = ranked_eval(
            forward_fn(params),
            test_pairs,
            ds,
            k_list=cfg.pretrain_k,
            n_candidates=cfg.n_candidates,
            seed=stage_seed(cfg.seed, 5),
            sensitive=False,
        )
    artifacts = RunArtifacts(
        config=cfg,
        manifest=build_manifest(cfg, ds, clamps, prints),
        history=history,
        eval_result=eval_result,
        params=None,
    )
    artifacts.save(out)
    if eval_result is not None:
        for row in eval_result.rows():
            print(f"test hr@{row['k']}={row['hr']:.4f} ndcg@{row['k']}={row['ndcg']:.4f}")
    print(f"wrote {out / 'pretrained.ckpt'}")
    return 0


def cmd_debias(args) -> int:
    cfg = _build_config(args)
    ds, catalog, _prints = _load_data(args.data_dir, args.min_item_count)
    params = load_params(args.checkpoint)
    out = _out_dir(args)
    payload: dict
    if args.bias_vector:
        stored = json.loads(Path(args.bias_vector).read_text(encoding="utf-8"))
        if stored.get("degenerate"):
            direction = None
        else:
            direction = np.asarray(stored["direction"], dtype=np.float64)
    else:
        try:
            direction = bias_vector(params.user_emb.data, catalog)
        except DegenerateDirectionError:
            direction = None
            print("group means already coincide; nothing to remove", file=sys.stderr)
    if direction is not None:
        params.user_emb.data = debias(params.user_emb.data, direction)
        payload = {"dim": int(direction.size), "direction": direction.tolist(), "degenerate": False}
    else:
        payload = {"dim": params.user_emb.data.shape[1], "direction": None, "degenerate": True}
    save_params(
        params, out / "debiased.ckpt",
        extra={"stage": "debias", "seed": cfg.seed, "config_hash": cfg.hash()},
    )
    (out / "bias_vector.json").write_text(json.dumps(payload), encoding="utf-8")
    print(f"wrote {out / 'debiased.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _build_config(args)
    ds, catalog, prints = _load_data(args.data_dir, args.min_item_count)
    split_ = _get_split(args, ds, catalog, cfg)
    out = _out_dir(args)
    pretrained = load_params(args.checkpoint)
    params, history, clamps = finetune_nfcf(pretrained, ds, catalog, split_, cfg, penalized=cfg.lam > 0)
    save_split_manifest(split_, out / "split.json")
    save_params(
        params, out / "finetuned.ckpt",
        extra={"stage": "finetune", "seed": cfg.seed, "config_hash": cfg.hash()},
    )
    artifacts = RunArtifacts(
        config=cfg,
        manifest=build_manifest(cfg, ds, clamps, prints),
        history=history,
        params=None,
    )
    artifacts.save(out)
    print(f"wrote {out / 'finetuned.ckpt'}")
    return 0


def _resolve_item_class(params, ds, requested: str) -> bool:
    if requested == "sensitive":
        expected = ds.n_items(True)
        if params.n_items != expected:
            raise ContractError(
                f"checkpoint has {params.n_items} items but the sensitive vocabulary has {expected}"
            )
        return True
    if requested == "nonsensitive":
        expected = ds.n_items(False)
        if params.n_items != expected:
            raise ContractError(
                f"checkpoint has {params.n_items} items but the non-sensitive vocabulary has {expected}"
            )
        return False
    matches = [s for s in (True, False) if params.n_items == ds.n_items(s)]
    if len(matches) != 1:
        raise ContractError(
            f"cannot infer item class for a {params.n_items}-item checkpoint; pass --item-class"
        )
    return matches[0]


def cmd_evaluate(args) -> int:
    cfg = _build_config(args)
    ds, catalog, prints = _load_data(args.data_dir, args.min_item_count)
    split_ = _get_split(args, ds, catalog, cfg)
    out = _out_dir(args)
    params = load_params(args.checkpoint)
    sensitive = _resolve_item_class(params, ds, args.item_class)
    k_list = cfg.finetune_k if sensitive else cfg.pretrain_k
    test_pairs = split_.pairs(ds, "test", sensitive)
    if test_pairs.size == 0:
        print("test split is empty; nothing to evaluate", file=sys.stderr)
        return 1
    result = ranked_eval(
        forward_fn(params),
        test_pairs,
        ds,
        k_list=k_list,
        n_candidates=cfg.n_candidates,
        seed=stage_seed(cfg.seed, 5),
        sensitive=sensitive,
    )
    result.save(out / "eval.json", out / "eval.csv")
    if sensitive:
        labels = catalog.labels_for(np.unique(test_pairs[:, 0]))
        if (labels == "m").any() and (labels == "f").any():
            report = _sensitive_fairness(forward_fn(params), test_pairs, ds, catalog, cfg.alpha)
            report.save(out / "fairness.json")
            print(f"epsilon_mean={report.epsilon_mean:.4f} u_abs={report.u_abs:.4f}")
        else:
            print("fairness metrics undefined: a gender group is absent from the test split", file=sys.stderr)
    (out / "manifest.json").write_text(
        json.dumps(build_manifest(cfg, ds, 0, prints), indent=2, sort_keys=True), encoding="utf-8"
    )
    for row in result.rows():
        print(f"hr@{row['k']}={row['hr']:.4f} ndcg@{row['k']}={row['ndcg']:.4f}")
    return 0


def cmd_audit(args) -> int:
    cfg = _build_config(args)
    ds, catalog, _prints = _load_data(args.data_dir, args.min_item_count)
    split_ = _get_split(args, ds, catalog, cfg)
    out = _out_dir(args)
    params = load_params(args.checkpoint)
    sensitive = _resolve_item_class(params, ds, "auto")
    test_pairs = split_.pairs(ds, "test", sensitive)
    users = np.unique(test_pairs[:, 0]) if test_pairs.size else None
    audit = gender_audit(
        forward_fn(params), ds, catalog, users=users, sensitive=sensitive, seed=stage_seed(cfg.seed, 5)
    )
    audit.save(out / "audit_distribution.csv", out / "audit_top_items.csv")
    print(f"wrote {out / 'audit_distribution.csv'}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _build_config(args)
    ds, catalog, prints = _load_data(args.data_dir, args.min_item_count)
    split_ = _get_split(args, ds, catalog, cfg)
    out = _out_dir(args)
    artifacts = run_variant(cfg, ds, catalog, split_)
    artifacts.manifest["data_fingerprints"] = prints
    save_split_manifest(split_, out / "split.json")
    artifacts.save(out)
    if artifacts.eval_result is not None:
        for row in artifacts.eval_result.rows():
            print(f"hr@{row['k']}={row['hr']:.4f} ndcg@{row['k']}={row['ndcg']:.4f}")
    if artifacts.fairness is not None:
        print(f"epsilon_mean={artifacts.fairness.epsilon_mean:.4f} u_abs={artifacts.fairness.u_abs:.4f}")
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "debias": cmd_debias,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "audit": cmd_audit,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, CheckpointError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError, DegenerateDirectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
