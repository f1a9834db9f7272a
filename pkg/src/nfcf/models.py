"""Recommender model definitions: matrix factorization and the tower-MLP model.

Parameter containers hold autodiff tensors; forward functions build the score
graph so the training loop can differentiate through them. Initialization is
deterministic given a seed: embeddings are N(0, 0.01^2), dense-layer weights
are Glorot-uniform, biases start at zero. Draw order is fixed (user table,
item table, layer weights, output weights) so checkpoints are reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ContractError

_MAGIC = b"NFCFCKPT"
_FORMAT_VERSION = 1


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MFParams:
    """Latent-factor model with user/item biases and a global offset."""

    user_emb: Tensor
    item_emb: Tensor
    user_bias: Tensor
    item_bias: Tensor
    mu: Tensor

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def n_factors(self) -> int:
        return self.user_emb.shape[1]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("user_emb", self.user_emb),
            ("item_emb", self.item_emb),
            ("user_bias", self.user_bias),
            ("item_bias", self.item_bias),
            ("mu", self.mu),
        ]

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def copy(self) -> "MFParams":
        return MFParams(*(_clone(t) for _, t in self.named_tensors()))


@dataclass
class NCFParams:
    """Embedding tables plus a strictly narrowing MLP tower.

    ``tower`` includes the concatenation width as its first entry, so the
    l-th weight matrix maps tower[l] -> tower[l+1] and the output weights map
    tower[-1] -> 1.
    """

    user_emb: Tensor
    item_emb: Tensor
    weights: list[Tensor]
    biases: list[Tensor]
    out_weights: Tensor
    tower: tuple[int, ...]

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def n_factors(self) -> int:
        return self.user_emb.shape[1]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("user_emb", self.user_emb), ("item_emb", self.item_emb)]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"weight_{l}", w))
            out.append((f"bias_{l}", b))
        out.append(("out_weights", self.out_weights))
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def copy(self) -> "NCFParams":
        return NCFParams(
            user_emb=_clone(self.user_emb),
            item_emb=_clone(self.item_emb),
            weights=[_clone(w) for w in self.weights],
            biases=[_clone(b) for b in self.biases],
            out_weights=_clone(self.out_weights),
            tower=self.tower,
        )


def _clone(t: Tensor) -> Tensor:
    out = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
    return out


def _check_tower(tower: tuple[int, ...], n_factors: int) -> None:
    if len(tower) < 2:
        raise ConfigError(f"tower needs at least an input and one hidden width, got {tower}")
    if tower[0] != 2 * n_factors:
        raise ConfigError(f"tower[0] must equal 2 * n_factors = {2 * n_factors}, got {tower[0]}")
    if any(a <= b for a, b in zip(tower, tower[1:])):
        raise ConfigError(f"tower widths must strictly decrease, got {tower}")


def init_ncf(n_users: int, n_items: int, n_factors: int, tower: tuple[int, ...], seed: int = 0) -> NCFParams:
    if n_factors < 1:
        raise ConfigError("n_factors must be >= 1")
    _check_tower(tuple(tower), n_factors)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    user_emb = Tensor(rng.normal(0.0, 0.01, size=(n_users, n_factors)), requires_grad=True, name="user_emb")
    item_emb = Tensor(rng.normal(0.0, 0.01, size=(n_items, n_factors)), requires_grad=True, name="item_emb")
    weights, biases = [], []
    for l, (fi, fo) in enumerate(zip(tower, tower[1:])):
        weights.append(Tensor(_glorot(rng, fi, fo), requires_grad=True, name=f"weight_{l}"))
        biases.append(Tensor(np.zeros(fo), requires_grad=True, name=f"bias_{l}"))
    # the output vector starts at zero: the first updates then set the output's
    # operating point through it, instead of driving every hidden bias negative
    # (with an unlucky all-positive draw the tower can die within a few steps)
    out_w = Tensor(np.zeros((tower[-1], 1)), requires_grad=True, name="out_weights")
    return NCFParams(user_emb, item_emb, weights, biases, out_w, tuple(tower))


def init_mf(n_users: int, n_items: int, n_factors: int, seed: int = 0) -> MFParams:
    if n_factors < 1:
        raise ConfigError("n_factors must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    user_emb = Tensor(rng.normal(0.0, 0.01, size=(n_users, n_factors)), requires_grad=True, name="user_emb")
    item_emb = Tensor(rng.normal(0.0, 0.01, size=(n_items, n_factors)), requires_grad=True, name="item_emb")
    return MFParams(
        user_emb,
        item_emb,
        Tensor(np.zeros(n_users), requires_grad=True, name="user_bias"),
        Tensor(np.zeros(n_items), requires_grad=True, name="item_bias"),
        Tensor(np.zeros(()), requires_grad=True, name="mu"),
    )


def init_params(kind: str, n_users: int, n_items: int, n_factors: int, tower=None, seed: int = 0):
    """Dispatcher over the two model kinds."""
    if kind == "ncf":
        if tower is None:
            raise ConfigError("ncf initialization needs tower widths")
        return init_ncf(n_users, n_items, n_factors, tower, seed)
    if kind == "mf":
        return init_mf(n_users, n_items, n_factors, seed)
    raise ConfigError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# forward scoring

def ncf_forward(params: NCFParams, users, items) -> Tensor:
    """Batched interaction probabilities in (0, 1); taped when a tape is active."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.shape != items.shape:
        raise ContractError(f"user batch shape {users.shape} != item batch shape {items.shape}")
    p = ad.gather_rows(params.user_emb, users)
    q = ad.gather_rows(params.item_emb, items)
    z = ad.concat(p, q)
    for w, b in zip(params.weights, params.biases):
        z = ad.relu(ad.affine(z, w, b))
    logits = ad.matmul(z, params.out_weights)
    return ad.sigmoid(ad.reshape(logits, (-1,)))


def mf_forward(params: MFParams, users, items) -> Tensor:
    """Sigmoid of the biased inner product, so scores are probabilities."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.shape != items.shape:
        raise ContractError(f"user batch shape {users.shape} != item batch shape {items.shape}")
    p = ad.gather_rows(params.user_emb, users)
    q = ad.gather_rows(params.item_emb, items)
    dot = ad.sum_(ad.mul(p, q), axis=1)
    bu = ad.gather_rows(params.user_bias, users)
    bi = ad.gather_rows(params.item_bias, items)
    return ad.sigmoid(ad.add(ad.add(dot, ad.add(bu, bi)), params.mu))


def mf_score(params: MFParams, user: int, item: int) -> float:
    """Single-pair convenience wrapper around :func:`mf_forward`."""
    if not (0 <= user < params.n_users and 0 <= item < params.n_items):
        raise ContractError(f"index out of range: user={user}, item={item}")
    return float(mf_forward(params, [user], [item]).data[0])


def forward_fn(params):
    """Score function (users, items) -> ndarray for either model kind."""
    if isinstance(params, NCFParams):
        return lambda u, i: ncf_forward(params, u, i).data
    if isinstance(params, MFParams):
        return lambda u, i: mf_forward(params, u, i).data
    raise ConfigError(f"unsupported params type {type(params).__name__}")


# ---------------------------------------------------------------------------
# pre-train -> fine-tune transfer

def transfer_for_finetune(
    pretrained: NCFParams,
    user_table: np.ndarray,
    n_sensitive: int,
    seed: int = 0,
    transfer_output: bool = True,
) -> NCFParams:
    """Assemble fine-tuning parameters from a pre-trained model.

    Copies the tower (and, by default, the output weights), installs the
    given user table as a frozen embedding, and draws a fresh item table for
    the sensitive vocabulary. The pre-trained input is never mutated.
    """
    user_table = np.asarray(user_table, dtype=np.float64)
    if user_table.shape != pretrained.user_emb.shape:
        raise ContractError(
            f"user table shape {user_table.shape} does not match pretrained {pretrained.user_emb.shape}"
        )
    if n_sensitive < 1:
        raise ContractError("n_sensitive must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    item_emb = Tensor(rng.normal(0.0, 0.01, size=(n_sensitive, pretrained.n_factors)), requires_grad=True, name="item_emb")
    out_w = _clone(pretrained.out_weights) if transfer_output else Tensor(
        np.zeros((pretrained.tower[-1], 1)), requires_grad=True, name="out_weights"
    )
    frozen_users = Tensor(user_table.copy(), requires_grad=False, name="user_emb")
    return NCFParams(
        user_emb=frozen_users,
        item_emb=item_emb,
        weights=[_clone(w) for w in pretrained.weights],
        biases=[_clone(b) for b in pretrained.biases],
        out_weights=out_w,
        tower=pretrained.tower,
    )


def transfer_mf_for_finetune(
    pretrained: MFParams, user_table: np.ndarray, n_sensitive: int, seed: int = 0
) -> MFParams:
    """MF analogue: item factors and biases are fresh, b_u and mu carry over."""
    user_table = np.asarray(user_table, dtype=np.float64)
    if user_table.shape != pretrained.user_emb.shape:
        raise ContractError(
            f"user table shape {user_table.shape} does not match pretrained {pretrained.user_emb.shape}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return MFParams(
        user_emb=Tensor(user_table.copy(), requires_grad=False, name="user_emb"),
        item_emb=Tensor(rng.normal(0.0, 0.01, size=(n_sensitive, pretrained.n_factors)), requires_grad=True, name="item_emb"),
        user_bias=_clone(pretrained.user_bias),
        item_bias=Tensor(np.zeros(n_sensitive), requires_grad=True, name="item_bias"),
        mu=_clone(pretrained.mu),
    )


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + raw little-endian float64 arrays

def save_params(params, path, extra: dict | None = None) -> None:
    """Write a checkpoint; the round trip through :func:`load_params` is exact."""
    named = params.named_tensors()
    manifest = {
        "format_version": _FORMAT_VERSION,
        "kind": "ncf" if isinstance(params, NCFParams) else "mf",
        "arrays": [
            {"name": n, "shape": list(t.data.shape), "trainable": t.requires_grad} for n, t in named
        ],
        "extra": extra or {},
    }
    if isinstance(params, NCFParams):
        manifest["tower"] = list(params.tower)
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(header)))
        fh.write(header)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path):
    """Read a checkpoint written by :func:`save_params`.

    Raises :class:`CheckpointError` on bad magic, unsupported version, or a
    truncated payload; no partially constructed model escapes.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from("<II", blob, len(_MAGIC))
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(_MAGIC) + 8
    if len(blob) < start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        manifest = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    offset = start + header_len
    tensors: dict[str, Tensor] = {}
    order: list[str] = []
    for spec in manifest["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if len(blob) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated array {spec['name']!r}")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
        tensors[spec["name"]] = Tensor(arr.copy(), requires_grad=bool(spec["trainable"]), name=spec["name"])
        order.append(spec["name"])
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    kind = manifest.get("kind")
    if kind == "ncf":
        n_layers = sum(1 for n in order if n.startswith("weight_"))
        return NCFParams(
            user_emb=tensors["user_emb"],
            item_emb=tensors["item_emb"],
            weights=[tensors[f"weight_{l}"] for l in range(n_layers)],
            biases=[tensors[f"bias_{l}"] for l in range(n_layers)],
            out_weights=tensors["out_weights"],
            tower=tuple(manifest["tower"]),
        )
    if kind == "mf":
        return MFParams(
            user_emb=tensors["user_emb"],
            item_emb=tensors["item_emb"],
            user_bias=tensors["user_bias"],
            item_bias=tensors["item_bias"],
            mu=tensors["mu"],
        )
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")


def checkpoint_extra(path) -> dict:
    """Read just the manifest's free-form metadata block."""
    blob = Path(path).read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    _, header_len = struct.unpack_from("<II", blob, len(_MAGIC))
    manifest = json.loads(blob[len(_MAGIC) + 8 : len(_MAGIC) + 8 + header_len].decode("utf-8"))
    return manifest.get("extra", {})
