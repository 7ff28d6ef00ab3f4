"""Training loop, dataset splitting, and checkpoint I/O.

Each step samples the target's 1-hop subgraph, runs the model forward, and
backpropagates the loss of the target node only; one optimizer step per
target. Determinism: parameter init, epoch order, and dropout all derive
from the config seed, so a fixed seed reproduces checkpoints bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, TextIO

import numpy as np

from .autodiff import Adam, backward
from .data import StockRecord
from .errors import CheckpointError, DataError, SetnError, TrainingError
from .graph import StockGraph, sample_subgraph, to_undirected
from .model import SetnModel, compute_loss
from .text import Vocab

logger = logging.getLogger(__name__)

_CKPT_MAGIC = b"SETN"
_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    """Training settings. The defaults are the reference recipe: 20 epochs of
    Adam at learning rate 0.001, dropout 0.2, mean pooling, last-block
    encoder training, 512-token truncation, directed 1-hop sampling."""

    epochs: int = 20
    learning_rate: float = 0.001
    dropout: float = 0.2
    pooling: str = "mean"
    gnn: str = "gcn"
    residual: bool = True
    directed: bool = True
    encoder_train: str = "last"
    hidden_dim: int = 64
    encoder_depth: int = 2
    seed: int = 0
    proportions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    max_tokens: int = 512
    # Adam moment/epsilon settings are library conventions, not part of the
    # published recipe, which fixes only the learning rate.
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    neighbor_direction: str = "in"
    frozen_text_cache: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proportions"] = list(self.proportions)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(obj)
        if "proportions" in merged:
            merged["proportions"] = tuple(merged["proportions"])
        return cls(**merged)


@dataclass
class Split:
    train: list[int]
    val: list[int]
    test: list[int]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(ids: Sequence[int], proportions=(0.7, 0.1, 0.2), seed: int = 0) -> Split:
    """Seeded shuffle, then a contiguous train/val/test cut.

    The validation and test splits get their rounded shares; the training
    split takes the remainder.
    """
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty id list")
    if len(proportions) != 3 or any(p <= 0 for p in proportions):
        raise DataError(f"proportions must be three positive numbers, got {proportions}")
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise DataError(f"proportions must sum to 1, got {sum(proportions)}")
    n = len(ids)
    n_val = _round_half_up(n * proportions[1])
    n_test = _round_half_up(n * proportions[2])
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"degenerate split sizes ({n_train}, {n_val}, {n_test}) for {n} ids")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return Split(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )


def build_model(config: TrainConfig, vocab: Vocab,
                n_sectors: int = 17, n_industries: int = 33) -> SetnModel:
    """Fresh model whose initialization derives from the config seed."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))
    return SetnModel(
        vocab,
        dim=config.hidden_dim,
        depth=config.encoder_depth,
        gnn=config.gnn,
        residual=config.residual,
        pooling=config.pooling,
        dropout=config.dropout,
        n_sectors=n_sectors,
        n_industries=n_industries,
        max_tokens=config.max_tokens,
        encoder_train=config.encoder_train,
        rng=rng,
    )


def prepare_graph(graph: StockGraph, config: TrainConfig) -> StockGraph:
    return graph if config.directed else to_undirected(graph)


def epoch_order(seed: int, epoch: int, ids: Sequence[int]) -> list[int]:
    """Shuffled iteration order, a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, epoch)))
    return [ids[i] for i in rng.permutation(len(ids))]


def train(model: SetnModel, graph: StockGraph, records: Sequence[StockRecord],
          split: Split, config: TrainConfig,
          log_stream: Optional[TextIO] = None) -> list[dict]:
    """Fit the model in place; returns one log entry per epoch."""
    from .evaluation import embed_universe, map_at_k  # local import, no cycle at module load

    g = prepare_graph(graph, config)
    params = model.trainable_params()
    if not params:
        raise TrainingError("model has no trainable parameters")
    optimizer = Adam(params, lr=config.learning_rate,
                     beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    dropout_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    cache = {} if config.frozen_text_cache and not _encoder_has_trainable(model) else None

    history = []
    for epoch in range(config.epochs):
        losses = []
        for target in epoch_order(config.seed, epoch, split.train):
            sub = sample_subgraph(g, target, config.neighbor_direction)
            recs = [records[m] for m in sub.members]
            try:
                result = model.forward(sub, recs, training=True, rng=dropout_rng,
                                       text_cache=cache)
                loss = compute_loss(result, records[target].sector, records[target].industry)
            except SetnError:
                raise
            except ValueError as exc:
                # overflow inside the forward pass surfaces as a finiteness error
                raise TrainingError(f"non-finite loss at epoch {epoch}, stock {target}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, stock {target}")
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            losses.append(value)

        val_emb = embed_universe(model, g, records, split.val,
                                 direction=config.neighbor_direction, text_cache=cache)
        val_ids = set(split.val)
        sector_map = map_at_k(val_emb, {r.stock_id: r.sector for r in records
                                        if r.stock_id in val_ids}, ks=(5,))
        industry_map = map_at_k(val_emb, {r.stock_id: r.industry for r in records
                                          if r.stock_id in val_ids}, ks=(5,))
        entry = {
            "epoch": epoch,
            "mean_train_loss": float(np.mean(losses)),
            "val_map5_sector": sector_map[5],
            "val_map5_industry": industry_map[5],
        }
        history.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry, sort_keys=True) + "\n")
        logger.info("epoch %d: mean loss %.4f, val MAP@5 %.3f/%.3f",
                    epoch, entry["mean_train_loss"],
                    entry["val_map5_sector"], entry["val_map5_industry"])
    return history


def _encoder_has_trainable(model: SetnModel) -> bool:
    return any(p.requires_grad for _, p in model.encoder.named_params())


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: b"SETN" | u32 version | u64 header length | header JSON |
#         float64 LE parameter blocks in manifest order | 8-byte SHA-256 prefix
# of everything before it.


def save_model(model: SetnModel, path, config: TrainConfig) -> None:
    manifest = [{"name": name, "shape": list(p.data.shape)} for name, p in model.named_params()]
    header = {
        "config": config.to_dict(),
        "model": {
            "n_sectors": model.n_sectors,
            "n_industries": model.n_industries,
        },
        "vocab": model.vocab.tokens,
        "params": manifest,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += _CKPT_MAGIC
    buf += struct.pack("<I", _CKPT_VERSION)
    buf += struct.pack("<Q", len(payload))
    buf += payload
    for _, p in model.named_params():
        buf += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    checksum = hashlib.sha256(bytes(buf)).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(bytes(buf))
        fh.write(checksum)


def load_model(path, expected_gnn: Optional[str] = None) -> tuple[SetnModel, TrainConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 + 8 + 8 or blob[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    body, checksum = blob[:-8], blob[-8:]
    if hashlib.sha256(body).digest()[:8] != checksum:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupt)")
    (version,) = struct.unpack("<I", body[4:8])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + header_len].decode("utf-8"))
    config = TrainConfig.from_dict(header["config"])
    if expected_gnn is not None and config.gnn != expected_gnn:
        raise CheckpointError(
            f"{path}: checkpoint was trained with gnn={config.gnn!r}, requested {expected_gnn!r}")
    model = build_model(config, Vocab(header["vocab"]),
                        n_sectors=header["model"]["n_sectors"],
                        n_industries=header["model"]["n_industries"])
    offset = 16 + header_len
    names = dict(model.named_params())
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in names:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        p = names[name]
        if p.data.shape != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {shape}, expected {p.data.shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: parameter block for {name!r} truncated")
        p.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after parameters")
    return model, config
