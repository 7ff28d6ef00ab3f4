"""Joint text+graph stock embedding model with two classifier heads.

Every subgraph member's description is encoded and pooled to a text vector;
a GNN layer mixes the stacked vectors over the subgraph; the target's text
vector is optionally added back (residual fusion). The fused vector is the
exported stock embedding and also feeds both classification heads:
ReLU, dropout, then one affine layer per taxonomy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, LabelError
from .graph import GnnParams, Subgraph, gat_layer, gcn_layer, init_gnn_params
from .text import MAX_TOKENS, TextEncoder, Vocab, pool, tokenize

GNN_KINDS = ("gcn", "gat", "none")


@dataclass
class Head:
    weight: Tensor
    bias: Tensor

    def named_params(self):
        yield "weight", self.weight
        yield "bias", self.bias


@dataclass
class ForwardResult:
    embedding: Tensor          # [d], post-residual, pre-head
    logits_sector: Tensor      # [n_sectors]
    logits_industry: Tensor    # [n_industries]


class SetnModel:
    """Composed encoder + GNN + residual + sector/industry heads."""

    def __init__(self, vocab: Vocab, dim: int = 64, depth: int = 2,
                 gnn: str = "gcn", residual: bool = True, pooling: str = "mean",
                 dropout: float = 0.2, n_sectors: int = 17, n_industries: int = 33,
                 max_tokens: int = MAX_TOKENS, encoder_train: str = "last",
                 rng: Optional[np.random.Generator] = None):
        if gnn not in GNN_KINDS:
            raise ValueError(f"gnn must be one of {GNN_KINDS}, got {gnn!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.vocab = vocab
        self.dim = dim
        self.gnn_kind = gnn
        self.residual = bool(residual)
        self.pooling = pooling
        self.dropout_rate = dropout
        self.n_sectors = n_sectors
        self.n_industries = n_industries
        self.max_tokens = max_tokens
        self.encoder = TextEncoder(len(vocab), dim, depth, rng, max_len=max_tokens)
        self.gnn: Optional[GnnParams] = None
        if gnn != "none":
            self.gnn = init_gnn_params(dim, rng, with_attention=(gnn == "gat"))
        self.head_sector = Head(ad.xavier_uniform(rng, dim, n_sectors), ad.zeros_param(n_sectors))
        self.head_industry = Head(ad.xavier_uniform(rng, dim, n_industries), ad.zeros_param(n_industries))
        self.encoder.set_trainable(encoder_train)

    # ------------------------------------------------------------------

    def named_params(self):
        for name, p in self.encoder.named_params():
            yield f"encoder.{name}", p
        if self.gnn is not None:
            for name, p in self.gnn.named_params():
                yield f"gnn.{name}", p
        for name, p in self.head_sector.named_params():
            yield f"head_sector.{name}", p
        for name, p in self.head_industry.named_params():
            yield f"head_industry.{name}", p

    def trainable_params(self) -> list[Tensor]:
        return [p for _, p in self.named_params() if p.requires_grad]

    # ------------------------------------------------------------------

    def encode_text(self, record, training: bool = False,
                    cache: Optional[dict] = None) -> Tensor:
        """Pooled text vector [d] for one stock; cache is only sound when the
        encoder is fully frozen."""
        if cache is not None and record.stock_id in cache:
            return Tensor(cache[record.stock_id])
        tokens = tokenize(record.text, self.vocab, max_tokens=self.max_tokens)
        vec = pool(self.encoder.encode(tokens, training), self.pooling)
        if cache is not None:
            cache[record.stock_id] = vec.data.copy()
        return vec

    def forward(self, sub: Subgraph, records: Sequence, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                text_cache: Optional[dict] = None) -> ForwardResult:
        """Run the full pipeline for the subgraph target.

        ``records`` must align with ``sub.members`` (target first).
        """
        if len(records) != sub.size:
            raise DataError(f"{len(records)} records for a subgraph of {sub.size} members")
        for rec, member in zip(records, sub.members):
            if rec.stock_id != member:
                raise DataError(f"record {rec.stock_id} misaligned with subgraph member {member}")

        target_text = self.encode_text(records[0], training, text_cache)
        if self.gnn_kind == "none":
            h = target_text
        else:
            rows = [target_text]
            rows += [self.encode_text(r, training, text_cache) for r in records[1:]]
            h_text = ad.stack_rows(rows)
            layer = gcn_layer if self.gnn_kind == "gcn" else gat_layer
            h_gnn = layer(h_text, sub, self.gnn)
            target_gnn = ad.reshape(ad.take_rows(h_gnn, [0]), (self.dim,))
            h = ad.add(target_text, target_gnn) if self.residual else target_gnn

        z = ad.dropout(ad.relu(h), self.dropout_rate, training, rng)
        z2 = ad.reshape(z, (1, self.dim))
        logits_s = ad.reshape(ad.linear(z2, self.head_sector.weight, self.head_sector.bias),
                              (self.n_sectors,))
        logits_i = ad.reshape(ad.linear(z2, self.head_industry.weight, self.head_industry.bias),
                              (self.n_industries,))
        return ForwardResult(embedding=h, logits_sector=logits_s, logits_industry=logits_i)

    def embed_stock(self, sub: Subgraph, records: Sequence,
                    text_cache: Optional[dict] = None) -> np.ndarray:
        """Deterministic embedding vector [d] (dropout off)."""
        result = self.forward(sub, records, training=False, text_cache=text_cache)
        return result.embedding.data.copy()


def compute_loss(result: ForwardResult, sector_label: int, industry_label: int) -> Tensor:
    """Sum of the two heads' cross-entropies for the target stock."""
    n_s = result.logits_sector.data.shape[0]
    n_i = result.logits_industry.data.shape[0]
    if not 0 <= sector_label < n_s:
        raise LabelError(f"sector label {sector_label} out of range [0, {n_s})")
    if not 0 <= industry_label < n_i:
        raise LabelError(f"industry label {industry_label} out of range [0, {n_i})")
    loss_s = ad.cross_entropy(ad.reshape(result.logits_sector, (1, n_s)), [sector_label])
    loss_i = ad.cross_entropy(ad.reshape(result.logits_industry, (1, n_i)), [industry_label])
    return ad.add(loss_s, loss_i)
