"""Tokenization and the trainable text encoder.

A compact stand-in for a large pretrained language model: learned token and
position embeddings followed by a configurable number of single-head
self-attention blocks. Depth 0 degrades to a bag of token embeddings.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
NUM_RESERVED = 3
MAX_TOKENS = 512

TokenSequence = list[int]


class Vocab:
    """Token-to-id map. Ids 0..2 are reserved for PAD, UNK and CLS."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self._ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._ids:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self._ids[tok] = i + NUM_RESERVED

    def __len__(self) -> int:
        return len(self.tokens) + NUM_RESERVED

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Vocab":
        """Vocabulary from whitespace-split lowercased texts, most frequent first
        (ties broken alphabetically)."""
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(text.lower().split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        tokens = [tok for tok, _ in ranked]
        if max_size is not None:
            tokens = tokens[: max(0, max_size - NUM_RESERVED)]
        return cls(tokens)

    @classmethod
    def from_file(cls, path) -> "Vocab":
        """Read one token per line; line k holds the token with id k + 3."""
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")


def tokenize(text: str, vocab: Vocab, max_tokens: int = MAX_TOKENS) -> TokenSequence:
    """Lowercase, whitespace-split, map through the vocabulary with UNK fallback.

    A CLS id is prepended and the sequence is truncated to ``max_tokens``
    ids total. Empty text yields just the CLS id.
    """
    if len(vocab) <= NUM_RESERVED:
        raise DataError("vocabulary is empty")
    ids = [CLS_ID]
    for word in text.lower().split():
        ids.append(vocab.id_of(word))
    return ids[:max_tokens]


class EncoderBlock:
    """Single-head self-attention plus a two-layer feedforward, post-norm."""

    def __init__(self, dim: int, rng: np.random.Generator, ff_dim: int | None = None):
        ff_dim = ff_dim or 2 * dim
        self.dim = dim
        self.attn_q_w = ad.xavier_uniform(rng, dim, dim)
        self.attn_q_b = ad.zeros_param(dim)
        self.attn_k_w = ad.xavier_uniform(rng, dim, dim)
        self.attn_k_b = ad.zeros_param(dim)
        self.attn_v_w = ad.xavier_uniform(rng, dim, dim)
        self.attn_v_b = ad.zeros_param(dim)
        self.attn_o_w = ad.xavier_uniform(rng, dim, dim)
        self.attn_o_b = ad.zeros_param(dim)
        self.norm1_gain = ad.ones_param(dim)
        self.norm1_bias = ad.zeros_param(dim)
        self.ff1_w = ad.xavier_uniform(rng, dim, ff_dim)
        self.ff1_b = ad.zeros_param(ff_dim)
        self.ff2_w = ad.xavier_uniform(rng, ff_dim, dim)
        self.ff2_b = ad.zeros_param(dim)
        self.norm2_gain = ad.ones_param(dim)
        self.norm2_bias = ad.zeros_param(dim)
        self.trainable = True

    _PARAM_FIELDS = (
        "attn_q_w", "attn_q_b", "attn_k_w", "attn_k_b", "attn_v_w", "attn_v_b",
        "attn_o_w", "attn_o_b", "norm1_gain", "norm1_bias",
        "ff1_w", "ff1_b", "ff2_w", "ff2_b", "norm2_gain", "norm2_bias",
    )

    def named_params(self):
        for name in self._PARAM_FIELDS:
            yield name, getattr(self, name)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        for _, p in self.named_params():
            p.requires_grad = self.trainable

    def forward(self, x: Tensor) -> Tensor:
        q = ad.linear(x, self.attn_q_w, self.attn_q_b)
        k = ad.linear(x, self.attn_k_w, self.attn_k_b)
        v = ad.linear(x, self.attn_v_w, self.attn_v_b)
        scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(self.dim))
        ctx = ad.matmul(ad.softmax_rows(scores), v)
        attended = ad.linear(ctx, self.attn_o_w, self.attn_o_b)
        x = ad.layer_norm_rows(ad.add(x, attended), self.norm1_gain, self.norm1_bias)
        hidden = ad.relu(ad.linear(x, self.ff1_w, self.ff1_b))
        ff = ad.linear(hidden, self.ff2_w, self.ff2_b)
        return ad.layer_norm_rows(ad.add(x, ff), self.norm2_gain, self.norm2_bias)


class TextEncoder:
    """Token embeddings, learned positions, and a stack of encoder blocks."""

    def __init__(self, vocab_size: int, dim: int, depth: int,
                 rng: np.random.Generator, max_len: int = MAX_TOKENS):
        if vocab_size < NUM_RESERVED:
            raise DataError(f"vocab size must cover the {NUM_RESERVED} reserved ids")
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.token_emb = ad.normal_param(rng, (vocab_size, dim))
        self.pos_emb = ad.normal_param(rng, (max_len, dim))
        self.blocks = [EncoderBlock(dim, rng) for _ in range(depth)]
        self.embeddings_trainable = True

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def encode(self, token_ids: Sequence[int], training: bool = False) -> Tensor:
        """Per-token hidden states, shape [len, dim]."""
        ids = list(token_ids)
        if not ids:
            raise DataError("cannot encode an empty token sequence")
        if len(ids) > self.max_len:
            raise DataError(f"sequence of {len(ids)} tokens exceeds max length {self.max_len}")
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise DataError(f"token id {i} outside vocabulary of size {self.vocab_size}")
        h = ad.take_rows(self.token_emb, ids)
        if self.blocks:
            h = ad.add(h, ad.take_rows(self.pos_emb, range(len(ids))))
            for block in self.blocks:
                h = block.forward(h)
        return h

    def set_trainable(self, policy: str) -> None:
        """Apply a training policy: 'all', 'last' (last block only) or 'none'.

        The embedding tables follow 'all' only.
        """
        policy = {"last_block_only": "last"}.get(policy, policy)
        if policy == "all":
            flags = [True] * self.depth
            emb = True
        elif policy == "last":
            if not self.blocks:
                raise ValueError("policy 'last' needs at least one encoder block")
            flags = [False] * (self.depth - 1) + [True]
            emb = False
        elif policy == "none":
            flags = [False] * self.depth
            emb = False
        else:
            raise ValueError(f"unknown encoder training policy {policy!r}")
        self.embeddings_trainable = emb
        self.token_emb.requires_grad = emb
        self.pos_emb.requires_grad = emb
        for block, flag in zip(self.blocks, flags):
            block.set_trainable(flag)

    def trainable_flags(self) -> list[bool]:
        return [block.trainable for block in self.blocks]

    def named_params(self):
        yield "token_emb", self.token_emb
        yield "pos_emb", self.pos_emb
        for i, block in enumerate(self.blocks):
            for name, p in block.named_params():
                yield f"block{i}.{name}", p


def pool(h: Tensor, strategy: str) -> Tensor:
    """Collapse per-token states [len, d] to a fixed vector [d]."""
    if h.data.ndim != 2 or h.data.shape[0] == 0:
        raise ContractError(f"pool needs a non-empty rank-2 input, got shape {h.data.shape}")
    if strategy == "cls":
        return ad.reshape(ad.take_rows(h, [0]), (h.data.shape[1],))
    if strategy == "mean":
        return ad.mean_rows(h)
    if strategy == "max":
        return ad.max_rows(h)
    raise ValueError(f"unknown pooling strategy {strategy!r}")
