"""Retrieval evaluation: related-company MAP@K, the thematic-fund metric,
and the ablation grid runner.

All metrics are pure functions over an immutable embedding matrix. Nearest
neighbors use cosine similarity with the query excluded and ties broken by
ascending stock id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from itertools import product
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Dataset, StockRecord, ThemeSet
from .errors import DataError
from .graph import StockGraph, sample_subgraph

logger = logging.getLogger(__name__)

AXIS_VALUES = {
    "graph_type": ("directed", "undirected"),
    "encoder_policy": ("last", "none"),
    "gnn_kind": ("gcn", "gat"),
    "residual": (True, False),
}


@dataclass
class EmbeddingMatrix:
    """Stock ids paired with their embedding rows."""

    ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DataError(f"expected [n, d] embeddings, got shape {self.vectors.shape}")
        if len(self.ids) != self.vectors.shape[0]:
            raise DataError(f"{len(self.ids)} ids for {self.vectors.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate stock ids in embedding matrix")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0):
            bad = [self.ids[i] for i in np.flatnonzero(norms == 0)]
            raise DataError(f"zero-norm embedding rows for ids {bad}")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("non-finite embedding entries")
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        self._unit = self.vectors / norms[:, None]
        # stable id-ascending base order makes similarity ties deterministic
        self._base = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self._ranked_cache: dict = {}

    def __len__(self) -> int:
        return len(self.ids)

    def row_of(self, stock_id) -> int:
        if stock_id not in self._index:
            raise DataError(f"unknown stock id {stock_id!r}")
        return self._index[stock_id]

    def ranked_neighbors(self, stock_id) -> list:
        """All other ids, most similar first, ties by ascending id.

        Rankings are memoized; the matrix is immutable by convention.
        """
        if stock_id in self._ranked_cache:
            return self._ranked_cache[stock_id]
        row = self.row_of(stock_id)
        sims = self._unit @ self._unit[row]
        base = [i for i in self._base if i != row]
        order = np.argsort(-sims[base], kind="stable")
        ranked = [self.ids[base[j]] for j in order]
        self._ranked_cache[stock_id] = ranked
        return ranked


def cosine_knn(emb: EmbeddingMatrix, query_id, k: int) -> list:
    """Top-k ids by cosine similarity to the query, query excluded."""
    if k >= len(emb):
        raise ValueError(f"k={k} must be smaller than the universe size {len(emb)}")
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    return emb.ranked_neighbors(query_id)[:k]


def average_precision_at_k(relevance: Sequence[int], total_relevant: int, k: int) -> float:
    """AP@k of a ranked binary relevance list.

    Precision is accumulated at each relevant rank and normalized by
    min(k, total_relevant), so a relevance-complete prefix scores 1 even
    when fewer than k relevant items exist in the pool.

    >>> average_precision_at_k([1, 1, 1], 3, 3)
    1.0
    >>> round(average_precision_at_k([1, 0, 1], 3, 3), 4)
    0.5556
    >>> average_precision_at_k([0, 0, 0], 5, 3)
    0.0
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if total_relevant <= 0:
        return 0.0
    hits = 0
    score = 0.0
    for rank, rel in enumerate(relevance[:k], start=1):
        if rel:
            hits += 1
            score += hits / rank
    return score / min(k, total_relevant)


def map_at_k(emb: EmbeddingMatrix, labels: Mapping, ks: Sequence[int]) -> dict[int, float]:
    """Mean AP@k over every stock in the universe; relevance = same label."""
    for sid in emb.ids:
        if sid not in labels:
            raise DataError(f"missing label for stock id {sid!r}")
    totals = {k: 0.0 for k in ks}
    max_k = max(ks)
    for sid in emb.ids:
        label = labels[sid]
        ranked = emb.ranked_neighbors(sid)
        total_relevant = sum(1 for other in emb.ids if other != sid and labels[other] == label)
        rel = [1 if labels[other] == label else 0 for other in ranked[:max_k]]
        for k in ks:
            totals[k] += average_precision_at_k(rel, total_relevant, k)
    n = len(emb)
    return {k: totals[k] / n for k in ks}


def theme_metric(emb: EmbeddingMatrix, themes: ThemeSet,
                 exclude_self: bool = True) -> tuple[float, dict[str, float]]:
    """Fraction of each member's size-of-theme nearest stocks that share its
    theme, averaged per theme and over themes.

    With the query excluded from retrieval a perfectly clustered theme of m
    members tops out at (m - 1) / m.
    """
    per_theme: dict[str, float] = {}
    for name, members in themes.items():
        m = len(members)
        if m < 2:
            raise DataError(f"theme {name!r} needs at least 2 members")
        member_set = set(members)
        missing = [sid for sid in members if sid not in emb._index]
        if missing:
            raise DataError(f"theme {name!r} members missing from embeddings: {missing}")
        hits = 0
        for sid in members:
            if exclude_self:
                retrieved = emb.ranked_neighbors(sid)[:m]
            else:
                retrieved = [sid] + emb.ranked_neighbors(sid)[:m - 1]
            hits += sum(1 for r in retrieved if r in member_set and r != sid)
        per_theme[name] = hits / (m * m)
    overall = float(np.mean(list(per_theme.values()))) if per_theme else 0.0
    return overall, per_theme


# ---------------------------------------------------------------------------
# model evaluation pipeline


def embed_universe(model, graph: StockGraph, records: Sequence[StockRecord],
                   ids: Sequence[int], direction: str = "in",
                   text_cache: Optional[dict] = None) -> EmbeddingMatrix:
    """Embedding matrix for the given stocks, sampling each one's subgraph
    on the (already direction-prepared) graph.

    A model without the residual path can emit an exactly-zero vector (its
    final ReLU saturates); such stocks collapse onto one shared fallback
    direction so cosine ranking stays defined.
    """
    rows = []
    zero_rows = 0
    for sid in ids:
        sub = sample_subgraph(graph, sid, direction)
        recs = [records[m] for m in sub.members]
        vec = model.embed_stock(sub, recs, text_cache=text_cache)
        if not np.any(vec):
            vec = np.full_like(vec, 1.0)
            zero_rows += 1
        rows.append(vec)
    if zero_rows:
        logger.debug("%d of %d embeddings were all-zero; using the shared fallback direction",
                     zero_rows, len(ids))
    return EmbeddingMatrix(list(ids), np.stack(rows))


def evaluate_map(model, graph: StockGraph, records: Sequence[StockRecord],
                 ids: Sequence[int], ks: Sequence[int] = (5, 10, 50),
                 direction: str = "in") -> dict[str, dict[int, float]]:
    """MAP@k for both taxonomy levels over the given evaluation universe."""
    emb = embed_universe(model, graph, records, ids, direction)
    sector_labels = {r.stock_id: r.sector for r in records}
    industry_labels = {r.stock_id: r.industry for r in records}
    return {
        "topix17": map_at_k(emb, sector_labels, ks),
        "topix33": map_at_k(emb, industry_labels, ks),
    }


def run_ablation(dataset: Dataset, base_config, axes: Sequence[str],
                 ks: Sequence[int] = (5, 10, 50)) -> list[dict]:
    """Train one model per configuration cell (shared seed and split) and
    report test MAP@k for both taxonomies, one row per cell."""
    from .training import build_model, prepare_graph, split_dataset, train
    from .text import Vocab
    from .errors import SetnError

    axes = list(axes)
    if not axes:
        raise ValueError("ablation needs at least one axis")
    for axis in axes:
        if axis not in AXIS_VALUES:
            raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXIS_VALUES)}")

    records = dataset.records
    vocab = Vocab.build(r.text for r in records)
    ids = [r.stock_id for r in records]
    split = split_dataset(ids, base_config.proportions, base_config.seed)

    rows = []
    for values in product(*(AXIS_VALUES[a] for a in axes)):
        overrides = {}
        cell = {}
        for axis, value in zip(axes, values):
            cell[axis] = value
            if axis == "graph_type":
                overrides["directed"] = value == "directed"
            elif axis == "encoder_policy":
                overrides["encoder_train"] = value
            elif axis == "gnn_kind":
                overrides["gnn"] = value
            elif axis == "residual":
                overrides["residual"] = value
        config = replace(base_config, **overrides)
        row = dict(cell)
        try:
            model = build_model(config, vocab,
                                n_sectors=dataset.taxonomy.n_sectors,
                                n_industries=dataset.taxonomy.n_industries)
            train(model, dataset.graph, records, split, config)
            g = prepare_graph(dataset.graph, config)
            metrics = evaluate_map(model, g, records, split.test, ks,
                                   direction=config.neighbor_direction)
            row["topix17"] = {f"map@{k}": v for k, v in metrics["topix17"].items()}
            row["topix33"] = {f"map@{k}": v for k, v in metrics["topix33"].items()}
        except SetnError as exc:
            row["error"] = str(exc)
        rows.append(row)
    return rows


def format_map_table(rows: list[dict]) -> str:
    """Aligned-column rendering of ablation / evaluation rows."""
    if not rows:
        return "(no rows)"
    metric_cols = []
    for level in ("topix17", "topix33"):
        for row in rows:
            for key in row.get(level, {}):
                col = (level, key)
                if col not in metric_cols:
                    metric_cols.append(col)
    config_cols = [k for k in rows[0] if k not in ("topix17", "topix33", "error")]
    header = config_cols + [f"{lvl}:{key}" for lvl, key in metric_cols] + ["error"]
    table = [header]
    for row in rows:
        cells = [str(row.get(c, "")) for c in config_cols]
        for lvl, key in metric_cols:
            value = row.get(lvl, {}).get(key)
            cells.append("" if value is None else f"{value:.3f}")
        cells.append(row.get("error", ""))
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table]
    return "\n".join(lines)
