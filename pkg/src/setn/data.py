"""Input formats, the built-in sector/industry taxonomy, synthetic data, and
embedding import/export.

File formats (all bit-exact):
  nodes.jsonl   one {"ticker", "text", "topix17", "topix33"} object per line
  edges.tsv     one "src<TAB>dst" integer pair per line, direction cause -> effect
  themes.jsonl  one {"theme", "members": [tickers]} object per line
  vocab.txt     one token per line, line k holds id k + 3
  embeddings    .tsv (header "id\\tdim=<d>") or binary ("SETE", n, d, float32 LE)
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError
from .graph import StockGraph
from .text import Vocab

logger = logging.getLogger(__name__)

# Tokyo Stock Exchange sector/industry hierarchy. Names are transcribed
# verbatim from the published table, including its two misspellings
# ("PHAMACEUTICAL", "ELECTRIC POWERT&GAS"); corrected spellings are
# accepted as aliases on load.
_INDUSTRY_SECTOR_PAIRS: tuple[tuple[str, str], ...] = (
    ("Fishery, Agriculture & Forestry", "FOODS"),
    ("Foods", "FOODS"),
    ("Mining", "ENERGY RESOURCES"),
    ("Oil and Coal Products", "ENERGY RESOURCES"),
    ("Construction", "CONSTRUCTION&MATERIALS"),
    ("Metal Products", "CONSTRUCTION&MATERIALS"),
    ("Glass and Ceramics Products", "CONSTRUCTION&MATERIALS"),
    ("Textiles and Apparels", "RAW MATERIALS&CHEMICALS"),
    ("Pulp and Paper", "RAW MATERIALS&CHEMICALS"),
    ("Chemicals", "RAW MATERIALS&CHEMICALS"),
    ("Pharmaceutical", "PHAMACEUTICAL"),
    ("Rubber Products", "AUTOMOBILES&TRANSPORTATION EQUIPMENT"),
    ("Transportation Equipment", "AUTOMOBILES&TRANSPORTATION EQUIPMENT"),
    ("Iron and Steel", "STEEL&NONFERROUS METALS"),
    ("Nonferrous Metals", "STEEL&NONFERROUS METALS"),
    ("Machinery", "MACHINERY"),
    ("Electric Appliances", "ELECTRIC APPLIANCES&PRECISION INSTRUMENTS"),
    ("Precision Instruments", "ELECTRIC APPLIANCES&PRECISION INSTRUMENTS"),
    ("Other Products", "IT&SERVICES, OTHERS"),
    ("Information & Communication", "IT&SERVICES, OTHERS"),
    ("Services", "IT&SERVICES, OTHERS"),
    ("Electric Power and Gas", "ELECTRIC POWERT&GAS"),
    ("Land Transportation", "TRANSPORTATION&LOGISTICS"),
    ("Marine Transportation", "TRANSPORTATION&LOGISTICS"),
    ("Air Transportation", "TRANSPORTATION&LOGISTICS"),
    ("Warehousing and Harbor Transportation", "TRANSPORTATION&LOGISTICS"),
    ("Wholesale Trade", "COMMERCIAL&WHOLESALE TRADE"),
    ("Retail Trade", "RETAIL TRADE"),
    ("Banks", "BANKS"),
    ("Securities and Commodities Futures", "FINANCIAL(EXCEPT BANKS)"),
    ("Insurance", "FINANCIAL(EXCEPT BANKS)"),
    ("Other Financing Business", "FINANCIAL(EXCEPT BANKS)"),
    ("Real Estate", "REAL ESTATE"),
)

_SECTOR_ALIASES = {
    "PHARMACEUTICAL": "PHAMACEUTICAL",
    "ELECTRIC POWER&GAS": "ELECTRIC POWERT&GAS",
}


def _norm_label(name: str) -> str:
    collapsed = " ".join(name.split())
    return re.sub(r"\s*&\s*", "&", collapsed).casefold()


@dataclass
class StockRecord:
    """One stock: identifier, description text, and its two taxonomy labels."""

    stock_id: int
    ticker: str
    text: str
    sector: int     # 17-level class id
    industry: int   # 33-level class id


@dataclass
class Taxonomy:
    """Two-level label hierarchy; every industry maps to exactly one sector."""

    sectors: list[str]
    industries: list[str]
    industry_to_sector: dict[int, int]

    def __post_init__(self):
        if len(set(self.sectors)) != len(self.sectors):
            raise DataError("duplicate sector names")
        if len(set(self.industries)) != len(self.industries):
            raise DataError("duplicate industry names")
        missing = set(range(len(self.industries))) - set(self.industry_to_sector)
        if missing:
            raise DataError(f"industries without a sector: {sorted(missing)}")
        self._sector_ids = {_norm_label(s): i for i, s in enumerate(self.sectors)}
        self._industry_ids = {_norm_label(s): i for i, s in enumerate(self.industries)}
        for alias, canonical in _SECTOR_ALIASES.items():
            key = _norm_label(canonical)
            if key in self._sector_ids:
                self._sector_ids.setdefault(_norm_label(alias), self._sector_ids[key])

    @property
    def n_sectors(self) -> int:
        return len(self.sectors)

    @property
    def n_industries(self) -> int:
        return len(self.industries)

    def sector_id(self, name: str) -> int:
        key = _norm_label(name)
        if key not in self._sector_ids:
            raise DataError(f"unknown sector label {name!r}")
        return self._sector_ids[key]

    def industry_id(self, name: str) -> int:
        key = _norm_label(name)
        if key not in self._industry_ids:
            raise DataError(f"unknown industry label {name!r}")
        return self._industry_ids[key]

    def sector_of(self, industry: int) -> int:
        return self.industry_to_sector[industry]

    @classmethod
    def default(cls) -> "Taxonomy":
        sectors: list[str] = []
        industries: list[str] = []
        mapping: dict[int, int] = {}
        for industry, sector in _INDUSTRY_SECTOR_PAIRS:
            if sector not in sectors:
                sectors.append(sector)
            mapping[len(industries)] = sectors.index(sector)
            industries.append(industry)
        return cls(sectors, industries, mapping)

    @classmethod
    def from_file(cls, path) -> "Taxonomy":
        """JSON with "sectors", "industries" and "industry_to_sector"
        (industry name to sector name)."""
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        sectors = list(obj["sectors"])
        industries = list(obj["industries"])
        mapping = {}
        for ind_name, sec_name in obj["industry_to_sector"].items():
            mapping[industries.index(ind_name)] = sectors.index(sec_name)
        return cls(sectors, industries, mapping)

    def to_file(self, path) -> None:
        obj = {
            "sectors": self.sectors,
            "industries": self.industries,
            "industry_to_sector": {self.industries[i]: self.sectors[s]
                                   for i, s in sorted(self.industry_to_sector.items())},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, sort_keys=True, indent=2)
            fh.write("\n")


DEFAULT_TAXONOMY = Taxonomy.default()


@dataclass
class ThemeSet:
    """Named stock groups for the thematic-fund task."""

    themes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.themes)

    def items(self):
        return self.themes.items()


# ---------------------------------------------------------------------------
# loaders


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_nodes(path, taxonomy: Optional[Taxonomy] = None) -> tuple[list[StockRecord], dict[str, int]]:
    """Parse nodes.jsonl into records with dense ids; also return ticker -> id.

    The industry label (topix33) is required; the sector label (topix17) is
    optional and implied by the taxonomy when absent.
    """
    taxonomy = taxonomy or DEFAULT_TAXONOMY
    records: list[StockRecord] = []
    id_map: dict[str, int] = {}
    for lineno, obj in _iter_jsonl(path):
        for key in ("ticker", "text", "topix33"):
            if key not in obj:
                raise DataError(f"{path}:{lineno}: missing key {key!r}")
        ticker = str(obj["ticker"])
        if ticker in id_map:
            raise DataError(f"{path}:{lineno}: duplicate ticker {ticker!r}")
        industry = taxonomy.industry_id(str(obj["topix33"]))
        if "topix17" in obj and obj["topix17"] is not None:
            sector = taxonomy.sector_id(str(obj["topix17"]))
        else:
            sector = taxonomy.sector_of(industry)
        stock_id = len(records)
        id_map[ticker] = stock_id
        records.append(StockRecord(stock_id, ticker, str(obj["text"]), sector, industry))
    return records, id_map


def validate_taxonomy(records: Sequence[StockRecord], taxonomy: Taxonomy) -> list[str]:
    """List label-hierarchy violations; an empty list means all consistent."""
    violations = []
    for r in records:
        expected = taxonomy.sector_of(r.industry)
        if r.sector != expected:
            violations.append(
                f"stock {r.stock_id} ({r.ticker}): industry {taxonomy.industries[r.industry]!r} "
                f"belongs to sector {taxonomy.sectors[expected]!r}, not {taxonomy.sectors[r.sector]!r}"
            )
    return violations


def load_edges(path, n_nodes: int) -> StockGraph:
    """Parse edges.tsv into a directed graph. Self-loops and duplicates are
    dropped with a warning."""
    edges: list[tuple[int, int]] = []
    seen = set()
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'src<TAB>dst', got {line!r}")
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer node id in {line!r}") from exc
            if not (0 <= s < n_nodes and 0 <= d < n_nodes):
                raise DataError(f"{path}:{lineno}: edge ({s}, {d}) outside node range [0, {n_nodes})")
            if s == d or (s, d) in seen:
                dropped += 1
                continue
            seen.add((s, d))
            edges.append((s, d))
    if dropped:
        logger.warning("%s: dropped %d self-loop/duplicate edges", path, dropped)
    return StockGraph(n_nodes, tuple(edges), directed=True)


def load_themes(path, id_map: Mapping[str, int],
                universe: Optional[Iterable[int]] = None,
                min_size: int = 16) -> ThemeSet:
    """Parse themes.jsonl, mapping member tickers to ids.

    Members outside ``id_map`` (or outside ``universe`` when given) are
    removed; themes that end up below ``min_size`` members are dropped.
    """
    allowed = set(universe) if universe is not None else None
    themes: dict[str, tuple[int, ...]] = {}
    dropped = 0
    for lineno, obj in _iter_jsonl(path):
        if "theme" not in obj or "members" not in obj:
            raise DataError(f"{path}:{lineno}: theme line needs 'theme' and 'members'")
        name = str(obj["theme"])
        if name in themes:
            raise DataError(f"{path}:{lineno}: duplicate theme {name!r}")
        members = []
        for ticker in obj["members"]:
            sid = id_map.get(str(ticker))
            if sid is None:
                continue
            if allowed is not None and sid not in allowed:
                continue
            if sid not in members:
                members.append(sid)
        if len(members) < max(min_size, 2):
            dropped += 1
            continue
        themes[name] = tuple(members)
    if dropped:
        logger.warning("%s: dropped %d themes below %d in-universe members", path, dropped, min_size)
    return ThemeSet(themes)


# ---------------------------------------------------------------------------
# synthetic universes


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the synthetic universe generator.

    ``graph_signal`` is the within-class preference of incoming edges,
    ``direction_signal`` routes the uninformative outgoing edges onto a few
    hub nodes, so at 1.0 only the cause side of an edge carries label
    information. ``text_signal`` is the share of class-specific tokens.
    """

    n: int = 300
    sectors: int = 17
    industries: int = 33
    vocab_size: int = 400
    tokens_per_doc: int = 24
    avg_degree: int = 6
    graph_signal: float = 0.6
    direction_signal: float = 0.0
    text_signal: float = 0.6
    theme_count: int = 8
    seed: int = 0


@dataclass
class Dataset:
    records: list[StockRecord]
    graph: StockGraph
    themes: ThemeSet
    taxonomy: Taxonomy


def generate_synthetic(spec: GeneratorSpec) -> Dataset:
    """Deterministic synthetic universe: labels first, then class-conditional
    texts, preferential edges, and themes."""
    if spec.industries < spec.sectors:
        raise DataError("need at least as many industries as sectors")
    if spec.industries > spec.n:
        raise DataError(f"{spec.industries} industries exceed {spec.n} stocks")
    if spec.sectors < 1 or spec.n < 2:
        raise DataError("universe needs at least 2 stocks and 1 sector")
    shared_vocab = max(2, spec.vocab_size // 3)
    per_class = (spec.vocab_size - shared_vocab) // spec.industries
    if per_class < 1:
        raise DataError(f"vocab size {spec.vocab_size} too small for {spec.industries} industries")

    rng = np.random.default_rng(spec.seed)

    # surjective industry -> sector map
    sector_of = [i if i < spec.sectors else int(rng.integers(spec.sectors))
                 for i in range(spec.industries)]
    taxonomy = Taxonomy(
        sectors=[f"SECTOR{i:02d}" for i in range(spec.sectors)],
        industries=[f"Industry {i:02d}" for i in range(spec.industries)],
        industry_to_sector=dict(enumerate(sector_of)),
    )

    # balanced industry labels
    labels = np.array([i % spec.industries for i in range(spec.n)])
    rng.shuffle(labels)
    by_class = [np.flatnonzero(labels == c) for c in range(spec.industries)]

    # class-conditional token pools over a shared background vocabulary
    words = [f"w{j:04d}" for j in range(spec.vocab_size)]
    shared = words[:shared_vocab]
    pools = [words[shared_vocab + c * per_class: shared_vocab + (c + 1) * per_class]
             for c in range(spec.industries)]

    records = []
    for i in range(spec.n):
        pool_c = pools[labels[i]]
        toks = []
        for _ in range(spec.tokens_per_doc):
            if rng.random() < spec.text_signal:
                toks.append(pool_c[int(rng.integers(len(pool_c)))])
            else:
                toks.append(shared[int(rng.integers(len(shared)))])
        records.append(StockRecord(i, f"S{i:04d}", " ".join(toks),
                                   sector_of[labels[i]], int(labels[i])))

    # informative in-edges plus noise out-edges; at direction_signal 1 the
    # noise lands on hub nodes, leaving in-neighborhoods clean
    hubs = np.sort(rng.choice(spec.n, size=max(2, spec.n // 40), replace=False))
    edges: set[tuple[int, int]] = set()

    def _other(v: int) -> int:
        u = int(rng.integers(spec.n - 1))
        return u if u < v else u + 1

    for v in range(spec.n):
        mates = by_class[labels[v]]
        for _ in range(spec.avg_degree):
            if rng.random() < spec.graph_signal and len(mates) > 1:
                u = v
                while u == v:
                    u = int(mates[rng.integers(len(mates))])
            else:
                u = _other(v)
            edges.add((u, v))
        for _ in range(max(1, spec.avg_degree // 2)):
            if rng.random() < spec.direction_signal:
                w = int(hubs[rng.integers(len(hubs))])
                if w == v:
                    continue
            else:
                w = _other(v)
            edges.add((v, w))

    # half label-correlated themes, half label-orthogonal
    themes: dict[str, tuple[int, ...]] = {}
    for t in range(spec.theme_count):
        size = int(rng.integers(12, 21))
        if t % 2 == 0:
            c = int(rng.integers(spec.industries))
            members = by_class[c]
            size = min(size, len(members))
            chosen = rng.choice(members, size=size, replace=False)
        else:
            chosen = rng.choice(spec.n, size=min(size, spec.n), replace=False)
        if len(chosen) >= 2:
            themes[f"theme{t:02d}"] = tuple(int(m) for m in np.sort(chosen))

    graph = StockGraph(spec.n, tuple(sorted(edges)), directed=True)
    return Dataset(records, graph, ThemeSet(themes), taxonomy)


def write_dataset(dataset: Dataset, out_dir) -> list[str]:
    """Write nodes.jsonl, edges.tsv, themes.jsonl and vocab.txt; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tax = dataset.taxonomy
    nodes = out / "nodes.jsonl"
    with open(nodes, "w", encoding="utf-8") as fh:
        for r in dataset.records:
            fh.write(json.dumps({
                "ticker": r.ticker,
                "text": r.text,
                "topix17": tax.sectors[r.sector],
                "topix33": tax.industries[r.industry],
            }, sort_keys=True) + "\n")
    edges = out / "edges.tsv"
    with open(edges, "w", encoding="utf-8") as fh:
        for s, d in dataset.graph.edges:
            fh.write(f"{s}\t{d}\n")
    themes = out / "themes.jsonl"
    ticker_of = {r.stock_id: r.ticker for r in dataset.records}
    with open(themes, "w", encoding="utf-8") as fh:
        for name, members in dataset.themes.items():
            fh.write(json.dumps({"theme": name,
                                 "members": [ticker_of[m] for m in members]},
                                sort_keys=True) + "\n")
    vocab = out / "vocab.txt"
    Vocab.build(r.text for r in dataset.records).to_file(vocab)
    taxonomy = out / "taxonomy.json"
    dataset.taxonomy.to_file(taxonomy)
    return [str(nodes), str(edges), str(themes), str(vocab), str(taxonomy)]


# ---------------------------------------------------------------------------
# embedding import/export

_EMB_MAGIC = b"SETE"


def export_embeddings(ids: Sequence, vectors: np.ndarray, path, fmt: str = "tsv") -> None:
    """Write embeddings as TSV (9 significant digits) or 32-bit binary."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise DataError(f"expected a non-empty [n, d] matrix, got shape {vectors.shape}")
    if len(ids) != vectors.shape[0]:
        raise DataError(f"{len(ids)} ids for {vectors.shape[0]} embedding rows")
    n, d = vectors.shape
    if fmt == "tsv":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"id\tdim={d}\n")
            for sid, row in zip(ids, vectors):
                fh.write(str(sid) + "\t" + "\t".join(f"{v:.9g}" for v in row) + "\n")
    elif fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(_EMB_MAGIC)
            fh.write(struct.pack("<II", n, d))
            fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
            for sid in ids:
                encoded = str(sid).encode("utf-8")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
    else:
        raise ValueError(f"unknown embedding format {fmt!r}")


def _parse_id(token: str):
    try:
        return int(token)
    except ValueError:
        return token


def load_embeddings(path) -> tuple[list, np.ndarray]:
    """Read embeddings written by ``export_embeddings`` (either format)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _EMB_MAGIC:
            n, d = struct.unpack("<II", fh.read(8))
            raw = fh.read(n * d * 4)
            if len(raw) != n * d * 4:
                raise DataError(f"{path}: truncated binary embedding block")
            vectors = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, d)
            ids = []
            for _ in range(n):
                (length,) = struct.unpack("<I", fh.read(4))
                ids.append(_parse_id(fh.read(length).decode("utf-8")))
            return ids, vectors
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        m = re.fullmatch(r"id\tdim=(\d+)", header)
        if not m:
            raise DataError(f"{path}: missing embedding TSV header")
        d = int(m.group(1))
        ids, rows = [], []
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != d + 1:
                raise DataError(f"{path}:{lineno}: expected {d + 1} columns, got {len(parts)}")
            ids.append(_parse_id(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    return ids, np.asarray(rows, dtype=np.float64)
