import json

import numpy as np
import pytest

from setn.data import (DEFAULT_TAXONOMY, GeneratorSpec, StockRecord,
                       export_embeddings,
                       generate_synthetic, load_edges, load_embeddings,
                       load_nodes, load_themes, validate_taxonomy,
                       write_dataset)
from setn.errors import DataError


# ---------------------------------------------------------------------------
# taxonomy


def test_default_taxonomy_has_17_sectors_and_33_industries():
    assert DEFAULT_TAXONOMY.n_sectors == 17
    assert DEFAULT_TAXONOMY.n_industries == 33
    assert set(DEFAULT_TAXONOMY.industry_to_sector) == set(range(33))


def test_taxonomy_lookup_and_mapping():
    tax = DEFAULT_TAXONOMY
    land = tax.industry_id("Land Transportation")
    assert tax.sectors[tax.sector_of(land)] == "TRANSPORTATION&LOGISTICS"
    assert tax.sector_id("RETAIL TRADE") == tax.sector_of(tax.industry_id("Retail Trade"))


def test_taxonomy_accepts_normalized_aliases():
    tax = DEFAULT_TAXONOMY
    assert tax.sector_id("PHARMACEUTICAL") == tax.sector_id("PHAMACEUTICAL")
    assert tax.sector_id("ELECTRIC POWER&GAS") == tax.sector_id("ELECTRIC POWERT&GAS")
    assert tax.sector_id("retail   trade") == tax.sector_id("RETAIL TRADE")


def test_taxonomy_rejects_unknown_label():
    with pytest.raises(DataError):
        DEFAULT_TAXONOMY.industry_id("Spacecraft")


# ---------------------------------------------------------------------------
# node loading


def _write_nodes(tmp_path, lines):
    path = tmp_path / "nodes.jsonl"
    path.write_text("\n".join(json.dumps(obj) for obj in lines) + "\n")
    return path


def test_load_nodes_valid_file(tmp_path):
    path = _write_nodes(tmp_path, [
        {"ticker": "A", "text": "steel", "topix17": "BANKS", "topix33": "Banks"},
        {"ticker": "B", "text": "ships", "topix17": "RETAIL TRADE", "topix33": "Retail Trade"},
        {"ticker": "C", "text": "rails", "topix17": "TRANSPORTATION&LOGISTICS",
         "topix33": "Land Transportation"},
    ])
    records, id_map = load_nodes(path)
    assert len(records) == 3
    assert id_map == {"A": 0, "B": 1, "C": 2}


def test_load_nodes_derives_sector_from_industry(tmp_path):
    path = _write_nodes(tmp_path, [
        {"ticker": "A", "text": "rails", "topix33": "Land Transportation"},
    ])
    records, _ = load_nodes(path)
    tax = DEFAULT_TAXONOMY
    assert records[0].industry == tax.industry_id("Land Transportation")
    assert records[0].sector == tax.sector_id("TRANSPORTATION&LOGISTICS")


def test_load_nodes_duplicate_ticker(tmp_path):
    path = _write_nodes(tmp_path, [
        {"ticker": "A", "text": "x", "topix33": "Banks"},
        {"ticker": "A", "text": "y", "topix33": "Banks"},
    ])
    with pytest.raises(DataError) as exc:
        load_nodes(path)
    assert "'A'" in str(exc.value)


def test_load_nodes_reports_line_numbers(tmp_path):
    path = tmp_path / "nodes.jsonl"
    path.write_text('{"ticker": "A", "text": "x", "topix33": "Banks"}\n{broken\n')
    with pytest.raises(DataError) as exc:
        load_nodes(path)
    assert ":2" in str(exc.value)


def test_load_nodes_unknown_label(tmp_path):
    path = _write_nodes(tmp_path, [{"ticker": "A", "text": "x", "topix33": "Warp Drives"}])
    with pytest.raises(DataError):
        load_nodes(path)


# ---------------------------------------------------------------------------
# taxonomy validation


def test_validate_taxonomy_consistent_and_violating():
    tax = DEFAULT_TAXONOMY
    ok = StockRecord(0, "A", "", tax.sector_id("RETAIL TRADE"), tax.industry_id("Retail Trade"))
    bad = StockRecord(1, "B", "", tax.sector_id("RETAIL TRADE"), tax.industry_id("Banks"))
    assert validate_taxonomy([ok], tax) == []
    violations = validate_taxonomy([ok, bad], tax)
    assert len(violations) == 1 and "B" in violations[0]


def test_validate_taxonomy_empty_is_ok():
    assert validate_taxonomy([], DEFAULT_TAXONOMY) == []


# ---------------------------------------------------------------------------
# edges and themes


def test_load_edges_parses_and_cleans(tmp_path):
    path = tmp_path / "edges.tsv"
    path.write_text("0\t1\n1\t2\n1\t2\n2\t2\n")
    g = load_edges(path, 3)
    assert set(g.edges) == {(0, 1), (1, 2)}


def test_load_edges_rejects_bad_lines(tmp_path):
    path = tmp_path / "edges.tsv"
    path.write_text("0\tx\n")
    with pytest.raises(DataError):
        load_edges(path, 3)
    path.write_text("0\t9\n")
    with pytest.raises(DataError):
        load_edges(path, 3)


def _write_themes(tmp_path, themes):
    path = tmp_path / "themes.jsonl"
    path.write_text("\n".join(json.dumps({"theme": n, "members": m})
                              for n, m in themes) + "\n")
    return path


def test_load_themes_filters_to_universe_and_min_size(tmp_path):
    id_map = {f"T{i}": i for i in range(30)}
    big = [f"T{i}" for i in range(20)] + ["UNLISTED"]
    small = [f"T{i}" for i in range(14)]
    path = _write_themes(tmp_path, [("big", big), ("small", small)])
    universe = range(16)  # only T0..T15 in the evaluation universe
    themes = load_themes(path, id_map, universe=universe, min_size=15)
    assert set(themes.themes) == {"big"}
    assert len(themes.themes["big"]) == 16


def test_load_themes_drops_below_min_size(tmp_path):
    id_map = {f"T{i}": i for i in range(20)}
    path = _write_themes(tmp_path, [("small", [f"T{i}" for i in range(14)])])
    themes = load_themes(path, id_map, min_size=15)
    assert len(themes) == 0


def test_load_themes_empty_file(tmp_path):
    path = tmp_path / "themes.jsonl"
    path.write_text("")
    assert len(load_themes(path, {}, min_size=2)) == 0


# ---------------------------------------------------------------------------
# synthetic generator


def test_generator_is_deterministic_per_seed(tmp_path):
    spec = GeneratorSpec(n=40, sectors=3, industries=5, vocab_size=80,
                         tokens_per_doc=8, theme_count=4, seed=9)
    d1 = generate_synthetic(spec)
    d2 = generate_synthetic(spec)
    out1, out2 = tmp_path / "one", tmp_path / "two"
    write_dataset(d1, out1)
    write_dataset(d2, out2)
    for name in ("nodes.jsonl", "edges.tsv", "themes.jsonl", "vocab.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_generator_rejects_infeasible_specs():
    with pytest.raises(DataError):
        generate_synthetic(GeneratorSpec(n=4, industries=10, sectors=2))
    with pytest.raises(DataError):
        generate_synthetic(GeneratorSpec(sectors=5, industries=3))


def test_pure_text_signal_supports_centroid_classifier():
    spec = GeneratorSpec(n=120, sectors=4, industries=6, vocab_size=200,
                         tokens_per_doc=16, text_signal=1.0, graph_signal=0.0,
                         direction_signal=0.0, seed=5)
    ds = generate_synthetic(spec)
    vocab = sorted({w for r in ds.records for w in r.text.split()})
    index = {w: i for i, w in enumerate(vocab)}
    counts = np.zeros((len(ds.records), len(vocab)))
    for r in ds.records:
        for w in r.text.split():
            counts[r.stock_id, index[w]] += 1
    labels = np.array([r.industry for r in ds.records])
    centroids = np.stack([counts[labels == c].mean(axis=0) for c in range(6)])
    predicted = np.argmin(
        ((counts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
    accuracy = (predicted == labels).mean()
    assert accuracy > 0.9


def _node_weighted_mi(pairs_by_node, n_classes):
    """MI between a node's label and its neighbor labels, nodes equally weighted."""
    joint = np.zeros((n_classes, n_classes))
    for label, neigh_labels in pairs_by_node:
        if not neigh_labels:
            continue
        w = 1.0 / len(neigh_labels)
        for nl in neigh_labels:
            joint[label, nl] += w
    total = joint.sum()
    if total == 0:
        return 0.0
    joint /= total
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (px @ py)[mask])).sum())


def test_direction_signal_concentrates_information_on_in_edges():
    spec = GeneratorSpec(n=200, sectors=4, industries=6, vocab_size=200,
                         tokens_per_doc=8, graph_signal=0.9,
                         direction_signal=1.0, seed=2)
    ds = generate_synthetic(spec)
    labels = {r.stock_id: r.industry for r in ds.records}
    in_pairs = [(labels[v], [labels[u] for u, d in ds.graph.edges if d == v])
                for v in range(spec.n)]
    out_pairs = [(labels[v], [labels[d] for u, d in ds.graph.edges if u == v])
                 for v in range(spec.n)]
    mi_in = _node_weighted_mi(in_pairs, spec.industries)
    mi_out = _node_weighted_mi(out_pairs, spec.industries)
    assert mi_in > mi_out


def test_generated_labels_respect_taxonomy():
    ds = generate_synthetic(GeneratorSpec(n=50, sectors=4, industries=7, seed=3))
    assert validate_taxonomy(ds.records, ds.taxonomy) == []


def test_dataset_roundtrip_through_files(tmp_path):
    spec = GeneratorSpec(n=30, sectors=3, industries=5, vocab_size=60,
                         tokens_per_doc=6, theme_count=2, seed=11)
    ds = generate_synthetic(spec)
    write_dataset(ds, tmp_path)
    records, id_map = load_nodes(tmp_path / "nodes.jsonl", ds.taxonomy)
    graph = load_edges(tmp_path / "edges.tsv", len(records))
    assert [(r.ticker, r.sector, r.industry) for r in records] == \
           [(r.ticker, r.sector, r.industry) for r in ds.records]
    assert set(graph.edges) == set(ds.graph.edges)
    themes = load_themes(tmp_path / "themes.jsonl", id_map, min_size=2)
    assert themes.themes == ds.themes.themes


# ---------------------------------------------------------------------------
# embedding export / import


def test_export_tsv_shape(tmp_path):
    path = tmp_path / "emb.tsv"
    export_embeddings(["A", "B"], np.arange(6.0).reshape(2, 3) + 1.0, path, "tsv")
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 3
    assert lines[0] == "id\tdim=3"


def test_tsv_roundtrip_ids_and_values(tmp_path):
    path = tmp_path / "emb.tsv"
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(5, 4))
    export_embeddings([10, 2, 33, 4, 5], vectors, path, "tsv")
    ids, loaded = load_embeddings(path)
    assert ids == [10, 2, 33, 4, 5]
    assert np.max(np.abs(loaded - vectors)) < 1e-8


def test_binary_roundtrip_within_float32(tmp_path):
    path = tmp_path / "emb.bin"
    rng = np.random.default_rng(1)
    vectors = rng.normal(size=(4, 6))
    export_embeddings(["S1", "S2", "S3", "S4"], vectors, path, "binary")
    ids, loaded = load_embeddings(path)
    assert ids == ["S1", "S2", "S3", "S4"]
    assert np.max(np.abs(loaded - vectors)) < 1e-6  # float32 rounding


def test_reimported_tsv_preserves_knn_ranking(tmp_path):
    from setn.evaluation import EmbeddingMatrix, cosine_knn
    rng = np.random.default_rng(2)
    vectors = rng.normal(size=(12, 5))
    ids = list(range(12))
    path = tmp_path / "emb.tsv"
    export_embeddings(ids, vectors, path, "tsv")
    loaded_ids, loaded = load_embeddings(path)
    original = EmbeddingMatrix(ids, vectors)
    reloaded = EmbeddingMatrix(loaded_ids, loaded)
    for q in ids:
        assert cosine_knn(original, q, 5) == cosine_knn(reloaded, q, 5)


def test_export_load_export_is_stable(tmp_path):
    rng = np.random.default_rng(3)
    vectors = rng.normal(size=(3, 4))
    first = tmp_path / "a.tsv"
    second = tmp_path / "b.tsv"
    export_embeddings(["X", "Y", "Z"], vectors, first, "tsv")
    ids, loaded = load_embeddings(first)
    export_embeddings(ids, loaded, second, "tsv")
    assert first.read_bytes() == second.read_bytes()


def test_export_rejects_bad_input(tmp_path):
    with pytest.raises(DataError):
        export_embeddings(["A"], np.zeros((0, 3)), tmp_path / "x.tsv")
    with pytest.raises(DataError):
        export_embeddings(["A", "B"], np.zeros((1, 3)), tmp_path / "x.tsv")


# ---------------------------------------------------------------------------
# zero-signal universes are uninformative for training (slow-ish, kept small)


def test_zero_signal_training_matches_random_baseline():
    from setn.evaluation import EmbeddingMatrix, embed_universe, map_at_k
    from setn.text import Vocab
    from setn.training import TrainConfig, build_model, prepare_graph, split_dataset, train

    trained_scores, random_scores = [], []
    for seed in range(5):
        spec = GeneratorSpec(n=150, sectors=3, industries=4, vocab_size=100,
                             tokens_per_doc=8, avg_degree=4, graph_signal=0.0,
                             direction_signal=0.0, text_signal=0.0, seed=seed)
        ds = generate_synthetic(spec)
        cfg = TrainConfig(epochs=2, hidden_dim=8, encoder_depth=1, seed=seed,
                          max_tokens=16)
        vocab = Vocab.build(r.text for r in ds.records)
        ids = [r.stock_id for r in ds.records]
        split = split_dataset(ids, cfg.proportions, cfg.seed)
        model = build_model(cfg, vocab, n_sectors=3, n_industries=4)
        train(model, ds.graph, ds.records, split, cfg)
        g = prepare_graph(ds.graph, cfg)
        labels = {r.stock_id: r.sector for r in ds.records}
        emb = embed_universe(model, g, ds.records, split.test)
        trained_scores.append(map_at_k(emb, labels, ks=(5,))[5])
        # the uninformative baseline, averaged over many draws to pin it down
        rng = np.random.default_rng(seed + 100)
        random_scores.append(np.mean([
            map_at_k(EmbeddingMatrix(split.test, rng.normal(size=emb.vectors.shape)),
                     labels, ks=(5,))[5]
            for _ in range(10)
        ]))
    assert abs(np.mean(trained_scores) - np.mean(random_scores)) <= 0.05
