import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from extractbench.graph import (
    MASKED,
    REAL,
    SYNTHETIC,
    Graph,
    GraphFormatError,
    Regime,
    SplitSpec,
    apply_regime,
    canonical_edges,
    edge_homophily,
    generate_sbm,
    load_graph_bundle,
    make_splits,
    normalized_adjacency,
    save_graph_bundle,
    structural_stats,
)


@st.composite
def small_graphs(draw, max_nodes=50):
    n = draw(st.integers(2, max_nodes))
    c = draw(st.integers(2, 4))
    labels = draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3 * n))
    return Graph.build(n, pairs, np.zeros((n, 1)), labels, c)


def brute_homophily(g):
    """Enumerate every node pair and check adjacency and labels."""
    adj = set(map(tuple, g.edges.tolist()))
    same = total = 0
    for u, v in combinations(range(g.num_nodes), 2):
        if (u, v) in adj:
            total += 1
            same += g.labels[u] == g.labels[v]
    return same / total if total else 0.0


@settings(max_examples=100, deadline=None)
@given(small_graphs())
def test_homophily_matches_enumeration(g):
    assert edge_homophily(g) == brute_homophily(g)


def test_homophily_examples():
    g = Graph.build(4, [(0, 1), (1, 2), (2, 3)], np.zeros((4, 1)), [0, 0, 1, 1], 2)
    assert edge_homophily(g) == pytest.approx(2 / 3)
    empty = Graph.build(3, [], np.zeros((3, 1)), [0, 1, 0], 2)
    assert edge_homophily(empty) == 0.0
    assert not structural_stats(empty).homophily_defined


def test_canonical_edges_drops_loops_and_duplicates():
    uniq, loops, dups = canonical_edges([(1, 0), (0, 1), (2, 2), (1, 2)], 3)
    assert uniq.tolist() == [[0, 1], [1, 2]]
    assert (loops, dups) == (1, 1)


def test_graph_rejects_bad_input():
    with pytest.raises(ValueError):
        Graph.build(3, [(0, 5)], np.zeros((3, 1)), [0, 1, 0], 2)
    with pytest.raises(ValueError):
        Graph.build(3, [], np.zeros((2, 1)), [0, 1, 0], 2)
    with pytest.raises(ValueError):
        Graph.build(3, [], np.zeros((3, 1)), [0, 1, 2], 2)


def test_graph_arrays_are_read_only():
    g = Graph.build(2, [(0, 1)], np.zeros((2, 1)), [0, 1], 2)
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0


def test_sbm_pure_partition_has_homophily_one():
    for seed in range(5):
        g = generate_sbm(60, 3, 0.2, 0.0, 4, 1.0, seed)
        assert edge_homophily(g) == 1.0


def test_sbm_is_deterministic_and_balanced():
    a = generate_sbm(100, 3, 0.1, 0.01, 8, 1.0, 7)
    b = generate_sbm(100, 3, 0.1, 0.01, 8, 1.0, 7)
    assert np.array_equal(a.edges, b.edges) and np.array_equal(a.features, b.features)
    counts = np.bincount(a.labels)
    assert counts.max() - counts.min() <= 1


def test_sbm_rejects_inverted_probabilities():
    with pytest.raises(ValueError):
        generate_sbm(10, 2, 0.1, 0.2, 3, 1.0, 0)


def test_splits_disjoint_sized_and_stratified(sbm):
    g, splits = sbm
    sizes = [len(splits.train), len(splits.val), len(splits.test), len(splits.query)]
    assert sizes == [120, 60, 120, 300]
    allidx = np.concatenate([splits.train, splits.val, splits.test, splits.query])
    assert len(np.unique(allidx)) == len(allidx)
    assert splits.stratified
    per_class = np.bincount(g.labels[splits.train], minlength=3)
    assert per_class.max() - per_class.min() <= 1


def test_splits_fall_back_when_a_class_is_tiny():
    labels = [0] * 19 + [1]
    g = Graph.build(20, [], np.zeros((20, 1)), labels, 2)
    s = make_splits(g, (0.25, 0.25, 0.25, 0.25), 0)
    assert not s.stratified
    assert sum(map(len, (s.train, s.val, s.test, s.query))) == 20


def test_split_validation():
    with pytest.raises(ValueError):
        SplitSpec(np.array([0, 1]), np.array([1]), np.array([2]), np.array([3])).validate(4)
    with pytest.raises(ValueError):
        SplitSpec(np.array([0]), np.array([1]), np.array([], int), np.array([3])).validate(4)


def test_normalized_adjacency_examples():
    assert np.allclose(normalized_adjacency(np.zeros((0, 2), int), 3).toarray(), np.eye(3))
    assert np.allclose(normalized_adjacency(np.array([[0, 1]]), 2).toarray(), 0.5)


@settings(max_examples=30, deadline=None)
@given(small_graphs(max_nodes=20))
def test_normalized_adjacency_matches_dense_formula(g):
    a = g.adjacency().toarray() + np.eye(g.num_nodes)
    d = np.diag(1 / np.sqrt(a.sum(axis=1)))
    ahat = normalized_adjacency(g).toarray()
    assert np.allclose(ahat, d @ a @ d)
    assert np.allclose(ahat, ahat.T)


def test_regime_both_is_identity(sbm):
    g, _ = sbm
    v = apply_regime(g, Regime.named("both"), 0)
    assert np.array_equal(v.visible_features, g.features)
    assert np.array_equal(v.visible_edges, g.edges)
    assert np.all(v.provenance == REAL)
    assert apply_regime(v, Regime.named("both"), 5) is v


def test_regime_data_free_has_no_real_content(sbm):
    g, _ = sbm
    v = apply_regime(g, Regime.named("data_free"), 0)
    assert np.all(v.provenance == SYNTHETIC) and v.edges_synthetic
    assert len(v.real_rows) == 0
    assert not np.any(np.all(v.visible_features == g.features, axis=1))
    real = set(map(tuple, g.edges.tolist()))
    synth = set(map(tuple, np.asarray(v.visible_edges).tolist()))
    # the synthetic graph is independent of the real one, so overlap is chance level
    assert len(real & synth) < 0.05 * len(synth) + 5


def test_regime_partial_ratio_counts():
    g = Graph.build(10, [(i, i + 1) for i in range(9)], np.ones((10, 2)), [0, 1] * 5, 2)
    v = apply_regime(g, Regime("x_only", 0.5, 0.0), 3)
    assert (v.provenance == REAL).sum() == 5 and (v.provenance == MASKED).sum() == 5
    assert np.all(v.visible_features[v.provenance == MASKED] == 0)
    assert len(v.visible_edges) == 0
    v2 = apply_regime(g, Regime("a_only", 0.0, 0.5), 3)
    assert len(v2.visible_edges) == 4
    assert np.all(v2.visible_features == 0)


def test_regime_rejects_inconsistent_ratios():
    with pytest.raises(ValueError):
        Regime("both", 0.5, 1.0)
    with pytest.raises(ValueError):
        apply_regime(apply_regime(Graph.build(2, [], np.ones((2, 1)), [0, 1], 2), Regime.named("both"), 0),
                     Regime.named("x_only"), 0)


def test_bundle_round_trip(tmp_path, small_sbm):
    g, splits = small_sbm
    save_graph_bundle(g, splits, tmp_path / "b")
    g2, s2 = load_graph_bundle(tmp_path / "b")
    assert g2.num_nodes == g.num_nodes and g2.name == g.name
    assert np.array_equal(g2.edges, g.edges)
    assert np.array_equal(g2.labels, g.labels)
    assert np.allclose(g2.features, g.features, rtol=0, atol=0)
    for k in ("train", "val", "test", "query"):
        assert np.array_equal(getattr(s2, k), getattr(splits, k))


def _write_bundle(root, edges="0\t1\n", labels="0\n1\n", features="1.0\n2.0\n"):
    root.mkdir()
    (root / "meta.json").write_text(json.dumps({"num_nodes": 2, "feat_dim": 1, "num_classes": 2, "name": "t"}))
    (root / "edges.tsv").write_text(edges)
    (root / "features.csv").write_text(features)
    (root / "labels.csv").write_text(labels)
    (root / "splits.json").write_text(json.dumps({"train": [], "val": [], "test": [0], "query": [1]}))


def test_bundle_symmetrizes_and_drops_duplicates(tmp_path):
    _write_bundle(tmp_path / "b", edges="0\t1\n1\t0\n1\t1\n")
    g, _ = load_graph_bundle(tmp_path / "b")
    assert g.edges.tolist() == [[0, 1]]
    assert load_graph_bundle.last_report == {"self_loops_dropped": 1, "duplicates_dropped": 1}


def test_bundle_errors_name_file_and_line(tmp_path):
    _write_bundle(tmp_path / "b", labels="0\nx\n")
    with pytest.raises(GraphFormatError) as err:
        load_graph_bundle(tmp_path / "b")
    assert err.value.line == 2 and "labels.csv" in str(err.value)
    _write_bundle(tmp_path / "c", edges="0\t7\n")
    with pytest.raises(GraphFormatError):
        load_graph_bundle(tmp_path / "c")
    with pytest.raises(GraphFormatError):
        load_graph_bundle(tmp_path / "missing")
