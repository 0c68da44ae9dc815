import numpy as np
import pytest

from extractbench.attacks import (
    ATTACK_KINDS,
    DFEA_KINDS,
    AttackSpec,
    EdgeScorer,
    _sub,
    _train_surrogate,
    cega_scores,
    cosine_knn_edges,
    edge_auc,
    run_attack,
    train_consistency_pair,
    two_hop_pseudo_labels,
)
from extractbench.graph import REGIME_KINDS, Graph, Regime, apply_regime, erdos_renyi_edges
from extractbench.metrics import fidelity
from extractbench.nn import LossTerm, Structure, predict
from extractbench.oracle import make_oracle, sample_budget_nodes

FAST = {"epochs": 40, "adv_epochs": 10, "edge_model_epochs": 20}


def fast(kind, **kw):
    return AttackSpec(kind, **{**FAST, **kw})


def same_weights(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.fixture(scope="module")
def setup(sbm, sbm_target):
    g, splits = sbm
    nodes = sample_budget_nodes(splits, 0.25, 11)
    return g, splits, sbm_target, nodes


def _run(kind_or_spec, setup, regime="both", budget=None, seed=0, target=None, graph=None, response_mode="soft_probs"):
    g, splits, tgt, nodes = setup
    g = graph or g
    spec = fast(kind_or_spec) if isinstance(kind_or_spec, str) else kind_or_spec
    oracle = make_oracle(target or tgt, g, response_mode=response_mode,
                         budget=len(nodes) if budget is None else budget)
    view = apply_regime(g, Regime.named(regime), 5)
    return run_attack(spec, oracle, view, nodes, seed, pool=splits.query), oracle


@pytest.mark.parametrize("kind", ("MEA2",) + DFEA_KINDS)
def test_regime_blind_attacks_ignore_the_view(kind, setup):
    base = _run(kind, setup)[0].surrogate
    for regime in REGIME_KINDS:
        assert same_weights(_run(kind, setup, regime)[0].surrogate, base), regime


@pytest.mark.parametrize("kind", ATTACK_KINDS)
def test_query_accounting_and_determinism(kind, setup):
    res, oracle = _run(kind, setup)
    assert res.queries_used == oracle.queries_used
    assert res.queries_used <= len(setup[3])
    assert res.construction_log["kind"] == kind
    again = _run(kind, setup)[0]
    assert same_weights(res.surrogate, again.surrogate)


@pytest.mark.parametrize("kind", ATTACK_KINDS)
def test_attacks_never_read_ground_truth_labels(kind, setup):
    g = setup[0]
    shuffled = Graph(g.num_nodes, g.edges, g.features, np.random.default_rng(0).permutation(g.labels),
                     g.num_classes, g.name)
    a = _run(kind, setup)[0].surrogate
    b = _run(kind, setup, graph=shuffled)[0].surrogate
    assert same_weights(a, b)


def test_attacks_survive_budget_exhaustion(setup):
    nodes = setup[3]
    for kind in ("MEA0", "CEGA", "AdvMEA", "DFEA_II"):
        res, oracle = _run(kind, setup, budget=len(nodes) // 2)
        assert oracle.queries_used == len(nodes) // 2 == res.queries_used
        assert res.construction_log.get("budget_exhausted", 0) >= 1 or kind in ("CEGA", "AdvMEA")


def test_mea1_with_full_structure_is_mea0(setup):
    a = _run("MEA0", setup)[0]
    b = _run("MEA1", setup)[0]
    assert same_weights(a.surrogate, b.surrogate)
    assert a.construction_log["train_edges"] == b.construction_log["train_edges"]


def test_mea3_adds_pseudo_labels(setup):
    res = _run("MEA3", setup)[0]
    assert res.construction_log["pseudo_labelled"] > 0
    assert res.queries_used == len(setup[3])


def test_two_hop_pseudo_labels_example():
    edges = np.array([[0, 1], [1, 2], [2, 3]])
    idx, lab = two_hop_pseudo_labels(edges, 4, np.array([0]), np.array([2]), 3)
    assert idx.tolist() == [1, 2] and lab.tolist() == [2, 2]


def test_cosine_knn_edges():
    x = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.0, 0.0]])
    # row 3 is all zero and gets no neighbours; row 2 is closest to row 1
    assert cosine_knn_edges(x, 1).tolist() == [[0, 1], [1, 2]]
    assert cosine_knn_edges(np.zeros((4, 2)), 3).shape == (0, 2)
    e = cosine_knn_edges(np.random.default_rng(0).normal(size=(30, 4)), 3)
    assert np.all(e[:, 0] < e[:, 1]) and len(np.unique(e, axis=0)) == len(e)


def test_cega_first_round_is_centrality_ranking(setup):
    g, splits, _, nodes = setup
    res = _run("CEGA", setup)[0]
    first = res.construction_log["round_picks"][0]
    deg = Structure.of(g).degree[splits.query]
    order = np.lexsort((splits.query, -deg))
    assert first == sorted(splits.query[order[:len(first)]].tolist())


def test_cega_scores_degenerate_cases():
    deg = np.array([0.0, 0.0, 0.0])
    probs = np.array([[1.0, 0.0], [0.5, 0.5], [0.9, 0.1]])
    sc = cega_scores(deg, probs, 0.5)
    assert np.argsort(-sc, kind="stable").tolist() == [1, 2, 0]
    assert np.allclose(cega_scores(np.array([1.0, 4.0, 2.0]), None, 0.5), [0.625, 1.0, 0.75])


def test_adv_mea_zero_step_is_random_selection(setup, small_sbm):
    g, splits, tgt, nodes = setup
    res = _run(fast("AdvMEA", adv_step=0.0), setup)[0]
    # replay the selection stream without any model in the loop
    rng = np.random.default_rng(_sub(0, 5))
    rounds = min(5, len(nodes))
    batch = int(np.ceil(len(nodes) / rounds))
    queried = np.sort(rng.choice(splits.query, size=batch, replace=False)).tolist()
    for _ in range(1, rounds):
        left = len(nodes) - len(queried)
        cand = np.setdiff1d(splits.query, queried)
        if left <= 0:
            break
        order = np.lexsort((rng.permutation(len(cand)), np.zeros(len(cand))))
        queried += np.sort(cand[order[:min(batch, left)]]).tolist()
    assert res.construction_log["selected"] == sorted(queried)
    # with no perturbation the training set is plain MEA0 on the selected nodes
    mea0 = _run_on_nodes("MEA0", setup, np.array(sorted(queried)))
    assert np.allclose(predict(res.surrogate, g, g.features).probs, predict(mea0, g, g.features).probs)


def _run_on_nodes(kind, setup, nodes):
    g, splits, tgt, _ = setup
    oracle = make_oracle(tgt, g, budget=len(nodes))
    return run_attack(fast(kind), oracle, apply_regime(g, Regime.named("both"), 5), nodes, 0).surrogate


def test_dfea_iii_zero_weight_matches_standalone(small_sbm):
    g, _ = small_sbm
    rng = np.random.default_rng(0)
    x = rng.standard_normal((60, g.feat_dim))
    s = Structure(erdos_renyi_edges(60, 0.05, rng), 60)
    y = rng.integers(0, 3, size=60)
    spec = fast("DFEA_III", consistency_weight=0.0)
    a, b = np.arange(0, 60, 2), np.arange(1, 60, 2)
    pair = train_consistency_pair(spec, 3, x, s, (a, y[a]), (b, y[b]), 17, 23, 0.0)
    alone_a = _train_surrogate(spec, 3, x, s, [LossTerm(a, y[a])], 17)
    alone_b = _train_surrogate(spec, 3, x, s, [LossTerm(b, y[b])], 23)
    assert same_weights(pair[0], alone_a) and same_weights(pair[1], alone_b)
    tied = train_consistency_pair(spec, 3, x, s, (a, y[a]), (b, y[b]), 17, 23, 1.0)
    assert not same_weights(tied[0], alone_a)


def test_dfea_i_downgrades_on_hard_labels(setup):
    res = _run("DFEA_I", setup, response_mode="hard_label")[0]
    assert res.construction_log["downgraded"] == "DFEA_I->DFEA_II"
    ii = _run("DFEA_II", setup, response_mode="hard_label")[0]
    assert same_weights(res.surrogate, ii.surrogate)


def test_edge_auc_examples():
    assert edge_auc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert edge_auc([0.1], [0.9]) == 0.0
    assert edge_auc([0.5], [0.5]) == 0.5
    assert np.isnan(edge_auc([], [0.5]))


def test_edge_scorer_recovers_feature_determined_edges():
    # cliques over feature clusters: edges are a function of the features
    rng = np.random.default_rng(0)
    cluster = np.repeat(np.arange(4), 10)
    x = np.eye(4)[cluster] + 0.05 * rng.standard_normal((40, 4))
    pairs = np.array([(u, v) for u in range(40) for v in range(u + 1, 40)])
    same = cluster[pairs[:, 0]] == cluster[pairs[:, 1]]
    pos, neg = pairs[same], pairs[~same]
    sc = EdgeScorer(4, 32, 0).fit(x, pos, neg, 300)
    assert edge_auc(sc.score(x, pos), sc.score(x, neg)) == 1.0


def test_realistic_runs_without_visible_edges(setup):
    res = _run("Realistic", setup, regime="x_only")[0]
    assert res.construction_log["edge_model_time"] > 0
    assert res.queries_used == len(setup[3])


def test_mea0_extracts_the_target(setup):
    g, splits, tgt, _ = setup
    res = _run(AttackSpec("MEA0"), setup)[0]
    f = fidelity(predict(res.surrogate, g, g.features), predict(tgt, g, g.features), splits.test)
    assert f.value >= 0.85


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("MEA9")
    with pytest.raises(ValueError):
        AttackSpec("CEGA", cega_lambda=1.5)
    spec = AttackSpec("CEGA", cega_rounds=3)
    assert AttackSpec.from_dict(spec.as_dict()) == spec
