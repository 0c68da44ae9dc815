"""Black-box extraction attacks.

Each attack sees only a RegimeView, a QueryOracle and the budget nodes; it
never touches ground-truth labels. ``run_attack`` dispatches on
``AttackSpec.kind`` and returns a SurrogateResult.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression

from .graph import erdos_renyi_edges
from .nn import (
    Adam,
    LossTerm,
    Structure,
    TrainConfig,
    backward,
    fit,
    forward,
    forward_cache,
    init_model,
    log_softmax,
    softmax,
    terms_loss,
)
from .nn.train import dropout_masks
from .oracle import BudgetExhausted

log = logging.getLogger(__name__)

MEA_KINDS = ("MEA0", "MEA1", "MEA2", "MEA3", "MEA4", "MEA5")
DFEA_KINDS = ("DFEA_I", "DFEA_II", "DFEA_III")
ATTACK_KINDS = MEA_KINDS + ("AdvMEA", "CEGA", "Realistic") + DFEA_KINDS


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    surrogate_backbone: str = "GCN"
    surrogate_hidden: int = 16
    epochs: int = 200
    knn_k: int = 5
    er_edge_prob: float = 0.01
    edge_threshold: float = 0.5
    edge_candidates: int = 10
    pseudo_weight: float = 0.5
    cega_rounds: int = 5
    cega_lambda: float = 0.5
    adv_step: float = 0.1
    adv_rounds: int = 5
    adv_epochs: int = 40
    edge_model_epochs: int = 300
    edge_model_hidden: int = 32
    edge_negative_ratio: int = 5
    dfea_rounds: int = 4
    consistency_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("knn_k", "edge_candidates", "cega_rounds", "adv_rounds", "adv_epochs",
                     "edge_model_epochs", "edge_model_hidden", "dfea_rounds", "edge_negative_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.adv_step < 0 or self.consistency_weight < 0 or not 0 <= self.cega_lambda <= 1:
            raise ValueError("invalid attack parameter")

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SurrogateResult:
    surrogate: object
    queries_used: int
    wall_time: float
    construction_log: dict = field(default_factory=dict)
    train_time: float = 0.0


def _sub(seed, tag):
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


def _train_surrogate(spec, num_classes, x, structure, terms, seed, epochs=None):
    model = init_model(spec.surrogate_backbone, x.shape[1], num_classes, spec.surrogate_hidden,
                       seed=_sub(seed, 1))
    cfg = TrainConfig(epochs=spec.epochs if epochs is None else epochs, seed=_sub(seed, 2))
    return fit(model, structure, x, terms, cfg)


def _hard_term(idx, resp, weight=1.0):
    return LossTerm(np.asarray(idx, dtype=np.int64), resp.hard, weight, "hard")


def _query(oracle, ids, note):
    """Query by node id; on an exhausted budget keep what was answered."""
    try:
        return oracle.query(ids)
    except BudgetExhausted:
        note.setdefault("budget_exhausted", 0)
        note["budget_exhausted"] += 1
        room = oracle.remaining
        return oracle.query(ids[:room]) if room > 0 else oracle.query([])


def _query_graph(oracle, x, edges, ids, note):
    try:
        return oracle.query_graph(x, edges, ids)
    except BudgetExhausted:
        note.setdefault("budget_exhausted", 0)
        note["budget_exhausted"] += 1
        room = oracle.remaining
        return oracle.query_graph(x, edges, ids[:room]) if room > 0 else oracle.query_graph(x, edges, [])


# ---------------------------------------------------------------- structure helpers

def cosine_knn_edges(x, k):
    """Each non-zero row linked to its k most cosine-similar rows."""
    norms = np.linalg.norm(x, axis=1)
    live = np.flatnonzero(norms > 0)
    if len(live) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    xn = x[live] / norms[live, None]
    sim = xn @ xn.T
    np.fill_diagonal(sim, -np.inf)
    k = min(k, len(live) - 1)
    # stable ordering: by similarity desc, then index asc
    nbr = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    u = np.repeat(live, k)
    v = live[nbr.ravel()]
    return _canon(np.stack([u, v], axis=1))


def _canon(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if not len(pairs):
        return pairs
    return np.unique(np.sort(pairs, axis=1), axis=0)


def _union(*edge_sets):
    return _canon(np.vstack([e.reshape(-1, 2) for e in edge_sets]))


def _mea1_edges(view, k):
    if view.regime.a_ratio < 1.0:
        return _union(view.visible_edges, cosine_knn_edges(view.visible_features, k))
    return np.asarray(view.visible_edges)


def _synthetic_graph(n, d, p, rng):
    return rng.standard_normal((n, d)), erdos_renyi_edges(n, p, rng)


def two_hop_pseudo_labels(edges, n, queried, labels, num_classes):
    """Majority oracle label among queried nodes within two hops."""
    s = Structure(edges, n)
    a = s.adjacency
    reach = a + a @ a
    onehot = np.zeros((n, num_classes))
    onehot[queried, labels] = 1.0
    votes = reach @ onehot
    others = np.setdiff1d(np.arange(n), queried)
    has = votes[others].sum(axis=1) > 0
    idx = others[has]
    return idx, np.argmax(votes[idx], axis=1)


# ---------------------------------------------------------------- MEA family

def _mea(spec, oracle, view, nodes, seed, note):
    kind = spec.kind
    x = np.array(view.visible_features, dtype=np.float64)
    n = view.num_nodes
    if kind == "MEA2":
        rng = np.random.default_rng(_sub(seed, 3))
        k = len(nodes)
        xs, es = _synthetic_graph(k, view.feat_dim, spec.er_edge_prob, rng)
        resp = _query_graph(oracle, xs, es, np.arange(k), note)
        note["synthetic_nodes"] = k
        return _train_surrogate(spec, view.num_classes, xs, Structure(es, k), [_hard_term(np.arange(len(resp)), resp)], seed)

    resp = _query(oracle, nodes, note)
    answered = nodes[:len(resp)]
    terms = [_hard_term(answered, resp)]
    edges = np.asarray(view.visible_edges)
    if kind == "MEA1":
        edges = _mea1_edges(view, spec.knn_k)
    elif kind == "MEA3":
        pidx, plab = two_hop_pseudo_labels(edges, n, answered, resp.hard, view.num_classes)
        note["pseudo_labelled"] = int(len(pidx))
        if len(pidx):
            terms.append(LossTerm(pidx, plab, spec.pseudo_weight))
    elif kind == "MEA4":
        edges = _logistic_edges(view, spec, seed, note)
    elif kind == "MEA5":
        edges = _mea1_edges(view, spec.knn_k)
        x = Structure(edges, n).a_hat @ x
    note["train_edges"] = int(len(edges))
    return _train_surrogate(spec, view.num_classes, x, Structure(edges, n), terms, seed)


def _pair_features(x, pairs):
    a, b = x[pairs[:, 0]], x[pairs[:, 1]]
    return np.hstack([np.abs(a - b), a * b])


def _sample_non_edges(n, edges, count, rng):
    if n < 2 or count <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    existing = set(map(tuple, np.asarray(edges).tolist()))
    out = []
    tries = 0
    while len(out) < count and tries < 50 * count:
        u, v = rng.integers(n, size=2)
        tries += 1
        if u == v:
            continue
        pair = (min(u, v), max(u, v))
        if pair not in existing:
            existing.add(pair)
            out.append(pair)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def _logistic_edges(view, spec, seed, note):
    x = np.asarray(view.visible_features)
    n = view.num_nodes
    visible = np.asarray(view.visible_edges)
    if not np.any(x):
        note["edge_model"] = "skipped (no visible features)"
        return visible
    pos = visible if len(visible) else cosine_knn_edges(x, spec.knn_k)
    rng = np.random.default_rng(_sub(seed, 4))
    neg = _sample_non_edges(n, pos, len(pos), rng)
    if not len(pos) or not len(neg):
        return visible
    feats = np.vstack([_pair_features(x, pos), _pair_features(x, neg)])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    clf = LogisticRegression(max_iter=500)
    clf.fit(feats, y)
    cand = cosine_knn_edges(x, spec.edge_candidates)
    if not len(cand):
        return visible
    keep = clf.predict_proba(_pair_features(x, cand))[:, 1] > spec.edge_threshold
    note["edge_model"] = {"positives": int(len(pos)), "predicted_edges": int(keep.sum())}
    return _union(visible, cand[keep])


# ---------------------------------------------------------------- AdvMEA

def _adv_mea(spec, oracle, view, nodes, seed, note, pool):
    rng = np.random.default_rng(_sub(seed, 5))
    budget = len(nodes)
    n = view.num_nodes
    x = np.array(view.visible_features, dtype=np.float64)
    lo, hi = x.min(), x.max()
    s = Structure(view.visible_edges, n)
    rounds = max(1, min(spec.adv_rounds, budget))
    batch = int(np.ceil(budget / rounds))
    pool = np.asarray(pool if pool is not None else nodes, dtype=np.int64)

    x_train = x.copy()
    queried, labels = [], []
    first = np.sort(rng.choice(pool, size=min(batch, len(pool)), replace=False))
    resp = _query(oracle, first, note)
    queried.extend(first[:len(resp)].tolist())
    labels.extend(resp.hard.tolist())
    interim = None
    for r in range(1, rounds):
        left = budget - len(queried)
        cand = np.setdiff1d(pool, queried)
        if left <= 0 or not len(cand):
            break
        q = np.array(queried)
        interim = _train_surrogate(spec, view.num_classes, x_train, s, [LossTerm(q, np.array(labels))], _sub(seed, 100 + r),
                                   epochs=spec.adv_epochs)
        logits, cache = forward_cache(interim, s, x_train)
        own = np.argmax(logits, axis=1)
        _, dlogits = terms_loss(logits, [LossTerm(cand, own[cand])])
        _, dx = backward(interim, s, cache, dlogits, want_input=True)
        x_adv = x_train.copy()
        x_adv[cand] = np.clip(x_train[cand] + spec.adv_step * np.sign(dx[cand]), lo, hi)
        before = -log_softmax(logits[cand])[np.arange(len(cand)), own[cand]]
        after_logits = forward(interim, s, x_adv)
        after = -log_softmax(after_logits[cand])[np.arange(len(cand)), own[cand]]
        gain = after - before
        # biggest loss increase first; random order among ties
        order = np.lexsort((rng.permutation(len(cand)), -np.round(gain, 12)))
        pick = np.sort(cand[order[:min(batch, left)]])
        resp = _query_graph(oracle, x_adv, view.visible_edges, pick, note)
        pick = pick[:len(resp)]
        x_train[pick] = x_adv[pick]
        queried.extend(pick.tolist())
        labels.extend(resp.hard.tolist())
    note["rounds"] = rounds
    note["selected"] = sorted(int(i) for i in queried)
    q = np.array(queried, dtype=np.int64)
    return _train_surrogate(spec, view.num_classes, x_train, s, [LossTerm(q, np.array(labels, dtype=np.int64))], seed)


# ---------------------------------------------------------------- CEGA

def cega_scores(degree, probs, lam):
    """lam * degree / max degree + (1 - lam) * entropy / log C.

    ``probs`` None means no interim model yet: the entropy term is the
    constant maximum.
    """
    dmax = degree.max() if len(degree) else 0
    cent = degree / dmax if dmax > 0 else np.zeros_like(degree, dtype=float)
    if probs is None:
        ent = np.ones(len(degree))
    else:
        c = probs.shape[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(probs > 0, probs * np.log(probs), 0.0).sum(axis=1)
        ent = h / np.log(c)
    return lam * cent + (1 - lam) * ent


def _cega(spec, oracle, view, nodes, seed, note, pool):
    budget = len(nodes)
    n = view.num_nodes
    x = np.asarray(view.visible_features, dtype=np.float64)
    s = Structure(view.visible_edges, n)
    pool = np.asarray(pool if pool is not None else nodes, dtype=np.int64)
    rounds = max(1, min(spec.cega_rounds, budget))
    batch = int(np.ceil(budget / rounds))
    queried, labels = [], []
    probs = None
    surrogate = None
    picks = []
    for r in range(rounds):
        left = budget - len(queried)
        cand = np.setdiff1d(pool, queried)
        if left <= 0 or not len(cand):
            break
        sc = cega_scores(s.degree[cand], None if probs is None else probs[cand], spec.cega_lambda)
        order = np.lexsort((cand, -np.round(sc, 12)))
        pick = np.sort(cand[order[:min(batch, left)]])
        picks.append(pick.tolist())
        resp = _query(oracle, pick, note)
        queried.extend(pick[:len(resp)].tolist())
        labels.extend(resp.hard.tolist())
        q = np.array(queried, dtype=np.int64)
        surrogate = _train_surrogate(spec, view.num_classes, x, s, [LossTerm(q, np.array(labels, dtype=np.int64))],
                                     _sub(seed, 200 + r))
        probs = softmax(forward(surrogate, s, x))
    note["round_picks"] = picks
    q = np.array(queried, dtype=np.int64)
    return _train_surrogate(spec, view.num_classes, x, s, [LossTerm(q, np.array(labels, dtype=np.int64))], seed)


# ---------------------------------------------------------------- Realistic

class EdgeScorer:
    """Two-layer perceptron on concatenated endpoint features, symmetrised."""

    def __init__(self, d, hidden, seed):
        rng = np.random.default_rng(seed)
        lim1 = np.sqrt(6.0 / (2 * d + hidden))
        lim2 = np.sqrt(6.0 / (hidden + 1))
        self.p = {"W1": rng.uniform(-lim1, lim1, (2 * d, hidden)), "b1": np.zeros(hidden),
                  "w2": rng.uniform(-lim2, lim2, hidden), "b2": np.zeros(1)}

    def _logit(self, f):
        h = np.maximum(f @ self.p["W1"] + self.p["b1"], 0)
        return h @ self.p["w2"] + self.p["b2"][0], h

    def score(self, x, pairs):
        if not len(pairs):
            return np.zeros(0)
        a = self._logit(np.hstack([x[pairs[:, 0]], x[pairs[:, 1]]]))[0]
        b = self._logit(np.hstack([x[pairs[:, 1]], x[pairs[:, 0]]]))[0]
        return 1.0 / (1.0 + np.exp(-(a + b) / 2))

    def fit(self, x, pos, neg, epochs, lr=0.01):
        pairs = np.vstack([pos.reshape(-1, 2), neg.reshape(-1, 2)])
        y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        if not len(pairs):
            return self
        f = np.vstack([np.hstack([x[pairs[:, 0]], x[pairs[:, 1]]]),
                       np.hstack([x[pairs[:, 1]], x[pairs[:, 0]]])])
        y = np.concatenate([y, y])
        opt = Adam(self.p, lr=lr)
        for _ in range(epochs):
            z, h = self._logit(f)
            pr = 1.0 / (1.0 + np.exp(-z))
            dz = (pr - y) / len(y)
            dh = np.outer(dz, self.p["w2"]) * (h > 0)
            grads = {"W1": f.T @ dh, "b1": dh.sum(axis=0), "w2": h.T @ dz, "b2": np.array([dz.sum()])}
            opt.step(self.p, grads)
        return self


def edge_auc(scores_pos, scores_neg):
    """Probability a random positive outranks a random negative (ties 1/2)."""
    sp_, sn = np.asarray(scores_pos), np.asarray(scores_neg)
    if not len(sp_) or not len(sn):
        return float("nan")
    greater = (sp_[:, None] > sn[None, :]).mean()
    ties = (sp_[:, None] == sn[None, :]).mean()
    return float(greater + 0.5 * ties)


def _realistic(spec, oracle, view, nodes, seed, note):
    t0 = time.perf_counter()
    x = np.asarray(view.visible_features, dtype=np.float64)
    n = view.num_nodes
    rng = np.random.default_rng(_sub(seed, 6))
    pos = np.asarray(view.visible_edges)
    neg = _sample_non_edges(n, pos, spec.edge_negative_ratio * max(len(pos), n), rng)
    scorer = EdgeScorer(view.feat_dim, spec.edge_model_hidden, _sub(seed, 7)).fit(x, pos, neg, spec.edge_model_epochs)
    cand = _union(pos, cosine_knn_edges(x, spec.edge_candidates))
    keep = scorer.score(x, cand) > spec.edge_threshold if len(cand) else np.zeros(0, bool)
    edges = cand[keep] if len(cand) else cand
    note["edge_model_time"] = time.perf_counter() - t0
    note["reconstructed_edges"] = int(len(edges))
    resp = _query(oracle, nodes, note)
    return _train_surrogate(spec, view.num_classes, x, Structure(edges, n), [_hard_term(nodes[:len(resp)], resp)], seed)


# ---------------------------------------------------------------- DFEA

def _dfea(spec, oracle, view, nodes, seed, note):
    variant = spec.kind.split("_")[1]
    if variant == "I" and oracle.response_mode == "hard_label":
        log.info("DFEA_I against a hard-label oracle: falling back to DFEA_II")
        note["downgraded"] = "DFEA_I->DFEA_II"
        variant = "II"
    rng = np.random.default_rng(_sub(seed, 8))
    budget = len(nodes)
    d = view.feat_dim
    rounds = max(1, min(spec.dfea_rounds, budget))
    sizes = np.full(rounds, budget // rounds)
    sizes[: budget % rounds] += 1
    xs, es, hard, soft = [], [], [], []
    offset = 0
    for size in sizes:
        x_r, e_r = _synthetic_graph(int(size), d, spec.er_edge_prob, rng)
        resp = _query_graph(oracle, x_r, e_r, np.arange(size), note)
        m = len(resp)
        xs.append(x_r[:m] if m < size else x_r)
        es.append(e_r[(e_r < m).all(axis=1)] + offset if m < size else e_r + offset)
        hard.append(resp.hard)
        soft.append(resp.probs if resp.probs is not None else np.eye(view.num_classes)[resp.hard])
        offset += len(xs[-1])
    x = np.vstack(xs)
    edges = np.vstack(es) if es else np.zeros((0, 2), np.int64)
    hard = np.concatenate(hard)
    soft = np.vstack(soft)
    s = Structure(edges, len(x))
    idx = np.arange(len(x))
    note["synthetic_nodes"] = int(len(x))
    if variant == "I":
        return _train_surrogate(spec, view.num_classes, x, s, [LossTerm(idx, soft, 1.0, "soft")], seed)
    if variant == "II":
        return _train_surrogate(spec, view.num_classes, x, s, [LossTerm(idx, hard)], seed)
    half_a, half_b = idx[0::2], idx[1::2]
    note["halves"] = [int(len(half_a)), int(len(half_b))]
    return train_consistency_pair(spec, view.num_classes, x, s, (half_a, hard[half_a]), (half_b, hard[half_b]),
                                  _sub(seed, 9), _sub(seed, 10), spec.consistency_weight)[0]


def _sym_kl_grads(za, zb):
    la, lb = log_softmax(za), log_softmax(zb)
    pa, pb = np.exp(la), np.exp(lb)
    n = len(za)
    kl_ab = (pa * (la - lb)).sum(axis=1)
    kl_ba = (pb * (lb - la)).sum(axis=1)
    loss = (kl_ab + kl_ba).mean()
    va, vb = la - lb, lb - la
    ga = pa * (va - kl_ab[:, None]) + (pa - pb)
    gb = pb * (vb - kl_ba[:, None]) + (pb - pa)
    return loss, ga / n, gb / n


def train_consistency_pair(spec, num_classes, x, s, part_a, part_b, seed_a, seed_b, weight):
    """Two surrogates on disjoint response halves, tied by a symmetric-KL
    term over all synthetic nodes. With weight 0 each model follows exactly
    the same update sequence as a standalone run under its own seed."""
    models, rngs, opts, terms = [], [], [], []
    for (idx, lab), sd in ((part_a, seed_a), (part_b, seed_b)):
        m = init_model(spec.surrogate_backbone, x.shape[1], num_classes, spec.surrogate_hidden, seed=_sub(sd, 1))
        cfg = TrainConfig(epochs=spec.epochs, seed=_sub(sd, 2))
        models.append(m)
        rngs.append(np.random.default_rng(cfg.seed))
        opts.append(Adam(m.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay))
        terms.append([LossTerm(idx, lab)])
    for _ in range(spec.epochs):
        outs = []
        for m, r, t in zip(models, rngs, terms):
            logits, cache = forward_cache(m, s, x, dropout_masks(m, x.shape, r))
            _, dl = terms_loss(logits, t)
            outs.append((logits, cache, dl))
        if weight:
            _, ga, gb = _sym_kl_grads(outs[0][0], outs[1][0])
            outs[0] = (outs[0][0], outs[0][1], outs[0][2] + weight * ga)
            outs[1] = (outs[1][0], outs[1][1], outs[1][2] + weight * gb)
        for m, o, (_, cache, dl) in zip(models, opts, outs):
            grads, _ = backward(m, s, cache, dl)
            o.step(m.params, grads)
    return models


# ---------------------------------------------------------------- dispatch

def run_attack(spec, oracle, view, budget_nodes, seed, pool=None):
    """Run one extraction attack. ``budget_nodes`` fixes the query budget
    (its length) and, for non-adaptive attacks, the queried nodes; adaptive
    attacks (AdvMEA, CEGA) select their own nodes from ``pool``."""
    if isinstance(spec, str):
        spec = AttackSpec(spec)
    nodes = np.asarray(budget_nodes, dtype=np.int64)
    used_before = oracle.queries_used
    note = {"kind": spec.kind}
    t0 = time.perf_counter()
    if spec.kind in MEA_KINDS:
        model = _mea(spec, oracle, view, nodes, seed, note)
    elif spec.kind == "AdvMEA":
        model = _adv_mea(spec, oracle, view, nodes, seed, note, pool)
    elif spec.kind == "CEGA":
        model = _cega(spec, oracle, view, nodes, seed, note, pool)
    elif spec.kind == "Realistic":
        model = _realistic(spec, oracle, view, nodes, seed, note)
    else:
        model = _dfea(spec, oracle, view, nodes, seed, note)
    wall = time.perf_counter() - t0
    used = oracle.queries_used - used_before
    note["queries_used"] = used
    return SurrogateResult(model, used, wall, note)
