"""Training-time ownership defenses and ownership verification."""

from __future__ import annotations

import logging

import numpy as np

from ..graph import Graph, erdos_renyi_edges
from ..nn import (
    Adam,
    GnnModel,
    LossTerm,
    Structure,
    TrainConfig,
    TrainingDiverged,
    backward,
    fit,
    forward,
    forward_cache,
    init_model,
    softmax,
    terms_loss,
)
from ..nn.train import dropout_masks
from ..oracle import QueryOracle
from .snnl import snnl_and_grad
from .spec import DefenseSpec, VerificationReport, WatermarkArtifact

log = logging.getLogger(__name__)


class DefenseTrainingError(RuntimeError):
    pass


def _config(epochs, seed):
    return TrainConfig(epochs=epochs, seed=seed)


def _with_trigger(features, nodes, dims, value):
    x = np.array(features, dtype=np.float64)
    x[np.ix_(nodes, dims)] = value
    return x


def _pick(rng, pool, k):
    pool = np.asarray(pool, dtype=np.int64)
    return np.sort(rng.choice(pool, size=min(k, len(pool)), replace=False))


def train_defended(spec, graph, splits, seed, backbone="GCN", hidden_dim=16, epochs=200, baseline=None):
    """Train a protected target. Returns ``(model, artifact)``.

    ``baseline`` (an undefended model trained on the same split) is reused
    by Integrity and SurviveWM when supplied; otherwise it is trained here.
    """
    if isinstance(spec, str):
        spec = DefenseSpec(spec)
    if not spec.training_time:
        raise ValueError(f"{spec.kind} is an inference-time defense")
    rng = np.random.default_rng([seed, 0xD3F])
    init = init_model(backbone, graph.feat_dim, graph.num_classes, hidden_dim, seed=seed)
    train_idx = np.asarray(splits.train, dtype=np.int64)
    try:
        fn = {
            "BackdoorWM": _backdoor,
            "RandomWM": _random_wm,
            "SurviveWM": _survive_wm,
            "ImperceptibleWM": _imperceptible_wm,
            "Integrity": _integrity,
        }[spec.kind]
        return fn(spec, graph, splits, train_idx, init, rng, seed, epochs, baseline)
    except TrainingDiverged as exc:
        raise DefenseTrainingError(f"{spec.kind} (seed {seed}) diverged: {exc}") from exc


def _clean_model(graph, train_idx, init, seed, epochs, baseline):
    if baseline is not None:
        return baseline
    return fit(init, graph, graph.features, [LossTerm(train_idx, graph.labels[train_idx])], _config(epochs, seed))


def _backdoor(spec, graph, splits, train_idx, init, rng, seed, epochs, baseline):
    p = spec.params
    k = max(int(np.floor(p["trigger_rate"] * len(train_idx))), int(p["min_trigger_nodes"]))
    k = min(k, len(train_idx) - 1)
    trig = _pick(rng, train_idx, k)
    dims = np.sort(rng.choice(graph.feat_dim, size=min(int(p["trigger_dims"]), graph.feat_dim), replace=False))
    target_class = int(rng.integers(graph.num_classes))
    x = _with_trigger(graph.features, trig, dims, p["trigger_value"])
    clean = np.setdiff1d(train_idx, trig)
    alpha = float(p["joint_alpha"])
    terms = [LossTerm(clean, graph.labels[clean], 1.0 - alpha),
             LossTerm(trig, np.full(len(trig), target_class), alpha)]
    pre = fit(init, graph, graph.features, [LossTerm(train_idx, graph.labels[train_idx])],
              _config(int(p["pretrain_epochs"]), seed))
    model = fit(pre, graph, x, terms, _config(epochs, seed + 1))
    art = WatermarkArtifact("BackdoorWM", target_class=target_class, probe_nodes=trig,
                            trigger_dims=dims, trigger_value=float(p["trigger_value"]),
                            meta={"joint_alpha": alpha, "n_trigger": int(len(trig))})
    return model, art


def make_watermark_graph(k, feat_dim, num_classes, avg_degree, rng):
    p = min(1.0, avg_degree / max(k - 1, 1))
    edges = erdos_renyi_edges(k, p, rng)
    feats = rng.standard_normal((k, feat_dim))
    labels = rng.integers(num_classes, size=k)
    return Graph(k, edges, feats, labels.astype(np.int64), num_classes, name="wm-graph")


def _random_wm(spec, graph, splits, train_idx, init, rng, seed, epochs, baseline):
    p = spec.params
    if p["wm_nodes"] is not None:
        k = int(p["wm_nodes"])
    else:
        k = max(int(np.floor(p["wm_node_ratio"] * graph.num_nodes)), int(p["min_wm_nodes"]))
    wm = make_watermark_graph(k, graph.feat_dim, graph.num_classes, p["wm_avg_degree"], rng)
    if p["avoid_clean_labels"]:
        # relabel away from what an unwatermarked model answers on the same graph
        clean = _clean_model(graph, train_idx, init, seed, epochs, baseline)
        natural = np.argmax(forward(clean, Structure(wm.edges, k), wm.features), axis=1)
        shift = 1 + rng.integers(max(graph.num_classes - 1, 1), size=k)
        labels = (natural + shift) % graph.num_classes if graph.num_classes > 1 else natural
        wm = Graph(k, wm.edges, wm.features, labels.astype(np.int64), graph.num_classes, name="wm-graph")
    n = graph.num_nodes
    edges = np.vstack([graph.edges, wm.edges + n])
    x = np.vstack([graph.features, wm.features])
    s = Structure(edges, n + k)
    wm_idx = np.arange(n, n + k)
    terms = [LossTerm(train_idx, graph.labels[train_idx], 1.0),
             LossTerm(wm_idx, wm.labels, float(p["wm_weight"]))]
    model = fit(init, s, x, terms, _config(epochs, seed))
    return model, WatermarkArtifact("RandomWM", wm_graph=wm, meta={"wm_nodes": k})


def _survive_wm(spec, graph, splits, train_idx, init, rng, seed, epochs, baseline):
    p = spec.params
    clean_model = _clean_model(graph, train_idx, init, seed, epochs, baseline)
    k = max(1, int(round(p["key_ratio"] * len(train_idx))))
    keys = _pick(rng, train_idx, k)
    clean_pred = np.argmax(forward(clean_model, graph, graph.features), axis=1)
    # key labels sit one class away from what a faithful copy would answer
    key_labels = (clean_pred[keys] + 1) % graph.num_classes
    rest = np.setdiff1d(train_idx, keys)
    terms = [LossTerm(rest, graph.labels[rest], 1.0), LossTerm(keys, key_labels, p["wm_strength"])]
    sel = np.concatenate([rest, keys])
    group = np.concatenate([np.zeros(len(rest), int), np.ones(len(keys), int)])
    alpha, temp = float(p["snnl_alpha"]), float(p["T_opt"])

    def entangle(h):
        # maximise SNNL between key and clean embeddings
        loss, g = snnl_and_grad(h[sel], group, temp)
        dh = np.zeros_like(h)
        dh[sel] = -alpha * g
        return -alpha * loss, dh

    model = fit(init, graph, graph.features, terms, _config(epochs, seed), hidden_loss=entangle)
    art = WatermarkArtifact("SurviveWM", probe_nodes=keys, probe_labels=key_labels.astype(np.int64),
                            meta={"wm_strength": p["wm_strength"], "snnl_alpha": alpha, "T_opt": temp})
    return model, art


def _low_signal_dims(x, y, fraction):
    """Boolean mask of the ``fraction`` of feature dims with the smallest
    between-class F-score (ties broken by index)."""
    d = x.shape[1]
    k = max(1, int(round(fraction * d)))
    classes = np.unique(y)
    mu = x.mean(axis=0)
    between = sum((y == c).sum() * (x[y == c].mean(axis=0) - mu) ** 2 for c in classes)
    within = sum(((x[y == c] - x[y == c].mean(axis=0)) ** 2).sum(axis=0) for c in classes)
    score = between / np.maximum(within, 1e-12)
    mask = np.zeros(d, dtype=bool)
    mask[np.lexsort((np.arange(d), score))[:k]] = True
    return mask


def _trigger_pgd(model, s, x, nodes, support, delta, target_class, eps, steps, free=None, shared=False):
    """Signed-gradient steps on the rows of ``support`` pushing ``nodes``
    toward ``target_class``; only dims in ``free`` may move. ``shared``
    keeps one perturbation row for every perturbed node."""
    step = eps / 4.0
    base = x[support] - delta
    y = np.full(len(nodes), target_class)
    for _ in range(steps):
        xx = x.copy()
        xx[support] = base + delta
        logits, cache = forward_cache(model, s, xx)
        _, dlogits = terms_loss(logits, [LossTerm(nodes, y)])
        _, dx = backward(model, s, cache, dlogits, want_input=True)
        g = dx[support]
        if shared:
            g = np.broadcast_to(g.sum(axis=0), g.shape)
        move = np.sign(g)
        if free is not None:
            move[:, ~free] = 0.0
        delta = np.clip(delta - step * move, -eps, eps)
    return delta


def _imperceptible_wm(spec, graph, splits, train_idx, init, rng, seed, epochs, baseline):
    p = spec.params
    eps = float(p["epsilon"])
    pool = splits.val if len(splits.val) else np.setdiff1d(np.arange(graph.num_nodes), train_idx)
    target_class = int(rng.integers(graph.num_classes))
    if p["avoid_clean_labels"]:
        # triggers a clean model would already send to the target class prove nothing
        clean = _clean_model(graph, train_idx, init, seed, epochs, baseline)
        natural = np.argmax(forward(clean, graph, graph.features), axis=1)
        off = pool[natural[pool] != target_class]
        if len(off) >= int(p["trigger_count"]):
            pool = off
    trig = _pick(rng, pool, int(p["trigger_count"]))
    free = _low_signal_dims(graph.features[train_idx], graph.labels[train_idx], p["free_dim_fraction"])
    s = Structure.of(graph)
    # perturb each trigger's closed neighbourhood so the pattern survives aggregation
    if p["perturb_neighbourhood"]:
        support = np.union1d(trig, s.adjacency[trig].indices)
    else:
        support = trig
    x_clean = np.array(graph.features, dtype=np.float64)
    x = x_clean.copy()
    delta = np.zeros((len(support), graph.feat_dim))
    # clean pass: triggers keep their own labels; perturbed pass: target class
    anchored = np.union1d(train_idx, trig)
    clean_terms = [LossTerm(anchored, graph.labels[anchored], 1.0)]
    wm_terms = [LossTerm(trig, np.full(len(trig), target_class), float(p["wm_weight"]))]
    per_round = int(p["epochs_per_round"])
    steps = int(p["trigger_steps"])
    model = init.copy()
    cfg = _config(epochs, seed)
    drng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    for epoch in range(epochs):
        if epoch % per_round == 0:
            x[support] = graph.features[support] + delta
            delta = _trigger_pgd(model, s, x, trig, support, delta, target_class, eps, steps, free,
                                 bool(p["shared_trigger"]))
            x[support] = graph.features[support] + delta
        logits, cache = forward_cache(model, s, x_clean, dropout_masks(model, x.shape, drng))
        loss, dlogits = terms_loss(logits, clean_terms)
        grads, _ = backward(model, s, cache, dlogits)
        logits, cache = forward_cache(model, s, x, dropout_masks(model, x.shape, drng))
        wm_loss, dlogits = terms_loss(logits, wm_terms)
        if not np.isfinite(loss + wm_loss):
            raise TrainingDiverged(epoch, loss + wm_loss)
        wm_grads, _ = backward(model, s, cache, dlogits)
        opt.step(model.params, {k: grads[k] + wm_grads[k] for k in grads})
    art = WatermarkArtifact("ImperceptibleWM", target_class=target_class, probe_nodes=trig,
                            perturbation=delta,
                            meta={"epsilon": eps, "perturbed_nodes": [int(i) for i in support]})
    return model, art


def _integrity(spec, graph, splits, train_idx, init, rng, seed, epochs, baseline):
    model = _clean_model(graph, train_idx, init, seed, epochs, baseline)
    logits = forward(model, graph, graph.features)
    pool = np.setdiff1d(np.arange(graph.num_nodes), train_idx)
    srt = np.sort(logits[pool], axis=1)
    margin = srt[:, -1] - srt[:, -2]
    selection = spec["selection"]
    if selection not in ("consistent_margin", "largest_margin", "smallest_margin"):
        raise ValueError(f"unknown fingerprint selection {selection!r}")
    key = margin if selection == "smallest_margin" else -margin
    tiers = np.zeros(len(pool), dtype=int)
    if selection == "consistent_margin":
        # prefer nodes whose whole neighbourhood shares their predicted label
        pred = np.argmax(logits, axis=1)
        adj = Structure.of(graph).adjacency.tocsr()
        for i, v in enumerate(pool):
            nb = adj.indices[adj.indptr[v]:adj.indptr[v + 1]]
            tiers[i] = 0 if len(nb) and np.all(pred[nb] == pred[v]) else 1
    order = np.lexsort((pool, key, tiers))
    fp = np.sort(pool[order[: int(spec["fingerprint_count"])]])
    labels = np.argmax(logits[fp], axis=1)
    art = WatermarkArtifact("Integrity", probe_nodes=fp, probe_labels=labels.astype(np.int64),
                            meta={"selection": selection})
    return model, art


# ---------------------------------------------------------------- verification

MODES = {
    "BackdoorWM": "trigger_hit",
    "ImperceptibleWM": "trigger_hit",
    "RandomWM": "wm_graph_acc",
    "SurviveWM": "marker_acc",
    "Integrity": "fingerprint_match",
}


def _labels_on(subject, features, edges, nodes):
    if isinstance(subject, QueryOracle):
        return subject.owner_probe(features, edges, nodes).hard
    if isinstance(subject, GnnModel):
        logits = forward(subject, Structure(edges, len(features)), features)
        return np.argmax(logits[nodes], axis=1)
    raise TypeError(f"cannot verify against {type(subject).__name__}")


def verify(spec, artifact, subject, graph):
    """Verification rate of ``artifact`` on a model or oracle.

    ``graph`` is the deployed graph the probes refer to. The same code path
    serves the protected target and an extracted surrogate.
    """
    kind = spec.kind if isinstance(spec, DefenseSpec) else str(spec)
    if kind != artifact.kind:
        raise ValueError(f"artifact is {artifact.kind}, spec is {kind}")
    a = artifact
    if kind == "BackdoorWM":
        x = _with_trigger(graph.features, a.probe_nodes, a.trigger_dims, a.trigger_value)
        pred = _labels_on(subject, x, graph.edges, a.probe_nodes)
        return VerificationReport.from_matches(pred == a.target_class, MODES[kind])
    if kind == "ImperceptibleWM":
        x = np.array(graph.features, dtype=np.float64)
        x[np.asarray(a.meta.get("perturbed_nodes", a.probe_nodes), dtype=np.int64)] += a.perturbation
        pred = _labels_on(subject, x, graph.edges, a.probe_nodes)
        return VerificationReport.from_matches(pred == a.target_class, MODES[kind])
    if kind == "RandomWM":
        wm = a.wm_graph
        pred = _labels_on(subject, wm.features, wm.edges, np.arange(wm.num_nodes))
        return VerificationReport.from_matches(pred == wm.labels, MODES[kind])
    if kind in ("SurviveWM", "Integrity"):
        pred = _labels_on(subject, graph.features, graph.edges, a.probe_nodes)
        return VerificationReport.from_matches(pred == a.probe_labels, MODES[kind])
    raise ValueError(f"{kind} has no verification procedure")


def marker_accuracy(oracle, nodes, seed=0):
    """Share of ``nodes`` whose defended answer keeps the clean top-1 label:
    the verification proxy for inference-time defenses."""
    nodes = np.asarray(nodes, dtype=np.int64)
    clean = np.argmax(oracle.clean_probs()[nodes], axis=1)
    got = oracle.owner_probe(oracle.graph.features, oracle.graph.edges, nodes, seed=seed).hard
    return VerificationReport.from_matches(got == clean, "marker_acc")


def e_ave(subject_rate, clean_rate, random_rate):
    """1 when the subject beats both references strictly, else 0."""
    return int(subject_rate > clean_rate and subject_rate > random_rate)


def e_ave_aggregate(outcomes):
    outcomes = list(outcomes)
    return float(np.mean(outcomes)) if outcomes else 0.0
