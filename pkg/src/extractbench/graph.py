"""Graphs, bundle I/O, SBM generation, splits, regimes and structural statistics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

REGIME_KINDS = ("both", "x_only", "a_only", "data_free")

# provenance flags for RegimeView rows
REAL, MASKED, SYNTHETIC = 0, 1, 2

DEFAULT_SYNTH_DENSITY = 0.01


class GraphFormatError(ValueError):
    """A bundle file is missing or malformed. Carries file and line."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


def canonical_edges(edges, num_nodes=None):
    """Return (E, 2) int64 array of unique undirected pairs with u < v, sorted.

    Self loops are dropped. Also returns the number of dropped self loops and
    duplicates.
    """
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if num_nodes is not None and arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ValueError("edge endpoint out of range")
    loops = arr[:, 0] == arr[:, 1]
    arr = arr[~loops]
    arr = np.sort(arr, axis=1)
    uniq = np.unique(arr, axis=0) if arr.size else arr.reshape(0, 2)
    return uniq, int(loops.sum()), int(len(arr) - len(uniq))


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (E, 2), u < v, unique, sorted
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "graph"

    def __post_init__(self):
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2:
            raise ValueError("edges must be (E, 2)")
        if len(e):
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(e[:, 0] >= e[:, 1]):
                raise ValueError("edges must be canonical (u < v, no self loops)")
            if len(np.unique(e, axis=0)) != len(e):
                raise ValueError("duplicate edges")
        if self.features.shape[0] != self.num_nodes:
            raise ValueError("features row count != num_nodes")
        if self.labels.shape != (self.num_nodes,):
            raise ValueError("labels length != num_nodes")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        for arr in (self.edges, self.features, self.labels):
            arr.setflags(write=False)

    @classmethod
    def build(cls, num_nodes, edges, features, labels, num_classes, name="graph"):
        e, _, _ = canonical_edges(edges, num_nodes)
        return cls(
            num_nodes=int(num_nodes),
            edges=e,
            features=np.array(features, dtype=np.float64),
            labels=np.array(labels, dtype=np.int64),
            num_classes=int(num_classes),
            name=name,
        )

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def feat_dim(self):
        return self.features.shape[1]

    def adjacency(self):
        return edges_to_adjacency(self.edges, self.num_nodes)


def edges_to_adjacency(edges, n):
    """Symmetric 0/1 CSR adjacency for a canonical edge array."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    return a


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    query: np.ndarray
    stratified: bool = True

    def validate(self, num_nodes):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.val, self.test, self.query)]
        allidx = np.concatenate(parts)
        if len(allidx) and (allidx.min() < 0 or allidx.max() >= num_nodes):
            raise ValueError("split index out of range")
        if len(np.unique(allidx)) != len(allidx):
            raise ValueError("splits are not pairwise disjoint")
        if len(self.test) == 0 or len(self.query) == 0:
            raise ValueError("test and query splits must be non-empty")

    def as_dict(self):
        return {k: [int(i) for i in getattr(self, k)] for k in ("train", "val", "test", "query")}


# ---------------------------------------------------------------- bundle I/O

def load_graph_bundle(path):
    """Read a graph bundle directory. Returns (Graph, SplitSpec).

    Duplicate and self-loop edges are dropped; the counts are logged and
    stored on ``load_graph_bundle.last_report``.
    """
    root = Path(path)
    files = {k: root / k for k in ("meta.json", "edges.tsv", "features.csv", "labels.csv", "splits.json")}
    for name, f in files.items():
        if not f.is_file():
            raise GraphFormatError("missing bundle file", path=f)

    meta = json.loads(files["meta.json"].read_text(encoding="utf-8"))
    try:
        n = int(meta["num_nodes"])
        d = int(meta["feat_dim"])
        c = int(meta["num_classes"])
    except KeyError as exc:
        raise GraphFormatError(f"meta missing key {exc}", path=files["meta.json"]) from None
    name = meta.get("name", root.name)

    pairs = []
    with open(files["edges.tsv"], encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise GraphFormatError("expected 'u<TAB>v'", files["edges.tsv"], lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError("non-integer node id", files["edges.tsv"], lineno) from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(f"node index out of range [0, {n})", files["edges.tsv"], lineno)
            pairs.append((u, v))
    edges, n_loops, n_dups = canonical_edges(np.array(pairs, dtype=np.int64).reshape(-1, 2))

    rows = []
    with open(files["features.csv"], encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(x) for x in line.split(",")]
            except ValueError:
                raise GraphFormatError("non-numeric feature", files["features.csv"], lineno) from None
            if len(row) != d:
                raise GraphFormatError(f"expected {d} columns, got {len(row)}", files["features.csv"], lineno)
            rows.append(row)
    if len(rows) != n:
        raise GraphFormatError(f"expected {n} feature rows, got {len(rows)}", files["features.csv"])
    features = np.array(rows, dtype=np.float64).reshape(n, d)

    labels = []
    with open(files["labels.csv"], encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                y = int(line)
            except ValueError:
                raise GraphFormatError("non-integer label", files["labels.csv"], lineno) from None
            if not 0 <= y < c:
                raise GraphFormatError(f"label out of range [0, {c})", files["labels.csv"], lineno)
            labels.append(y)
    if len(labels) != n:
        raise GraphFormatError(f"expected {n} labels, got {len(labels)}", files["labels.csv"])

    sj = json.loads(files["splits.json"].read_text(encoding="utf-8"))
    try:
        splits = SplitSpec(*(np.array(sj[k], dtype=np.int64) for k in ("train", "val", "test", "query")))
        splits.validate(n)
    except (KeyError, ValueError) as exc:
        raise GraphFormatError(f"invalid splits: {exc}", files["splits.json"]) from None

    if n_loops or n_dups:
        log.warning("%s: dropped %d self loops and %d duplicate edges", root, n_loops, n_dups)
    load_graph_bundle.last_report = {"self_loops_dropped": n_loops, "duplicates_dropped": n_dups}
    graph = Graph(n, edges, features, np.array(labels, dtype=np.int64), c, name=name)
    return graph, splits


load_graph_bundle.last_report = {}


def save_graph_bundle(graph, splits, path):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": graph.num_nodes, "feat_dim": graph.feat_dim,
            "num_classes": graph.num_classes, "name": graph.name}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    with open(root / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(root / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        for y in graph.labels:
            fh.write(f"{int(y)}\n")
    (root / "splits.json").write_text(json.dumps(splits.as_dict()) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- generators

def erdos_renyi_edges(n, p, rng):
    """Unique undirected pairs, each present independently with prob p."""
    if n < 2 or p <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)


def generate_sbm(n, num_classes, p_in, p_out, feat_dim, feat_signal, seed, name=None):
    """Planted-partition graph with class-mean-plus-noise features.

    Class c has mean ``feat_signal * e_(c mod feat_dim)``; every entry gets
    unit Gaussian noise. Labels are assigned round-robin so classes are
    balanced to within one node.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if n < num_classes:
        raise ValueError("need n >= num_classes")
    if num_classes < 2 or feat_dim < 1:
        raise ValueError("need num_classes >= 2 and feat_dim >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    means = np.zeros((num_classes, feat_dim))
    means[np.arange(num_classes), np.arange(num_classes) % feat_dim] = feat_signal
    features = means[labels] + rng.standard_normal((n, feat_dim))
    return Graph(n, edges, features, labels, num_classes, name=name or f"sbm{n}")


# ---------------------------------------------------------------- splits

SPLIT_NAMES = ("train", "val", "test", "query")


def make_splits(graph, fractions, seed):
    """Disjoint train/val/test/query split, stratified by label when possible.

    ``fractions`` is a mapping (or 4-sequence) of train/val/test/query
    fractions. Split sizes are ``floor(f * N)``. Stratified allocation uses
    largest-remainder per class; if any class has fewer nodes than the number
    of non-empty split slots, the split falls back to a plain permutation and
    ``stratified`` is False on the result.
    """
    if not isinstance(fractions, dict):
        fractions = dict(zip(SPLIT_NAMES, fractions))
    fr = np.array([float(fractions[k]) for k in SPLIT_NAMES])
    if np.any(fr <= 0) or fr.sum() > 1 + 1e-12:
        raise ValueError("fractions must be positive and sum to <= 1")
    n = graph.num_nodes
    sizes = np.floor(fr * n + 1e-9).astype(int)
    rng = np.random.default_rng(seed)
    counts = np.bincount(graph.labels, minlength=graph.num_classes)

    stratified = bool(np.all(counts[counts > 0] >= np.count_nonzero(sizes)))
    if stratified:
        # per-class quota for each split, then fix totals by largest remainder
        quota = np.outer(counts, sizes) / n
        alloc = np.floor(quota).astype(int)
        for s in range(4):
            short = sizes[s] - alloc[:, s].sum()
            order = np.lexsort((np.arange(len(counts)), -(quota[:, s] - alloc[:, s])))
            for c in order:
                if short <= 0:
                    break
                if alloc[c].sum() < counts[c]:
                    alloc[c, s] += 1
                    short -= 1
            if short > 0:
                stratified = False
                break
    if stratified:
        parts = [[] for _ in range(4)]
        for c in range(graph.num_classes):
            idx = rng.permutation(np.flatnonzero(graph.labels == c))
            start = 0
            for s in range(4):
                parts[s].append(idx[start:start + alloc[c, s]])
                start += alloc[c, s]
        out = [np.sort(np.concatenate(p)).astype(np.int64) for p in parts]
    else:
        log.warning("make_splits: class too small for stratification, using unstratified split")
        perm = rng.permutation(n)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        out = [np.sort(perm[bounds[s]:bounds[s + 1]]).astype(np.int64) for s in range(4)]
    spec = SplitSpec(*out, stratified=stratified)
    spec.validate(n)
    return spec


# ---------------------------------------------------------------- statistics

@dataclass(frozen=True)
class StructuralStats:
    num_nodes: int
    num_edges: int
    avg_degree: float
    density: float
    edge_homophily: float
    homophily_defined: bool = True


def edge_homophily(graph):
    if graph.num_edges == 0:
        return 0.0
    y = graph.labels
    same = np.count_nonzero(y[graph.edges[:, 0]] == y[graph.edges[:, 1]])
    return same / graph.num_edges


def structural_stats(graph):
    n, e = graph.num_nodes, graph.num_edges
    density = 2.0 * e / (n * (n - 1)) if n >= 2 else 0.0
    return StructuralStats(
        num_nodes=n,
        num_edges=e,
        avg_degree=2.0 * e / n if n else 0.0,
        density=density,
        edge_homophily=edge_homophily(graph),
        homophily_defined=e > 0,
    )


def normalized_adjacency(edges, n=None):
    """D^-1/2 (A + I) D^-1/2 as CSR. Accepts a Graph or an edge array with n."""
    if isinstance(edges, Graph):
        n = edges.num_nodes
        edges = edges.edges
    a = edges_to_adjacency(edges, n) + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    d = sp.diags(dinv)
    out = (d @ a @ d).tocsr()
    out.sort_indices()
    return out


# ---------------------------------------------------------------- regimes

@dataclass(frozen=True)
class Regime:
    kind: str
    x_ratio: float
    a_ratio: float

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise ValueError(f"unknown regime {self.kind!r}")
        if not (0 <= self.x_ratio <= 1 and 0 <= self.a_ratio <= 1):
            raise ValueError("ratios must lie in [0, 1]")
        ok = {
            "both": self.x_ratio == 1 and self.a_ratio == 1,
            "x_only": self.a_ratio == 0,
            "a_only": self.x_ratio == 0,
            "data_free": self.x_ratio == 0 and self.a_ratio == 0,
        }[self.kind]
        if not ok:
            raise ValueError(f"ratios ({self.x_ratio}, {self.a_ratio}) inconsistent with {self.kind}")

    @classmethod
    def named(cls, kind, x_ratio=None, a_ratio=None):
        defaults = {"both": (1.0, 1.0), "x_only": (1.0, 0.0), "a_only": (0.0, 1.0), "data_free": (0.0, 0.0)}
        dx, da = defaults[kind]
        return cls(kind, dx if x_ratio is None else float(x_ratio), da if a_ratio is None else float(a_ratio))


@dataclass(frozen=True, eq=False)
class RegimeView:
    """What the attacker sees of the deployed graph."""

    regime: Regime
    num_nodes: int
    num_classes: int
    visible_features: np.ndarray
    visible_edges: np.ndarray
    provenance: np.ndarray  # per row: REAL / MASKED / SYNTHETIC
    edges_synthetic: bool = False
    notes: dict = field(default_factory=dict)

    @property
    def feat_dim(self):
        return self.visible_features.shape[1]

    @property
    def real_rows(self):
        return np.flatnonzero(self.provenance == REAL)


def apply_regime(graph, regime, seed):
    """Mask the graph according to ``regime``.

    Partial ratios keep a uniform ``floor(x_ratio * N)`` subset of feature
    rows (the rest zeroed, flagged masked) and a uniform ``floor(a_ratio * E)``
    subset of edges. ``data_free`` returns a fully synthetic stand-in: unit
    Gaussian features and an Erdos-Renyi graph at density 0.01.
    """
    if isinstance(graph, RegimeView):
        # views are already masked; only the full-visibility regime composes
        if regime.kind != "both":
            raise ValueError("only regime 'both' can be applied to a RegimeView")
        return graph
    rng = np.random.default_rng(seed)
    n, d = graph.num_nodes, graph.feat_dim
    if regime.kind == "data_free":
        feats = rng.standard_normal((n, d))
        edges = erdos_renyi_edges(n, DEFAULT_SYNTH_DENSITY, rng)
        prov = np.full(n, SYNTHETIC, dtype=np.int8)
        view = RegimeView(regime, n, graph.num_classes, feats, edges, prov, edges_synthetic=True)
    else:
        k = int(np.floor(regime.x_ratio * n + 1e-9))
        if k == n:
            feats = graph.features.copy()
            prov = np.full(n, REAL, dtype=np.int8)
        else:
            keep = rng.choice(n, size=k, replace=False)
            feats = np.zeros_like(graph.features)
            feats[keep] = graph.features[keep]
            prov = np.full(n, MASKED, dtype=np.int8)
            prov[keep] = REAL
        m = int(np.floor(regime.a_ratio * graph.num_edges + 1e-9))
        if m == graph.num_edges:
            edges = graph.edges.copy()
        else:
            sel = np.sort(rng.choice(graph.num_edges, size=m, replace=False))
            edges = graph.edges[sel].copy()
        view = RegimeView(regime, n, graph.num_classes, feats, edges, prov)
    for arr in (view.visible_features, view.visible_edges, view.provenance):
        arr.setflags(write=False)
    return view
