"""Budget-accounted black-box endpoint around a (possibly defended) target."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import Structure, forward, softmax

log = logging.getLogger(__name__)

RESPONSE_MODES = ("soft_probs", "hard_label", "quantized")


class BudgetExhausted(RuntimeError):
    """The oracle refuses a batch that would exceed its query budget."""


@dataclass(frozen=True)
class BudgetSpec:
    multiplier: float
    realized_nodes: int
    realized_fraction: float

    @classmethod
    def from_splits(cls, multiplier, splits, num_nodes):
        if multiplier <= 0:
            raise ValueError("budget multiplier must be > 0")
        k = min(int(np.floor(multiplier * len(splits.test) + 1e-9)), len(splits.query))
        if k == 0:
            raise ValueError(f"degenerate budget: floor({multiplier} * {len(splits.test)}) = 0")
        return cls(float(multiplier), k, k / num_nodes)


def sample_budget_nodes(splits, budget, seed):
    """Uniform sample without replacement from the query split.

    ``budget`` is a BudgetSpec or a multiplier of the test-split size.
    """
    if not isinstance(budget, BudgetSpec):
        k = min(int(np.floor(float(budget) * len(splits.test) + 1e-9)), len(splits.query))
        if k == 0:
            raise ValueError(f"degenerate budget: multiplier {budget} gives 0 query nodes")
    else:
        k = budget.realized_nodes
    rng = np.random.default_rng(seed)
    pool = np.asarray(splits.query, dtype=np.int64)
    return np.sort(rng.choice(pool, size=min(k, len(pool)), replace=False))


@dataclass
class QueryResponse:
    mode: str
    probs: np.ndarray | None = None  # (k, C) for soft / quantized
    labels: np.ndarray | None = None  # (k,) for hard_label

    @property
    def hard(self):
        return self.labels if self.labels is not None else np.argmax(self.probs, axis=1)

    def __len__(self):
        return len(self.labels if self.labels is not None else self.probs)


@dataclass
class QueryOracle:
    """Transductive endpoint: node-id queries are answered from one forward
    pass of the target over its deployed graph. Attackers that synthesise
    their own inputs use ``query_graph``, which runs the target on a
    caller-supplied graph and is charged the same way.
    """

    target: object
    graph: object  # deployed Graph
    defenses: list = field(default_factory=list)
    response_mode: str = "soft_probs"
    budget_limit: int = 0
    seed: int = 0
    quantize_bits: int = 2
    queries_used: int = 0
    query_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.budget_limit < 1:
            raise ValueError("budget must be >= 1")
        if self.response_mode not in RESPONSE_MODES:
            raise ValueError(f"unknown response mode {self.response_mode!r}")
        self._structure = Structure.of(self.graph)
        self._clean_probs = softmax(forward(self.target, self._structure, self.graph.features))
        self.rng = np.random.default_rng(self.seed)
        self.state = {}
        self.time_spent = 0.0

    @property
    def num_classes(self):
        return self.target.num_classes

    @property
    def remaining(self):
        return self.budget_limit - self.queries_used

    def clean_probs(self):
        """Undefended target probabilities on the deployed graph (owner side)."""
        return self._clean_probs.copy()

    def _charge(self, k):
        if self.queries_used + k > self.budget_limit:
            raise BudgetExhausted(f"{k} queries requested, {self.remaining} remaining of {self.budget_limit}")
        self.queries_used += k

    def _respond(self, probs, feats):
        for transform in self.defenses:
            probs = transform(probs, feats, self)
        if self.response_mode == "hard_label":
            return QueryResponse("hard_label", labels=np.argmax(probs, axis=1))
        if self.response_mode == "quantized":
            from .defenses.inference import quantize

            probs = quantize(probs, self.quantize_bits)
        return QueryResponse(self.response_mode, probs=probs)

    def query(self, node_ids):
        ids = np.asarray(node_ids, dtype=np.int64).ravel()
        if len(ids) == 0:
            return self._respond(np.zeros((0, self.num_classes)), np.zeros((0, self.graph.feat_dim)))
        if ids.min() < 0 or ids.max() >= self.graph.num_nodes:
            raise IndexError("query node id outside the deployed graph")
        self._charge(len(ids))
        t0 = time.perf_counter()
        self.query_log.append({"kind": "nodes", "ids": ids.tolist(), "t": time.monotonic()})
        out = self._respond(self._clean_probs[ids].copy(), self.graph.features[ids])
        self.time_spent += time.perf_counter() - t0
        return out

    def query_graph(self, features, edges, node_ids):
        """Answer for ``node_ids`` of an attacker-supplied graph."""
        features = np.asarray(features, dtype=np.float64)
        ids = np.asarray(node_ids, dtype=np.int64).ravel()
        if len(ids) == 0:
            return self._respond(np.zeros((0, self.num_classes)), np.zeros((0, features.shape[1])))
        if ids.min() < 0 or ids.max() >= len(features):
            raise IndexError("query node id outside the supplied graph")
        self._charge(len(ids))
        t0 = time.perf_counter()
        self.query_log.append({"kind": "graph", "ids": ids.tolist(), "n": len(features), "t": time.monotonic()})
        probs = softmax(forward(self.target, Structure(edges, len(features)), features))[ids]
        out = self._respond(probs, features[ids])
        self.time_spent += time.perf_counter() - t0
        return out

    def owner_probe(self, features, edges, node_ids, seed=0):
        """Owner-side probe through the defense chain: no budget charge,
        no query log, and scratch detector state so attacker-facing state is
        untouched. Returns a QueryResponse."""
        from types import SimpleNamespace

        ids = np.asarray(node_ids, dtype=np.int64).ravel()
        probs = softmax(forward(self.target, Structure(edges, len(features)), features))[ids]
        ctx = SimpleNamespace(rng=np.random.default_rng(seed), state={}, graph=self.graph)
        for transform in self.defenses:
            probs = transform(probs, features[ids], ctx)
        if self.response_mode == "hard_label":
            return QueryResponse("hard_label", labels=np.argmax(probs, axis=1))
        return QueryResponse(self.response_mode, probs=probs)

    def export_log(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.query_log:
                fh.write(json.dumps(entry) + "\n")


def make_oracle(target, graph, defense_chain=(), response_mode="soft_probs", budget=1, seed=0):
    """Build an oracle; ``defense_chain`` items are inference transforms or
    DefenseSpec objects of an inference-time kind, applied in order."""
    from .defenses.inference import build_transform

    chain = [build_transform(d) for d in defense_chain]
    budget_limit = budget.realized_nodes if isinstance(budget, BudgetSpec) else int(budget)
    return QueryOracle(target, graph, chain, response_mode, budget_limit, seed)
