"""Experiment orchestration: extraction, ownership and joint tracks.

A grid is split into units, one per (dataset, seed). Each unit builds its
graph, splits and undefended target once and then walks its cells in a
fixed order, so the record stream depends only on the config and the root
seed, never on the worker count.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, run_attack
from .defenses import DefenseSpec, marker_accuracy, train_defended, verify
from .graph import Regime, apply_regime, generate_sbm, load_graph_bundle, make_splits
from .metrics import fidelity, utility_drop
from .nn import Structure, accuracy, forward, init_model, macro_f1, macro_precision, macro_recall, train
from .nn.train import TrainConfig
from .oracle import BudgetSpec, make_oracle, sample_budget_nodes

log = logging.getLogger(__name__)

TRACKS = ("extraction", "ownership", "joint")
DEFAULT_BUDGETS = (0.05, 0.10, 0.25, 0.50, 1.00)
DEFAULT_FRACTIONS = (0.2, 0.1, 0.2, 0.5)


# ---------------------------------------------------------------- seeding

class SeedTree:
    """Labelled child streams derived from one root seed.

    Each stream is a Philox generator keyed by a hash of (root, labels), so
    a stream depends only on its own labels: adding grid dimensions never
    shifts the randomness of existing cells.
    """

    def __init__(self, root):
        self.root = int(root)

    def seed(self, *labels):
        msg = json.dumps([self.root, *map(str, labels)]).encode()
        return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little") >> 1

    def stream(self, *labels):
        return np.random.Generator(np.random.Philox(key=self.seed(*labels)))


def root_seed(default=0):
    env = os.environ.get("BENCH_ROOT_SEED")
    return int(env) if env not in (None, "") else int(default)


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    datasets: list
    attacks: list = field(default_factory=lambda: ["MEA0"])
    defenses: list = field(default_factory=list)
    budgets: list = field(default_factory=lambda: list(DEFAULT_BUDGETS))
    regimes: list = field(default_factory=lambda: ["both"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    track: str = "extraction"
    output_dir: str = "runs"
    root_seed: int = 0
    joint_budget: float = 0.25
    target_backbone: str = "GCN"
    hidden_dim: int = 16
    epochs: int = 200
    split_fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    response_mode: str = "soft_probs"
    sweep: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.track not in TRACKS:
            raise ValueError(f"unknown track {self.track!r}")
        self.attacks = [a if isinstance(a, AttackSpec) else
                        AttackSpec(a) if isinstance(a, str) else AttackSpec(**a) for a in self.attacks]
        self.defenses = [d if isinstance(d, DefenseSpec) else
                         DefenseSpec(d) if isinstance(d, str) else DefenseSpec(d["kind"], d.get("params", {}))
                         for d in self.defenses]
        self.regimes = [r if isinstance(r, Regime) else
                        Regime.named(r) if isinstance(r, str) else Regime.named(**r) for r in self.regimes]
        for name in ("datasets", "budgets", "regimes", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"empty grid dimension: {name}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(b <= 0 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if self.track != "extraction" and not self.defenses and not self.sweep:
            raise ValueError(f"{self.track} track needs at least one defense")
        if self.track != "ownership" and not self.attacks:
            raise ValueError(f"{self.track} track needs at least one attack")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "datasets": self.datasets,
            "attacks": [a.as_dict() for a in self.attacks],
            "defenses": [d.as_dict() for d in self.defenses],
            "budgets": list(self.budgets),
            "regimes": [{"kind": r.kind, "x_ratio": r.x_ratio, "a_ratio": r.a_ratio} for r in self.regimes],
            "seeds": list(self.seeds), "track": self.track, "output_dir": self.output_dir,
            "root_seed": self.root_seed, "joint_budget": self.joint_budget,
            "target_backbone": self.target_backbone, "hidden_dim": self.hidden_dim, "epochs": self.epochs,
            "split_fractions": list(self.split_fractions), "response_mode": self.response_mode,
            "sweep": self.sweep, "workers": self.workers,
        }


# ---------------------------------------------------------------- per-unit setup

def dataset_name(ds):
    if "name" in ds:
        return ds["name"]
    if "bundle" in ds:
        return os.path.basename(os.path.normpath(ds["bundle"]))
    return "sbm"


def build_dataset(ds, seed, tree, fractions):
    name = dataset_name(ds)
    if "bundle" in ds:
        graph, splits = load_graph_bundle(ds["bundle"])
        return graph, splits
    params = dict(ds.get("sbm", ds))
    params.pop("name", None)
    gen_seed = params.pop("seed", None)
    if gen_seed is None:
        gen_seed = tree.seed("dataset-gen", name, seed)
    graph = generate_sbm(seed=gen_seed, name=name, **params)
    return graph, make_splits(graph, tuple(fractions), tree.seed("splits", name, seed))


@dataclass
class Unit:
    config: ExperimentConfig
    dataset_index: int
    seed: int


class UnitContext:
    """Graph, splits and undefended target shared by a unit's cells."""

    def __init__(self, unit):
        cfg = unit.config
        self.cfg = cfg
        self.seed = unit.seed
        self.tree = SeedTree(cfg.root_seed)
        self.ds = cfg.datasets[unit.dataset_index]
        self.name = dataset_name(self.ds)
        self.graph, self.splits = build_dataset(self.ds, unit.seed, self.tree, cfg.split_fractions)
        self.structure = Structure.of(self.graph)
        t0 = time.monotonic()
        init = init_model(cfg.target_backbone, self.graph.feat_dim, self.graph.num_classes, cfg.hidden_dim,
                          seed=self.tree.seed("target-init", self.name, unit.seed))
        self.target = train(init, self.structure, self.graph.features, self.graph.labels, self.splits.train,
                            TrainConfig(epochs=cfg.epochs, seed=self.tree.seed("target-train", self.name, unit.seed)))
        self.target_time = time.monotonic() - t0
        self.target_preds = self.predict(self.target)
        self._defended = {}

    def predict(self, model):
        return np.argmax(forward(model, self.structure, self.graph.features), axis=1)

    def defense_seed(self, spec):
        return self.tree.seed("defense", self.name, spec.kind, json.dumps(spec.params, sort_keys=True), self.seed)

    def defended(self, spec):
        """(model, artifact, train seconds) for a training-time defense, cached."""
        key = json.dumps(spec.as_dict(), sort_keys=True)
        if key not in self._defended:
            t0 = time.monotonic()
            model, artifact = train_defended(spec, self.graph, self.splits, self.defense_seed(spec) % 2**31,
                                             backbone=self.cfg.target_backbone, hidden_dim=self.cfg.hidden_dim,
                                             epochs=self.cfg.epochs, baseline=self.target)
            self._defended[key] = (model, artifact, time.monotonic() - t0)
        return self._defended[key]

    def header(self, track, attack=None, defense=None, config_index=0, budget=None, regime=None):
        h = {"track": track, "dataset": self.name,
             "attack": attack.kind if attack else None,
             "defense": defense.kind if defense else None,
             "defense_params": dict(defense.params) if defense else None,
             "config_index": config_index,
             "budget": budget.multiplier if budget else None,
             "realized_nodes": budget.realized_nodes if budget else None,
             "realized_fraction": budget.realized_fraction if budget else None,
             "regime": regime.kind if regime else None,
             "x_ratio": regime.x_ratio if regime else None,
             "a_ratio": regime.a_ratio if regime else None,
             "seed": self.seed,
             "target_backbone": self.cfg.target_backbone,
             "surrogate_backbone": attack.surrogate_backbone if attack else None}
        return h

    def quality(self, preds, reference):
        test = self.splits.test
        y = self.graph.labels
        return {"accuracy": accuracy(preds, y, test), "macro_f1": macro_f1(preds, y, test),
                "macro_precision": macro_precision(preds, y, test), "macro_recall": macro_recall(preds, y, test),
                "fidelity": fidelity(preds, reference, test).value}


def _record(header, performance=None, cost=None, accounting=None, error=None):
    return {"header": header, "performance": performance or {}, "accounting": accounting or {},
            "cost": {"gpu_memory_mb": None, **(cost or {})}, "error": error}


def _isolated(header, fn):
    try:
        return fn()
    except Exception as exc:  # grid isolation: record and continue
        log.error("cell %s failed: %s", header, exc)
        return _record(header, error={"type": type(exc).__name__, "message": str(exc),
                                      "trace": traceback.format_exc(limit=3)})


def _attack_cell(ctx, track, attack, budget_mult, regime, oracle_factory, reference, defense=None,
                 artifact=None, defended_model=None, config_index=0, verify_fn=None):
    cfg, tree, name, seed = ctx.cfg, ctx.tree, ctx.name, ctx.seed
    budget = BudgetSpec.from_splits(budget_mult, ctx.splits, ctx.graph.num_nodes)
    header = ctx.header(track, attack, defense, config_index, budget, regime)

    def run():
        oracle = oracle_factory(budget)
        nodes = sample_budget_nodes(ctx.splits, budget, tree.seed("budget", name, budget_mult, seed))
        view = apply_regime(ctx.graph, regime, tree.seed("regime", name, regime.kind, seed) % 2**31)
        # attack seed leaves out the regime: regime-blind attacks stay identical across regimes
        a_seed = tree.seed("attack", name, attack.kind, budget_mult, seed) % 2**31
        t0 = time.monotonic()
        res = run_attack(attack, oracle, view, nodes, a_seed, pool=ctx.splits.query)
        total = time.monotonic() - t0
        preds = ctx.predict(res.surrogate)
        perf = ctx.quality(preds, reference)
        if verify_fn is not None:
            perf["survival"] = verify_fn(res.surrogate)
        acct = {"queries_used": res.queries_used, "budget_nodes": budget.realized_nodes,
                "multiplicity": 1, "within_budget": res.queries_used <= budget.realized_nodes}
        cost = {"target_train_time": ctx.target_time, "query_time": oracle.time_spent,
                "surrogate_train_time": max(total - oracle.time_spent, 0.0), "total_time": total}
        return _record(header, perf, cost, acct)

    return _isolated(header, run)


# ---------------------------------------------------------------- tracks

def _extraction(ctx):
    cfg = ctx.cfg
    out = []
    for attack, budget, regime in itertools.product(cfg.attacks, cfg.budgets, cfg.regimes):
        factory = lambda b: make_oracle(ctx.target, ctx.graph, (), cfg.response_mode, b,
                                        ctx.tree.seed("noise", ctx.name, ctx.seed) % 2**31)
        out.append(_attack_cell(ctx, "extraction", attack, budget, regime, factory, ctx.target_preds))
    return out


def _inference_oracle(ctx, spec, budget):
    return make_oracle(ctx.target, ctx.graph, [spec], ctx.cfg.response_mode, budget,
                       ctx.defense_seed(spec) % 2**31)


def _defended_preds(ctx, spec, model=None):
    if spec.training_time:
        return ctx.predict(model)
    oracle = _inference_oracle(ctx, spec, 1)
    g = ctx.graph
    return oracle.owner_probe(g.features, g.edges, np.arange(g.num_nodes), seed=ctx.defense_seed(spec) % 2**31).hard


def _ownership_cell(ctx, spec, index):
    header = ctx.header("ownership", None, spec, index)

    def run():
        t0 = time.monotonic()
        base_acc = accuracy(ctx.target_preds, ctx.graph.labels, ctx.splits.test)
        if spec.training_time:
            model, artifact, t_train = ctx.defended(spec)
            preds = ctx.predict(model)
            rep = verify(spec, artifact, model, ctx.graph)
        else:
            t_train = 0.0
            preds = _defended_preds(ctx, spec)
            oracle = _inference_oracle(ctx, spec, 1)
            rep = marker_accuracy(oracle, ctx.splits.test, seed=ctx.defense_seed(spec) % 2**31)
        perf = ctx.quality(preds, ctx.target_preds)
        perf.update({"baseline_accuracy": base_acc, "utility_drop": utility_drop(perf["accuracy"], base_acc),
                     "verification": rep.rate, "verification_mode": rep.mode, "n_probes": rep.n_probes})
        cost = {"target_train_time": ctx.target_time, "defense_train_time": t_train,
                "total_time": time.monotonic() - t0}
        return _record(header, perf, cost)

    return _isolated(header, run)


def _ownership(ctx):
    return [_ownership_cell(ctx, spec, i) for i, spec in enumerate(_defense_points(ctx.cfg))]


def _joint(ctx):
    cfg = ctx.cfg
    out = []
    for index, spec in enumerate(_defense_points(cfg)):
        for attack, regime in itertools.product(cfg.attacks, cfg.regimes):
            budget = BudgetSpec.from_splits(cfg.joint_budget, ctx.splits, ctx.graph.num_nodes)
            header = ctx.header("joint", attack, spec, index, budget, regime)
            try:
                if spec.training_time:
                    model, artifact, _ = ctx.defended(spec)
                    reference = ctx.predict(model)
                    on_target = verify(spec, artifact, model, ctx.graph).rate
                    factory = lambda b, m=model: make_oracle(m, ctx.graph, (), cfg.response_mode, b,
                                                             ctx.defense_seed(spec) % 2**31)
                    check = lambda s, a=artifact, sp=spec: verify(sp, a, s, ctx.graph).rate
                else:
                    reference = _defended_preds(ctx, spec)
                    on_target = marker_accuracy(_inference_oracle(ctx, spec, 1), ctx.splits.test,
                                                seed=ctx.defense_seed(spec) % 2**31).rate
                    factory = lambda b, sp=spec: _inference_oracle(ctx, sp, b)
                    clean = ctx.target_preds[ctx.splits.test]
                    check = lambda s: float((ctx.predict(s)[ctx.splits.test] == clean).mean())
            except Exception as exc:
                out.append(_record(header, error={"type": type(exc).__name__, "message": str(exc)}))
                continue
            rec = _attack_cell(ctx, "joint", attack, cfg.joint_budget, regime, factory, reference, spec,
                               config_index=index, verify_fn=check)
            if rec["error"] is None:
                rec["performance"]["on_target_verification"] = on_target
            out.append(rec)
    return out


def _defense_points(cfg):
    """Declared defenses followed by the cartesian sweep points."""
    points = list(cfg.defenses)
    for kind, grid in sorted(cfg.sweep.items()):
        names = sorted(grid)
        for values in itertools.product(*(grid[n] for n in names)):
            points.append(DefenseSpec(kind, dict(zip(names, values))))
    return points


_TRACK_FN = {"extraction": _extraction, "ownership": _ownership, "joint": _joint}


def run_unit(unit):
    try:
        ctx = UnitContext(unit)
    except Exception as exc:
        cfg = unit.config
        header = {"track": cfg.track, "dataset": dataset_name(cfg.datasets[unit.dataset_index]), "seed": unit.seed}
        return [_record(header, error={"type": type(exc).__name__, "message": str(exc)})]
    return _TRACK_FN[unit.config.track](ctx)


def run_track(config, workers=None):
    """Run every grid cell of ``config`` and return the records in grid order."""
    config.root_seed = root_seed(config.root_seed)
    units = [Unit(config, d, s) for d in range(len(config.datasets)) for s in config.seeds]
    workers = config.workers if workers is None else workers
    if workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_unit, units))
    else:
        chunks = [run_unit(u) for u in units]
    return [rec for chunk in chunks for rec in chunk]


def run_extraction_track(config, workers=None):
    return run_track(dataclasses.replace(config, track="extraction"), workers)


def run_ownership_track(config, workers=None):
    return run_track(dataclasses.replace(config, track="ownership"), workers)


def run_joint_track(config, workers=None):
    return run_track(dataclasses.replace(config, track="joint"), workers)


def sweep(config, workers=None):
    """Cartesian expansion of ``config.sweep``; one configuration index per point."""
    if not config.sweep:
        raise ValueError("config has no sweep grid")
    track = config.track if config.track != "extraction" else "ownership"
    return run_track(dataclasses.replace(config, track=track, defenses=[]), workers)


# ---------------------------------------------------------------- persistence

def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=_jsonable, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def metric_fields(record):
    """The deterministic part of a record (everything but timings)."""
    return {k: record[k] for k in ("header", "performance", "accounting", "error") if k in record}


def check_budget_accounting(records):
    """Records whose oracle usage exceeded budget nodes x multiplicity."""
    bad = []
    for r in records:
        a = r.get("accounting") or {}
        if a and a["queries_used"] > a["budget_nodes"] * a["multiplicity"]:
            bad.append(r)
    return bad
