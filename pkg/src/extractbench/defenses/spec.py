from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import binio
from ..graph import Graph

TRAINING_KINDS = ("RandomWM", "BackdoorWM", "SurviveWM", "ImperceptibleWM", "Integrity")
INFERENCE_KINDS = ("OP_low", "OP_high", "PR_2bit", "PR_top1", "PRADA", "AdaptMisinfo", "GradRedir")
DEFENSE_KINDS = TRAINING_KINDS + INFERENCE_KINDS

DEFAULTS = {
    "RandomWM": {"wm_node_ratio": 0.002, "wm_nodes": None, "min_wm_nodes": 10, "wm_avg_degree": 1.0,
                 "wm_weight": 1.0, "avoid_clean_labels": True},
    "BackdoorWM": {"trigger_rate": 0.01, "min_trigger_nodes": 10, "trigger_dims": 20,
                   "trigger_value": 0.99, "joint_alpha": 0.3, "pretrain_epochs": 100},
    "SurviveWM": {"wm_strength": 0.25, "snnl_alpha": 0.1, "key_ratio": 0.1, "T_opt": 20.0},
    "ImperceptibleWM": {"epsilon": 0.25, "trigger_count": 20, "trigger_steps": 10,
                        "epochs_per_round": 20, "wm_weight": 1.0, "avoid_clean_labels": True,
                        "free_dim_fraction": 0.5, "shared_trigger": True,
                        "perturb_neighbourhood": True},
    "Integrity": {"fingerprint_count": 20, "selection": "consistent_margin"},
    "OP_low": {"sigma": 0.05},
    "OP_high": {"sigma": 0.20},
    "PR_2bit": {"bits": 2},
    "PR_top1": {},
    "PRADA": {"window": 100, "percentile": 10.0, "threshold": 0.5, "min_queries": 20},
    "AdaptMisinfo": {"confidence_threshold": 0.6},
    "GradRedir": {"redirect_strength": 0.5},
}


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown params {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)

    @property
    def training_time(self):
        return self.kind in TRAINING_KINDS

    def __getitem__(self, key):
        return self.params[key]

    def with_params(self, **kw):
        return DefenseSpec(self.kind, {**self.params, **kw})

    def as_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class VerificationReport:
    rate: float
    mode: str
    n_probes: int
    matches: int

    @classmethod
    def from_matches(cls, matches, mode):
        matches = np.asarray(matches, dtype=bool)
        n = len(matches)
        k = int(matches.sum())
        return cls(k / n if n else 0.0, mode, n, k)


@dataclass(eq=False)
class WatermarkArtifact:
    """Secret material needed to verify ownership later."""

    kind: str
    target_class: int | None = None
    probe_nodes: np.ndarray | None = None
    probe_labels: np.ndarray | None = None
    trigger_dims: np.ndarray | None = None
    trigger_value: float | None = None
    perturbation: np.ndarray | None = None
    wm_graph: Graph | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path):
        meta = {"kind": "watermark-artifact", "defense": self.kind, "target_class": self.target_class,
                "trigger_value": self.trigger_value, "meta": self.meta}
        arrays = {}
        for name in ("probe_nodes", "probe_labels", "trigger_dims", "perturbation"):
            val = getattr(self, name)
            if val is not None:
                arrays[name] = np.asarray(val)
        if self.wm_graph is not None:
            g = self.wm_graph
            meta["wm_graph"] = {"num_nodes": g.num_nodes, "num_classes": g.num_classes, "name": g.name}
            arrays["wm_edges"] = g.edges.astype("<i8")
            arrays["wm_features"] = g.features.astype("<f8")
            arrays["wm_labels"] = g.labels.astype("<i8")
        binio.write(path, meta, arrays)

    @classmethod
    def load(cls, path):
        meta, arrays = binio.read(path)
        if meta.get("kind") != "watermark-artifact":
            raise ValueError(f"{path}: not a watermark artifact")
        wm = None
        if "wm_graph" in meta:
            g = meta["wm_graph"]
            wm = Graph(g["num_nodes"], arrays["wm_edges"].astype(np.int64), arrays["wm_features"],
                       arrays["wm_labels"].astype(np.int64), g["num_classes"], g["name"])
        return cls(meta["defense"], meta["target_class"], arrays.get("probe_nodes"),
                   arrays.get("probe_labels"), arrays.get("trigger_dims"), meta["trigger_value"],
                   arrays.get("perturbation"), wm, meta.get("meta", {}))
