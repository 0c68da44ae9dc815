"""Evaluation metrics joining attack and defense outputs."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .defenses.spec import VerificationReport

log = logging.getLogger(__name__)

SUMMARY_STATS = ("n", "mean", "std", "median", "iqr")


@dataclass(frozen=True)
class FidelityScore:
    value: float
    n: int

    def __float__(self):
        return self.value


def _hard(p):
    p = np.asarray(getattr(p, "probs", p))
    return np.argmax(p, axis=1) if p.ndim == 2 else p


def fidelity(surrogate_preds, target_preds, test_mask=None):
    """Fraction of test nodes where the two hard labelings agree."""
    a, b = _hard(surrogate_preds), _hard(target_preds)
    if a.shape != b.shape:
        raise ValueError("prediction arrays differ in length")
    if test_mask is not None:
        m = np.asarray(test_mask)
        idx = np.flatnonzero(m) if m.dtype == bool else m.astype(np.int64)
        a, b = a[idx], b[idx]
    n = len(a)
    agree = int((a == b).sum())
    return FidelityScore(agree / n if n else 0.0, n)


def utility_drop(defended_acc, baseline_acc):
    """Baseline minus defended accuracy, in percentage points. Inputs are
    fractions; negative means the defended model is better."""
    return 100.0 * (float(baseline_acc) - float(defended_acc))


def sample_efficiency(fidelity_by_budget):
    """Smallest budget whose fidelity reaches 90% of the best over budgets."""
    if not fidelity_by_budget:
        raise ValueError("empty curve")
    items = sorted((float(b), float(f)) for b, f in fidelity_by_budget.items())
    best = max(f for _, f in items)
    for b, f in items:
        if f >= 0.9 * best - 1e-12:
            return b
    return items[-1][0]


@dataclass(frozen=True)
class SurvivalPair:
    on_target: VerificationReport
    on_surrogate: VerificationReport

    def __post_init__(self):
        if self.on_target.n_probes != self.on_surrogate.n_probes:
            raise ValueError("survival reports use different probe sets")

    @property
    def ratio(self):
        t = self.on_target.rate
        return self.on_surrogate.rate / t if t > 0 else float("nan")


def summarize(values):
    """n, mean, std (population), median and type-7 IQR of a value list."""
    v = np.asarray([x for x in values if x is not None and not _isnan(x)], dtype=np.float64)
    if not len(v):
        return None
    q25, q50, q75 = np.percentile(v, [25, 50, 75])
    return {"n": int(len(v)), "mean": float(v.mean()), "std": float(v.std()),
            "median": float(q50), "iqr": float(q75 - q25)}


def _isnan(x):
    return isinstance(x, float) and math.isnan(x)


def _get(rec, key):
    if key in rec:
        return rec[key]
    for sub in ("header", "performance", "cost"):
        if isinstance(rec.get(sub), dict) and key in rec[sub]:
            return rec[sub][key]
    return None


def aggregate(records, metric, keys=("dataset", "attack", "defense", "regime", "budget")):
    """Group records by ``keys`` and summarise ``metric`` per group.

    Output rows are sorted by their key tuple. Groups with no usable value
    are reported as warning rows with n = 0.
    """
    groups = defaultdict(list)
    for rec in records:
        k = tuple(_get(rec, key) for key in keys)
        groups[k].append(_get(rec, metric))
    rows = []
    for k in sorted(groups, key=lambda t: tuple((v is None, str(v) if not isinstance(v, (int, float)) else v)
                                                 for v in t)):
        row = dict(zip(keys, k))
        stats = summarize(groups[k])
        if stats is None:
            log.warning("group %s has no values for %s", k, metric)
            row.update({"n": 0, "mean": None, "std": None, "median": None, "iqr": None, "warning": "empty"})
        else:
            row.update(stats)
        rows.append(row)
    return rows


def write_summary_csv(rows, path, keys):
    cols = list(keys) + list(SUMMARY_STATS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])
