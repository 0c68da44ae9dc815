"""Plot-ready CSV tables built from run records."""

from __future__ import annotations

import csv

import numpy as np

from .metrics import SUMMARY_STATS, aggregate

REPORT_KINDS = ("leaderboard", "curves", "survival")

_MAIN_METRIC = {"extraction": "fidelity", "ownership": "verification", "joint": "survival"}


def _ok(records):
    return [r for r in records if not r.get("error")]


def leaderboard(records):
    """Summary of each track's headline metric, best median first."""
    keys = ("track", "dataset", "attack", "defense", "regime", "budget")
    rows = []
    for track in sorted({r["header"]["track"] for r in records}):
        subset = [r for r in _ok(records) if r["header"]["track"] == track]
        for row in aggregate(subset, _MAIN_METRIC[track], keys):
            row["metric"] = _MAIN_METRIC[track]
            rows.append(row)
    rows.sort(key=lambda r: (r["track"], -(r["median"] if r["median"] is not None else -np.inf)))
    cols = list(keys) + ["metric"] + list(SUMMARY_STATS)
    return cols, [[r.get(c) for c in cols] for r in rows]


def budget_curves(records, metric="fidelity"):
    keys = ("dataset", "attack", "budget")
    rows = aggregate(_ok(records), metric, keys)
    cols = list(keys) + ["mean", "std"]
    return cols, [[r.get(c) for c in cols] for r in rows]


def survival_matrix(records):
    """Median survival per (attack, defense) with row and column margins."""
    ok = [r for r in _ok(records) if r["header"]["track"] == "joint"]
    attacks = sorted({r["header"]["attack"] for r in ok})
    defenses = sorted({r["header"]["defense"] for r in ok})
    cell = {}
    for r in ok:
        cell.setdefault((r["header"]["attack"], r["header"]["defense"]), []).append(r["performance"]["survival"])
    med = {k: float(np.median(v)) for k, v in cell.items()}
    cols = ["attack"] + defenses + ["median"]
    rows = []
    for a in attacks:
        vals = [med.get((a, d)) for d in defenses]
        present = [v for v in vals if v is not None]
        rows.append([a] + vals + [float(np.median(present)) if present else None])
    col_meds = []
    for d in defenses:
        present = [med[(a, d)] for a in attacks if (a, d) in med]
        col_meds.append(float(np.median(present)) if present else None)
    every = list(med.values())
    rows.append(["median"] + col_meds + [float(np.median(every)) if every else None])
    return cols, rows


def report(records, kind):
    if kind == "leaderboard":
        return leaderboard(records)
    if kind == "curves":
        return budget_curves(records)
    if kind == "survival":
        return survival_matrix(records)
    raise ValueError(f"unknown report kind {kind!r}")


def write_csv(cols, rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
