import json
import os

import numpy as np
import pytest

from extractbench import harness
from extractbench.cli import main
from extractbench.harness import (
    ExperimentConfig,
    SeedTree,
    check_budget_accounting,
    metric_fields,
    read_jsonl,
    run_track,
    sweep,
    write_jsonl,
)
from extractbench.report import budget_curves, leaderboard, report, survival_matrix

TINY = {"name": "tiny", "sbm": {"n": 150, "num_classes": 3, "p_in": 0.12, "p_out": 0.01,
                                "feat_dim": 16, "feat_signal": 1.5}}


def cfg(**kw):
    base = {"datasets": [TINY], "attacks": [{"kind": "MEA0", "epochs": 30}], "budgets": [0.25],
            "seeds": [0], "epochs": 40}
    return ExperimentConfig.from_dict({**base, **kw})


def dumps(records):
    return [json.dumps(metric_fields(r), sort_keys=True) for r in records]


def test_seed_tree():
    t = SeedTree(0)
    assert t.seed("a", 1) == SeedTree(0).seed("a", 1)
    assert len({t.seed("a", 1), t.seed("a", 2), t.seed("b", 1), SeedTree(1).seed("a", 1)}) == 4
    assert np.array_equal(t.stream("x").random(3), t.stream("x").random(3))


def test_root_seed_from_environment(monkeypatch):
    monkeypatch.setenv("BENCH_ROOT_SEED", "42")
    assert harness.root_seed(0) == 42
    monkeypatch.delenv("BENCH_ROOT_SEED")
    assert harness.root_seed(7) == 7


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"datasets": [TINY], "bogus": 1})
    with pytest.raises(ValueError):
        cfg(budgets=[])
    with pytest.raises(ValueError):
        cfg(seeds=[0, 0])
    with pytest.raises(ValueError):
        cfg(track="ownership")
    with pytest.raises(ValueError):
        cfg(attacks=[{"kind": "MEA7"}])
    c = cfg()
    assert ExperimentConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()


def test_grid_arithmetic_and_determinism():
    c = cfg(budgets=[0.05, 0.1, 0.25, 0.5, 1.0], seeds=[0, 1, 2])
    first = run_track(c)
    assert len(first) == 15 and all(r["error"] is None for r in first)
    assert [r["header"]["budget"] for r in first[:5]] == [0.05, 0.1, 0.25, 0.5, 1.0]
    assert dumps(first) == dumps(run_track(c))
    for r in first:
        assert all(v >= 0 for k, v in r["cost"].items() if k.endswith("_time"))
        assert r["accounting"]["queries_used"] <= r["accounting"]["budget_nodes"]


def test_parallel_workers_match_serial():
    c = cfg(seeds=[0, 1])
    assert dumps(run_track(c, workers=2)) == dumps(run_track(c, workers=1))


def test_failing_cell_is_isolated(monkeypatch):
    real = harness.run_attack

    def flaky(spec, *a, **kw):
        if spec.kind == "MEA1":
            raise RuntimeError("boom")
        return real(spec, *a, **kw)

    monkeypatch.setattr(harness, "run_attack", flaky)
    recs = run_track(cfg(attacks=["MEA0", "MEA1", "MEA2"]))
    assert [r["header"]["attack"] for r in recs] == ["MEA0", "MEA1", "MEA2"]
    assert recs[1]["error"]["type"] == "RuntimeError"
    assert recs[0]["error"] is None and recs[2]["error"] is None


def test_bad_dataset_yields_error_row(tmp_path):
    recs = run_track(cfg(datasets=[{"bundle": str(tmp_path / "missing")}, TINY]))
    assert recs[0]["error"] is not None and recs[0]["header"]["dataset"] == "missing"
    assert recs[1]["error"] is None


def test_ownership_track():
    recs = run_track(cfg(track="ownership", defenses=["Integrity", "OP_low", "PR_top1"]))
    by = {r["header"]["defense"]: r["performance"] for r in recs}
    assert by["Integrity"]["verification"] == 1.0
    assert by["Integrity"]["utility_drop"] == 0.0
    assert by["PR_top1"]["verification"] == 1.0 and by["PR_top1"]["fidelity"] == 1.0


def test_low_noise_keeps_accuracy_on_separated_logits():
    from conftest import SBM

    c = ExperimentConfig.from_dict({"datasets": [{"name": "sbm", "sbm": SBM}], "track": "ownership",
                                    "defenses": ["OP_low"], "seeds": [0, 1, 2]})
    drops = [r["performance"]["utility_drop"] for r in run_track(c)]
    assert abs(float(np.median(drops))) < 2.0


def test_joint_track_records_survival():
    recs = run_track(cfg(track="joint", defenses=["Integrity", "PR_top1"], attacks=["MEA0", "DFEA_II"]))
    assert len(recs) == 4
    for r in recs:
        p = r["performance"]
        assert 0.0 <= p["survival"] <= 1.0 and "on_target_verification" in p
        assert r["header"]["budget"] == 0.25
    assert not check_budget_accounting(recs)


def test_single_point_sweep_equals_plain_run():
    plain = run_track(cfg(track="ownership", defenses=[{"kind": "OP_low", "params": {"sigma": 0.1}}]))
    swept = sweep(cfg(track="ownership", sweep={"OP_low": {"sigma": [0.1]}}))
    assert dumps(plain) == dumps(swept)


def test_sweep_expands_cartesian_grid():
    recs = sweep(cfg(sweep={"OP_low": {"sigma": [0.01, 0.5]}, "PR_2bit": {"bits": [1, 2, 3]}}))
    assert [r["header"]["config_index"] for r in recs] == list(range(5))
    assert [r["header"]["defense_params"].get("sigma", r["header"]["defense_params"].get("bits"))
            for r in recs] == [0.01, 0.5, 1, 2, 3]


def test_budget_accounting_check():
    ok = {"accounting": {"queries_used": 5, "budget_nodes": 5, "multiplicity": 1}}
    bad = {"accounting": {"queries_used": 6, "budget_nodes": 5, "multiplicity": 1}}
    assert check_budget_accounting([ok, bad, {"accounting": {}}]) == [bad]


def _fake(track, attack, defense, seed, value):
    return {"header": {"track": track, "dataset": "d", "attack": attack, "defense": defense, "regime": "both",
                       "budget": 0.25, "seed": seed},
            "performance": {"fidelity": value, "survival": value, "verification": value},
            "accounting": {}, "cost": {"gpu_memory_mb": None}, "error": None}


def test_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [_fake("joint", f"A{i % 7}", "D", i, float(rng.random())) for i in range(100)]
    recs[3]["performance"]["vec"] = np.arange(3)
    write_jsonl(recs, tmp_path / "r.jsonl")
    back = read_jsonl(tmp_path / "r.jsonl")
    recs[3]["performance"]["vec"] = [0, 1, 2]
    assert back == recs


def test_survival_matrix_shape():
    attacks = [f"A{i:02d}" for i in range(12)]
    defenses = [f"W{j}" for j in range(5)]
    recs = [_fake("joint", a, d, s, 0.1 * s) for a in attacks for d in defenses for s in range(3)]
    cols, rows = survival_matrix(recs)
    assert cols == ["attack"] + defenses + ["median"]
    assert len(rows) == 13 and all(len(r) == 7 for r in rows)
    assert sum(v is not None for r in rows[:12] for v in r[1:6]) == 60
    assert rows[0][1] == pytest.approx(0.1)


def test_budget_curve_and_leaderboard_columns():
    recs = [_fake("extraction", "MEA0", None, s, 0.5 + 0.1 * s) for s in range(3)]
    cols, rows = budget_curves(recs)
    assert cols == ["dataset", "attack", "budget", "mean", "std"]
    assert rows == [["d", "MEA0", 0.25, pytest.approx(0.6), pytest.approx(np.std([0.5, 0.6, 0.7]))]]
    cols, rows = leaderboard(recs)
    assert cols[-6:] == ["metric", "n", "mean", "std", "median", "iqr"] and len(rows) == 1
    with pytest.raises(ValueError):
        report(recs, "pie")


def test_cli_end_to_end(tmp_path, capsys):
    bundle = tmp_path / "g"
    assert main(["gen-sbm", "--out", str(bundle), "--nodes", "150", "--p-in", "0.12", "--p-out", "0.01",
                 "--feat-dim", "16", "--seed", "1"]) == 0
    assert os.path.exists(bundle / "splits.json")
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"datasets": [{"bundle": str(bundle)}], "attacks": [{"kind": "MEA0", "epochs": 20}],
                                  "budgets": [0.25, 0.5], "seeds": [0], "epochs": 30}))
    out = tmp_path / "runs"
    assert main(["run", "--config", str(config), "--out", str(out), "--seeds", "0,1"]) == 0
    recs = read_jsonl(out / "extraction.jsonl")
    assert len(recs) == 4 and {r["header"]["seed"] for r in recs} == {0, 1}
    assert json.loads((out / "config.json").read_text())["seeds"] == [0, 1]
    csv_path = tmp_path / "curves.csv"
    assert main(["report", "--in", str(out), "--kind", "curves", "--out", str(csv_path)]) == 0
    assert csv_path.read_text().splitlines()[0] == "dataset,attack,budget,mean,std"
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1
    capsys.readouterr()
