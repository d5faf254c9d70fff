import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

from probpmp.cli import EXIT_OK, EXIT_USAGE, cli_main, read_control, replay_cost
from probpmp.experiments import (TABLE_SETTINGS, ExperimentConfig, ResultRecord, aggregate, config_from_dict,
                                 format_table, load_config, load_records, preset, run_offline_experiment, save_record)
from probpmp.systems import as_ensemble


@pytest.fixture(autouse=True)
def _out(tmp_path, monkeypatch):
    monkeypatch.setenv("PROBPMP_OUTPUT", str(tmp_path / "runs"))


@pytest.mark.parametrize("planner", ["pmp_mean_h", "icem"])
def test_plan_round_trip(tmp_path, planner):
    out = tmp_path / planner
    code = cli_main(["plan", "--system", "vdp", "--planner", planner, "--horizon", "1.0", "--iterations", "5",
                     "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    task = TABLE_SETTINGS["vdp"]
    ctrl = read_control(out / "control.csv")
    model = as_ensemble(task.make_system())
    c = replay_cost(model, task, np.array(task.x0), ctrl, 1.0)
    assert abs(c - report["cost"]) <= 1e-6 * max(1.0, abs(report["cost"]))
    assert (out / "trajectory.csv").exists()


def test_usage_errors(tmp_path, capsys):
    assert cli_main(["experiment", "--config", str(tmp_path / "missing.yaml")]) == EXIT_USAGE
    assert cli_main(["plan", "--planner", "sqp"]) == EXIT_USAGE
    assert cli_main([]) == EXIT_USAGE
    assert cli_main(["plan", "--model", str(tmp_path / "nope")]) == EXIT_USAGE
    assert cli_main(["compare", str(tmp_path / "nothing")]) == EXIT_USAGE
    assert cli_main(["train", "--data", str(tmp_path)]) == EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\ntask: vdp\nflavour: mint\n")
    assert cli_main(["experiment", "--config", str(bad)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "missing.yaml" in err and "flavour" in err


def test_record_json_round_trip(tmp_path):
    r = ResultRecord("icem", "prob_node", 3, 9.87654321, 12.5, trial=2, experiment="e", flagged_steps=1)
    assert ResultRecord.from_json(r.to_json()) == r
    p = save_record(r, tmp_path)
    assert p.name == "prob_node_icem_s3_t02.json"
    assert load_records(tmp_path) == [r]
    with pytest.raises(ValueError):
        ResultRecord("icem", "oracle", 0, 1.0, 1.0)


def test_aggregate_and_compare_reproduce_mean_std(tmp_path, capsys):
    rng = np.random.default_rng(0)
    costs = {("pmp_mean_h", "prob_node"): rng.uniform(9, 11, 7), ("icem", "true"): rng.uniform(8, 12, 4)}
    for (p, k), cs in costs.items():
        for s, c in enumerate(cs):
            save_record(ResultRecord(p, k, s, float(c), 1.0), tmp_path / "records")
    rows = {(r["planner"], r["model_kind"]): r for r in aggregate(load_records(tmp_path / "records"))}
    for key, cs in costs.items():
        assert rows[key]["n"] == cs.size
        assert rows[key]["mean"] == float(np.mean(cs))
        assert rows[key]["std"] == float(np.std(cs))
    out = tmp_path / "cmp.csv"
    assert cli_main(["compare", str(tmp_path), "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "planner,model_kind,n,mean,std"
    for line in lines[1:]:
        p, k, n, m, s = line.split(",")
        assert float(m) == float(np.mean(costs[(p, k)]))
        assert float(s) == float(np.std(costs[(p, k)]))
    assert "+-" in capsys.readouterr().out


def test_format_table_layout():
    rows = [{"planner": "pmp_mean_h", "model_kind": "true", "n": 1, "mean": 9.99, "std": 0.0},
            {"planner": "pmp_mean_h", "model_kind": "prob_node", "n": 3, "mean": 10.5, "std": 0.25}]
    txt = format_table(rows).splitlines()
    assert txt[0].split() == ["method", "true", "prob_node"]
    assert txt[1].split() == ["pmp_mean_h", "9.99", "10.50", "+-", "0.25"]


def test_config_loading(tmp_path):
    d = {"name": "demo", "task": "vdp", "planners": ["pmp_mean_h", "icem"], "repetitions": 2,
         "dataset": {"n_trials": 3}, "model": {"M": 3, "train": {"epochs": 7}}, "icem": {"population": 16}}
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(d))
    cfg = load_config(p)
    assert cfg.task == TABLE_SETTINGS["vdp"]
    assert cfg.planners == ("pmp_mean_h", "icem")
    assert cfg.dataset.n_trials == 3 and cfg.model.M == 3 and cfg.model.train.epochs == 7
    assert cfg.icem.population == 16
    # the dict form survives a round trip through JSON
    again = config_from_dict({**cfg.to_dict(), "task": cfg.to_dict()["task"]})
    assert again == cfg
    for bad in ({"name": "x"}, {"name": "x", "task": "vdp", "planners": ["sqp"]},
                {"name": "x", "task": "vdp", "dataset": {"n_trails": 3}},
                {"name": "x", "task": "vdp", "mode": "batch"}):
        with pytest.raises((ValueError, TypeError)):
            config_from_dict(bad)


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.yaml"))
    assert files
    for f in files:
        assert isinstance(load_config(f), ExperimentConfig)


def tiny_offline(tmp_path, **kw):
    task = replace(TABLE_SETTINGS["vdp"], tf=0.2, horizon=0.5, iterations=3)
    cfg = preset("vdp", task=task, planners=("pmp_mean_h", "pmp_mean_u"), repetitions=1, output_dir=str(tmp_path),
                 dataset=replace(preset("vdp").dataset, n_trials=2, trial_length=2.0))
    cfg = replace(cfg, model=replace(cfg.model, M=2, hidden=(8,), train=replace(cfg.model.train, epochs=3)))
    return replace(cfg, **kw)


def test_offline_experiment_smoke(tmp_path):
    cfg = tiny_offline(tmp_path)
    recs = run_offline_experiment(cfg)
    kinds = sorted((r.model_kind, r.planner) for r in recs)
    # deterministic models skip mean-u, the known model runs it once as mean-H only
    assert kinds == [("deterministic_node", "pmp_mean_h"), ("prob_node", "pmp_mean_h"), ("prob_node", "pmp_mean_u"),
                     ("true", "pmp_mean_h")]
    assert (tmp_path / "table.csv").exists() and len(load_records(tmp_path / "records")) == 4
    assert all(np.isfinite(r.cost) for r in recs)


def test_worker_pool_matches_serial(tmp_path):
    cells = [("deterministic_node", "pmp_mean_h"), ("prob_node", "pmp_mean_u")]
    a = run_offline_experiment(tiny_offline(tmp_path / "a", repetitions=2), write=False, cells=cells)
    b = run_offline_experiment(tiny_offline(tmp_path / "b", repetitions=2, workers=2), write=False, cells=cells)
    assert [(r.model_kind, r.planner, r.seed, r.cost) for r in a] == [(r.model_kind, r.planner, r.seed, r.cost)
                                                                        for r in b]
    assert sorted({(r.model_kind, r.planner) for r in a}) == sorted(cells)
    with pytest.raises(ValueError):
        tiny_offline(tmp_path, workers=0)


def test_deadline_stops_new_repetitions(tmp_path):
    import time
    from probpmp.experiments import run_online_rl
    cells = [("prob_node", "pmp_mean_h")]
    recs = run_offline_experiment(tiny_offline(tmp_path, repetitions=3), write=False, cells=cells,
                                  deadline=time.monotonic() - 1)
    assert recs == []
    cfg = replace(tiny_offline(tmp_path, repetitions=2, mode="online", online_trials=1), planners=("pmp_mean_h",))
    assert run_online_rl(cfg, write=False, deadline=time.monotonic() - 1).shape == (0, 2)
