import json

import pandas as pd
import pytest

import main
from database import queries
from errors import ConfigurationError, PruningLabError
from logic.config import config_from_dict
from logic.experiment import (
    RESULT_COLUMNS,
    accuracy_drop_summary,
    build_report,
    open_base_run,
    report_safe_zone,
    retention_epochs,
    run_experiment,
    run_id_for,
    select_pareto,
    sweep_grid,
)
from utils import SNAPSHOT_DIR_ENV


def _document(output_dir, **overrides):
    document = {
        "arch": "mlp2",
        "hidden": 8,
        "dataset": {"kind": "synthetic", "seed": 1, "classes": 3, "n_train": 48, "n_test": 40, "shape": [6]},
        "schedule": {
            "T": 3,
            "segments": [{"start": 0, "end": 2, "rate": 0.05}, {"start": 2, "end": 3, "rate": 0.005}],
        },
        "optimizer": {"batch_size": 16},
        "techniques": ["fine_tune", "lr_rewind"],
        "sweep": {"t_values": [1, 2, 3], "compression_ratios": [2, 4]},
        "seeds": 3,
        "output_dir": str(output_dir),
    }
    document.update(overrides)
    return document


@pytest.fixture(autouse=True)
def _no_snapshot_env(monkeypatch):
    monkeypatch.delenv(SNAPSHOT_DIR_ENV, raising=False)


# ── grid ─────────────────────────────────────────────────────────────


def test_sweep_grid_values():
    assert sweep_grid(90, 10) == [9, 18, 27, 36, 45, 54, 63, 72, 81, 90]
    assert sweep_grid(182, 10) == [18, 36, 55, 73, 91, 109, 127, 146, 164, 182]
    assert sweep_grid(182, 1) == [182]
    assert sweep_grid(5, 2) == [3, 5]
    assert sweep_grid(3, 10) == [1, 2, 3]
    assert sweep_grid(2.5, 2) == [1.25, 2.5]
    with pytest.raises(ConfigurationError):
        sweep_grid(0, 10)


def test_retention_epochs_cover_rewind_points():
    assert retention_epochs(10, [2, 10, 12]) == [0.0, 8.0, 10.0]


# ── selection ────────────────────────────────────────────────────────


def _raw(rows):
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def _row(technique, t, ratio, seed, val, test, arch="mlp2"):
    return [arch, technique, t, ratio, seed, val, test, 100, t, t + 10]


def test_select_pareto_picks_best_median_val_and_breaks_ties_low():
    raw = _raw(
        [
            _row("lr_rewind", 2, 4.0, 0, 0.80, 0.70),
            _row("lr_rewind", 2, 4.0, 1, 0.90, 0.72),
            _row("lr_rewind", 5, 4.0, 0, 0.85, 0.60),
            _row("lr_rewind", 5, 4.0, 1, 0.85, 0.90),
            _row("fine_tune", 1, 4.0, 0, 0.70, 0.50),
            _row("fine_tune", 3, 4.0, 0, 0.70, 0.55),
        ]
    )
    pareto = select_pareto(raw)
    by_technique = pareto.set_index("technique")
    # both t have median val 0.85; the smaller t wins
    assert by_technique.loc["lr_rewind", "t_epochs"] == 2
    assert by_technique.loc["lr_rewind", "test_median"] == pytest.approx(0.71)
    assert by_technique.loc["lr_rewind", "test_min"] == 0.70
    assert by_technique.loc["fine_tune", "t_epochs"] == 1
    assert select_pareto(_raw([])).empty


def _safe_zone_rows(ft, wr, lr, t_values=(1, 2, 3, 4)):
    rows = []
    for i, t in enumerate(t_values):
        for technique, accs in (("fine_tune", ft), ("weight_rewind", wr), ("lr_rewind", lr)):
            rows.append(_row(technique, t, 4.0, 0, 0.5, accs[i]))
    return _raw(rows)


def test_safe_zone_longest_dominant_run():
    raw = _safe_zone_rows(ft=[0.8, 0.5, 0.5, 0.5], wr=[0.7, 0.6, 0.6, 0.6], lr=[0.9, 0.6, 0.5, 0.7])
    assert report_safe_zone(raw, 4) == {"mlp2": (0.5, 1.0)}


def test_safe_zone_none_when_fine_tune_dominates():
    raw = _safe_zone_rows(ft=[0.9] * 4, wr=[0.5] * 4, lr=[0.5] * 4)
    assert report_safe_zone(raw, 4) == {"mlp2": None}


def test_safe_zone_rejects_mismatched_grids():
    raw = _safe_zone_rows(ft=[0.5] * 4, wr=[0.6] * 4, lr=[0.6] * 4)
    raw = raw[~((raw["technique"] == "lr_rewind") & (raw["t_epochs"] == 4))]
    with pytest.raises(ConfigurationError):
        report_safe_zone(raw, 4)
    with pytest.raises(ConfigurationError):
        report_safe_zone(raw[raw["technique"] != "weight_rewind"], 4)


def test_accuracy_drop_summary():
    pareto = pd.DataFrame(
        {
            "arch": ["mlp2"] * 3,
            "technique": ["lr_rewind"] * 3,
            "compression_ratio": [2.0, 4.0, 8.0],
            "test_median": [0.91, 0.895, 0.80],
            "speedup_original": [2.0, 3.5, 7.0],
            "speedup_over_fine_tune": [1.0, 1.1, 1.2],
        }
    )
    baseline = pd.DataFrame({"arch": ["mlp2", "mlp2"], "seed": [0, 1], "test_accuracy": [0.90, 0.90]})
    summary = accuracy_drop_summary(pareto, baseline)
    assert summary.loc[0, "max_compression_no_drop"] == 2.0
    assert summary.loc[0, "max_compression_1pct_drop"] == 4.0
    assert summary.loc[0, "speedup_original_1pct_drop"] == 3.5
    assert summary.loc[0, "speedup_over_fine_tune_1pct_drop"] == 1.1


# ── sweeps ───────────────────────────────────────────────────────────


def test_run_experiment_writes_deterministic_tables(tmp_path):
    config = config_from_dict(_document(tmp_path / "out"))
    result = run_experiment(config)
    assert result.ok
    assert len(result.rows) == 2 * 3 * 2 * 3
    assert len(result.baseline) == 3
    registry = str(tmp_path / "out" / "snapshots" / "registry.db")
    ok, run = queries.get_run(registry, run_id_for(config, 0))
    assert ok and run["status"] == "Trained"
    ok, logs = queries.get_all_logs(registry)
    assert {"TRAIN", "SNAPSHOT", "RETRAIN", "SWEEP"} <= {entry["category"] for entry in logs}

    raw_path = tmp_path / "out" / "results_raw.csv"
    raw = pd.read_csv(raw_path)
    assert list(raw.columns) == RESULT_COLUMNS
    assert raw[["val_accuracy", "test_accuracy"]].apply(lambda col: col.between(0, 1).all()).all()
    # d = 83: floor(83 / 2) and floor(83 * 3 / 4) weights pruned
    assert sorted(set(raw["compression_ratio"].round(6))) == [round(83 / 42, 6), round(83 / 21, 6)]
    assert set(raw["total_epochs"]) == {4.0, 5.0, 6.0}
    pareto = pd.read_csv(tmp_path / "out" / "results_pareto.csv")
    assert len(pareto) == 2 * 2
    baseline = pd.read_csv(tmp_path / "out" / "baseline.csv")
    dense = baseline["flops"].median()
    assert pareto["speedup_original"].tolist() == pytest.approx((dense / pareto["flops"]).tolist())
    assert (pareto["speedup_original"] > 1).all()
    tuned = pareto[pareto["technique"] == "fine_tune"].set_index("compression_ratio")["flops"]
    for row in pareto.itertuples():
        assert row.speedup_over_fine_tune == pytest.approx(tuned[row.compression_ratio] / row.flops)
    assert (pareto.loc[pareto["technique"] == "fine_tune", "speedup_over_fine_tune"] == 1.0).all()

    first = {name: (tmp_path / "out" / name).read_bytes() for name in ("results_raw.csv", "results_pareto.csv", "baseline.csv")}
    run_experiment(config)
    for name, data in first.items():
        assert (tmp_path / "out" / name).read_bytes() == data

    parallel = config_from_dict(_document(tmp_path / "parallel"))
    run_experiment(parallel, jobs=2)
    assert (tmp_path / "parallel" / "results_raw.csv").read_bytes() == first["results_raw.csv"]


def test_base_run_not_marked_trained_is_retrained(tmp_path):
    config = config_from_dict(_document(tmp_path / "out", seeds=1))
    snapshots = tmp_path / "snapshots"
    base = open_base_run(config, 0, snapshots)
    registry = str(base.store.db_path)
    queries.set_run_status(registry, base.run_id, "Failed")
    with pytest.raises(PruningLabError, match="not fully trained"):
        open_base_run(config, 0, snapshots, train_if_missing=False)

    open_base_run(config, 0, snapshots)
    ok, run = queries.get_run(registry, base.run_id)
    assert ok and run["status"] == "Trained"
    ok, logs = queries.get_all_logs(registry)
    assert sum(entry["category"] == "TRAIN" for entry in logs) == 2


def test_rewinding_past_T_is_a_recorded_failure(tmp_path):
    document = _document(tmp_path / "out", techniques=["fine_tune", "weight_rewind"], seeds=1)
    document["sweep"] = {"t_values": [4], "compression_ratios": [2]}
    result = run_experiment(config_from_dict(document))
    assert not result.ok
    assert len(result.failures) == 1
    assert "weight_rewind" in result.failures[0]["cell"]
    assert [row.technique for row in result.rows] == ["fine_tune"]


def test_iterative_sweep_rows_per_iteration(tmp_path):
    document = _document(tmp_path / "out", techniques=["lr_rewind"], seeds=1)
    document["pruning"] = {"mode": "iterative", "iterations": 3}
    document["sweep"] = {"t_values": [3]}
    result = run_experiment(config_from_dict(document), write=False)
    assert [row.retrain_epochs for row in result.rows] == [3.0, 6.0, 9.0]
    ratios = [row.compression_ratio for row in result.rows]
    assert ratios == sorted(ratios)


def test_build_report_needs_results(tmp_path):
    with pytest.raises(ConfigurationError):
        build_report(str(tmp_path), 3)


# ── command line ─────────────────────────────────────────────────────


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(SNAPSHOT_DIR_ENV, str(tmp_path / "snapshots"))
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(_document(tmp_path / "out", seeds=1)), encoding="utf-8")
    config = ["--config", str(path)]

    assert main.main(["train", *config]) == 0
    assert main.main(["sweep", *config]) == 0
    assert main.main(["report", *config, "--workbook"]) == 0
    assert (tmp_path / "out" / "summary.csv").exists()
    assert "speedup_over_fine_tune_1pct_drop" in pd.read_csv(tmp_path / "out" / "summary.csv").columns
    assert (tmp_path / "out" / "report.xlsx").exists()

    mask = tmp_path / "out" / "m.prwm"
    assert main.main(["prune", *config, "--compression", "4", "--mask", str(mask)]) == 0
    assert mask.exists()
    assert main.main(["flops", *config, "--mask", str(mask)]) == 0
    capsys.readouterr()
    assert main.main(["retrain", *config, "--technique", "lr_rewind", "--t", "2", "--mask", str(mask)]) == 0
    out = capsys.readouterr().out
    metrics = json.loads(out[out.index("{\n") :])
    assert metrics["retrain_epochs"] == 2.0
    assert main.main(["iterate", *config, "--technique", "lr_rewind", "--t", "1"]) == 0


def test_cli_reports_configuration_errors(tmp_path):
    assert main.main(["sweep", "--config", str(tmp_path / "missing.json")]) == 1
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(_document(tmp_path / "out", seeds=1)), encoding="utf-8")
    assert main.main(["retrain", "--config", str(path), "--t", "1"]) == 1


def test_cli_iterate_defaults_weight_rewind_to_most_of_training(tmp_path, monkeypatch):
    monkeypatch.setenv(SNAPSHOT_DIR_ENV, str(tmp_path / "snapshots"))
    document = _document(tmp_path / "out", seeds=1)
    document["pruning"] = {"iterations": 2}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(document), encoding="utf-8")

    assert main.main(["iterate", "--config", str(path), "--technique", "weight_rewind"]) == 0
    rows = pd.read_csv(tmp_path / "out" / "iterative_weight_rewind_t2.7_seed0.csv")
    assert rows["t_epochs"].tolist() == pytest.approx([2.7, 2.7])
    assert rows["retrain_epochs"].tolist() == pytest.approx([2.7, 5.4])

    assert main.main(["iterate", "--config", str(path), "--technique", "lr_rewind"]) == 0
    assert (tmp_path / "out" / "iterative_lr_rewind_t3_seed0.csv").exists()
