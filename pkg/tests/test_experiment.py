"""Experiment driver: report layout, determinism, aggregation, failures."""

import numpy as np
import pytest

from taskqp.config import ExperimentConfig
from taskqp.experiment import (CSV_COLUMNS, _FixedOutputModel, _resolve_jobs,
                               aggregate_rows, run_experiment, summarize,
                               write_results, write_timing)
from taskqp.trainer import TrainConfig


def tiny_config(task="inventory", methods=("true_model", "mle_linear"),
                **overrides):
    base = dict(
        task=task,
        methods=list(methods),
        seeds=[0, 1],
        train_sizes=[24],
        test_size=8,
        train=TrainConfig(learning_rate=0.02, epochs=2),
        pretrain=TrainConfig(learning_rate=0.02, epochs=3),
        task_params={"k": 4, "n_features": 3} if task == "inventory" else {},
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def test_reports_cover_every_cell_in_deterministic_order():
    cfg = tiny_config(methods=("mle_linear", "true_model"),
                      train_sizes=[24, 32])
    reports, failures = run_experiment(cfg)
    assert not failures
    keys = [(r.train_size, r.fold, r.method) for r in reports]
    expected = [(size, fold, m)
                for size in (24, 32) for fold in (0, 1)
                for m in ("mle_linear", "true_model")]
    assert keys == expected
    assert all(r.wall_time_s > 0 for r in reports)


def test_rerun_is_bitwise_identical(tmp_path):
    cfg = tiny_config(methods=("true_model", "mle_linear", "task_linear"))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        reports, _ = run_experiment(cfg)
        write_results(reports, cfg.task, path)
    assert a.read_bytes() == b.read_bytes()


def test_parallel_run_matches_serial():
    cfg = tiny_config(methods=("true_model", "mle_linear"))
    serial, _ = run_experiment(cfg, jobs=1)
    parallel, _ = run_experiment(cfg, jobs=2)
    assert [(r.method, r.fold, r.mean_task_loss, r.rmse) for r in serial] == \
        [(r.method, r.fold, r.mean_task_loss, r.rmse) for r in parallel]


def test_jobs_env_var_used_as_default(monkeypatch):
    monkeypatch.setenv("TASKQP_JOBS", "3")
    assert _resolve_jobs(None) == 3
    assert _resolve_jobs(2) == 2
    monkeypatch.delenv("TASKQP_JOBS")
    assert _resolve_jobs(None) == 1


def test_results_csv_schema(tmp_path):
    cfg = tiny_config()
    reports, _ = run_experiment(cfg)
    out = tmp_path / "r.csv"
    write_results(reports, cfg.task, out)
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + len(reports)
    first = lines[1].split(",")
    assert first[0] == "inventory"
    assert float(first[4]) == reports[0].mean_task_loss


def test_timing_sidecar_schema(tmp_path):
    cfg = tiny_config()
    reports, _ = run_experiment(cfg)
    out = tmp_path / "r.timing.csv"
    write_timing(reports, cfg.task, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "task,method,fold,train_size,wall_time_s"
    assert len(lines) == 1 + len(reports)


def test_fixed_output_model_guards_alignment():
    model = _FixedOutputModel(np.ones((4, 2)))
    assert model.forward(np.zeros((4, 9))).shape == (4, 2)
    with pytest.raises(ValueError):
        model.forward(np.zeros((5, 9)))


def test_aggregate_rows_means_and_spreads():
    rows = [
        {"task": "t", "method": "a", "train_size": 10,
         "mean_task_loss": 1.0, "rmse": 0.5},
        {"task": "t", "method": "a", "train_size": 10,
         "mean_task_loss": 3.0, "rmse": 1.5},
        {"task": "t", "method": "b", "train_size": 10,
         "mean_task_loss": 7.0, "rmse": 2.0},
    ]
    agg = aggregate_rows(rows)
    assert [(r["method"], r["folds"]) for r in agg] == [("a", 2), ("b", 1)]
    assert agg[0]["mean_task_loss"] == pytest.approx(2.0)
    assert agg[0]["std_task_loss"] == pytest.approx(1.0)
    assert agg[0]["mean_rmse"] == pytest.approx(1.0)


def test_summary_lists_methods():
    cfg = tiny_config()
    reports, _ = run_experiment(cfg)
    text = summarize(reports, cfg.task)
    assert "mle_linear" in text and "true_model" in text


def test_systematic_training_failure_is_reported_not_raised():
    # a learning rate this size detonates the price model within one epoch,
    # so the decision subproblems become unsolvable and training aborts
    cfg = tiny_config(
        task="storage",
        methods=("mle_linear", "task_linear"),
        seeds=[0],
        train=TrainConfig(learning_rate=1e6, epochs=3, batch_size=8),
        task_params={"lambda_flex": 1.0, "eps_health": 0.5},
    )
    reports, failures = run_experiment(cfg)
    assert [r.method for r in reports] == ["mle_linear"]
    assert [f.method for f in failures] == ["task_linear"]
    assert "failed" in failures[0].error
