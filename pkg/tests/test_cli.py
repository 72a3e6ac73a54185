"""Command-line interface: subcommands, output files, exit codes."""

import csv

import pytest
import yaml

from taskqp.cli import (EXIT_CONFIG, EXIT_GRADCHECK, EXIT_OK, EXIT_RUN_FAILED,
                        main)


@pytest.fixture
def inventory_config(tmp_path):
    cfg = {
        "task": "inventory",
        "methods": ["true_model", "mle_linear", "task_linear"],
        "seeds": [0, 1],
        "train_sizes": [24],
        "test_size": 8,
        "train": {"learning_rate": 0.02, "epochs": 2},
        "pretrain": {"learning_rate": 0.02, "epochs": 3},
        "task_params": {"k": 4, "n_features": 3},
    }
    path = tmp_path / "inv.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_run_writes_results_and_timing(tmp_path, inventory_config, capsys):
    out = tmp_path / "results.csv"
    assert main(["run", str(inventory_config), "--out", str(out)]) == EXIT_OK
    assert out.exists()
    assert (tmp_path / "results.timing.csv").exists()
    stdout = capsys.readouterr().out
    assert "task_linear" in stdout
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6  # 3 methods x 2 folds x 1 size
    assert rows[0]["task"] == "inventory"


def test_run_rerun_is_byte_identical(tmp_path, inventory_config):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", str(inventory_config), "--out", str(a)]) == EXIT_OK
    assert main(["run", str(inventory_config), "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_run_missing_config_exits_1(tmp_path, capsys):
    assert main(["run", str(tmp_path / "none.yaml")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_run_invalid_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"task": "inventory"}))
    assert main(["run", str(path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_run_systematic_failure_exits_2(tmp_path, capsys):
    cfg = {
        "task": "storage",
        "methods": ["mle_linear", "task_linear"],
        "seeds": [0],
        "train_sizes": [24],
        "test_size": 8,
        "train": {"learning_rate": 1.0e6, "epochs": 3, "batch_size": 8},
        "pretrain": {"learning_rate": 0.02, "epochs": 3},
        "task_params": {"lambda_flex": 1.0, "eps_health": 0.5},
    }
    path = tmp_path / "explode.yaml"
    path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "results.csv"
    assert main(["run", str(path), "--out", str(out)]) == EXIT_RUN_FAILED
    assert "failed: method=task_linear" in capsys.readouterr().err
    # the rows that did succeed are still written
    with open(out, newline="") as fh:
        assert [r["method"] for r in csv.DictReader(fh)] == ["mle_linear"]


def test_gradcheck_prints_a_line_per_check(capsys):
    assert main(["gradcheck", "--scope", "models", "--seeds", "3"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    checks = [ln for ln in lines if ln.startswith(("PASS", "FAIL"))]
    assert len(checks) == 3
    assert all(ln.startswith("PASS") for ln in checks)
    assert "3/3 gradient checks passed" in lines[-1]


def test_gradcheck_corrupted_gradients_exit_3(capsys):
    assert main(["gradcheck", "--scope", "models", "--seeds", "2",
                 "--corrupt", "1.0"]) == EXIT_GRADCHECK
    lines = capsys.readouterr().out.splitlines()
    assert all(ln.startswith("FAIL") for ln in lines[:-1])


def test_plotdata_aggregates_run_output(tmp_path, inventory_config, capsys):
    results = tmp_path / "results.csv"
    main(["run", str(inventory_config), "--out", str(results)])
    capsys.readouterr()
    plot = tmp_path / "plot.csv"
    assert main(["plotdata", str(results), "--out", str(plot)]) == EXIT_OK
    with open(plot, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["mle_linear", "task_linear",
                                           "true_model"]
    assert all(r["folds"] == "2" for r in rows)


def test_plotdata_rejects_missing_and_malformed(tmp_path, capsys):
    assert main(["plotdata", str(tmp_path / "none.csv")]) == EXIT_CONFIG
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["plotdata", str(bad)]) == EXIT_CONFIG
