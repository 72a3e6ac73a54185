"""Benchmark driver: builds datasets, runs every configured method on every
(train size, fold) cell, and writes deterministic result tables.

The main CSV holds only reproducible numbers (costs, errors, violation
counts); wall-clock times go to a ``<out>.timing.csv`` sidecar so reruns of
the same config are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from time import perf_counter

import numpy as np

from taskqp import generation, inventory, storage
from taskqp.config import ExperimentConfig, METHODS
from taskqp.models import (LinearModel, MlpModel, fit_mle, residual_variance)
from taskqp.trainer import (TaskLossReport, TrainConfig, TrainingError,
                            evaluate_model, fit_cost_weighted_rmse,
                            fit_policy_net, task_loss_train)

__all__ = [
    "CSV_COLUMNS",
    "MethodFailure",
    "run_experiment",
    "write_results",
    "write_timing",
    "summarize",
    "aggregate_rows",
    "JOBS_ENV_VAR",
]

CSV_COLUMNS = ("task", "method", "fold", "train_size", "mean_task_loss",
               "std_task_loss", "rmse", "violations")
JOBS_ENV_VAR = "TASKQP_JOBS"


@dataclass
class MethodFailure:
    method: str
    fold: int
    train_size: int
    error: str


class _FixedOutputModel:
    """Stands in for a trained model when the outputs are known up front
    (the oracle rows of the benchmark tables)."""

    def __init__(self, outputs: np.ndarray):
        self._outputs = np.asarray(outputs, dtype=np.float64)

    def forward(self, x, mode="eval", rng=None):
        if len(x) != len(self._outputs):
            raise ValueError("fixed outputs are aligned to a specific set")
        return self._outputs


def _make_model(kind: str, d_in: int, d_out: int, config: ExperimentConfig,
                seed: int, softmax: bool = False):
    if kind == "linear":
        return LinearModel(d_in, d_out, seed=seed, softmax_head=softmax)
    spec = config.model
    return MlpModel(d_in, d_out, hidden=spec.hidden, seed=seed,
                    softmax_head=softmax, residual=spec.residual,
                    dropout_p=spec.dropout)


def _with_seed(spec: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(spec, seed=seed)


def _pre_spec(config: ExperimentConfig) -> TrainConfig:
    return config.pretrain if config.pretrain is not None else config.train


def _splits(config: ExperimentConfig, size: int):
    n_val = max(8, int(round(config.val_fraction * size)))
    return size, n_val, config.test_size


def _standardize(xt, xv, xs):
    """Center/scale every split by train-split statistics; keeps linear
    models well conditioned on raw physical features."""
    mean = xt.mean(axis=0)
    std = xt.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return (xt - mean) / std, (xv - mean) / std, (xs - mean) / std


# ---------------------------------------------------------------------------
# per-task contexts


def _inventory_context(config: ExperimentConfig, size: int, seed: int):
    tp = config.task_params
    k = int(tp.get("k", 10))
    n_features = int(tp.get("n_features", 8))
    truth = tp.get("truth", "linear")
    world_seed = int(tp.get("world_seed", 0))
    d = np.asarray(tp.get("demand_levels", np.linspace(1.0, 10.0, k)),
                   dtype=np.float64)
    param_keys = ("c_order", "q_order", "c_back", "q_back", "c_hold", "q_hold")
    params = inventory.InventoryParams(
        **{kk: tp[kk] for kk in param_keys if kk in tp})
    _, theta = inventory.generate_inventory_data(1, n_features, k, truth,
                                                 seed=world_seed)
    n_train, n_val, n_test = _splits(config, size)
    data, _ = inventory.generate_inventory_data(
        n_train + n_val + n_test, n_features, k, truth, seed=seed, theta=theta)
    x, y = data.x, data.y
    xs_raw = x[n_train + n_val:]
    true_probs = inventory.true_demand_probs(xs_raw, theta, truth)
    xt, xv, xs = _standardize(x[:n_train],
                              x[n_train:n_train + n_val], xs_raw)
    return {
        "task": inventory.InventoryTask(params, d),
        "xt": xt, "yt": y[:n_train],
        "xv": xv, "yv": y[n_train:n_train + n_val],
        "xs": xs, "ys": y[n_train + n_val:],
        "d_in": n_features, "k": k, "d": d,
        "true_probs": true_probs,
    }


def _generation_context(config: ExperimentConfig, size: int, seed: int):
    tp = config.task_params
    params = generation.GenSchedParams(
        **{kk: tp[kk] for kk in ("gamma_e", "gamma_s", "ramp_limit")
           if kk in tp})
    n_train, n_val, n_test = _splits(config, size)
    data, info = generation.generate_load_data(n_train + n_val + n_test,
                                               seed=seed)
    x, y = data.x, data.y
    sl_t = slice(0, n_train)
    sl_v = slice(n_train, n_train + n_val)
    sl_s = slice(n_train + n_val, n_train + n_val + n_test)
    xt, xv, xs = _standardize(x[sl_t], x[sl_v], x[sl_s])
    return {
        "params": params,
        "xt": xt, "yt": y[sl_t], "xv": xv, "yv": y[sl_v],
        "xs": xs, "ys": y[sl_s],
        "mu_true": info["mu_true"][sl_s],
        "sigma2_true": info["sigma2_true"][sl_s],
        "d_in": x.shape[1], "horizon": y.shape[1],
    }


def _storage_context(config: ExperimentConfig, size: int, seed: int):
    tp = config.task_params
    param_keys = ("lambda_flex", "eps_health", "horizon", "capacity",
                  "efficiency", "max_charge", "max_discharge")
    params = storage.BatteryParams(
        **{kk: tp[kk] for kk in param_keys if kk in tp})
    n_train, n_val, n_test = _splits(config, size)
    data, info = storage.generate_price_data(n_train + n_val + n_test,
                                             seed=seed, horizon=params.horizon)
    x, y = data.x, data.y
    sl_t = slice(0, n_train)
    sl_v = slice(n_train, n_train + n_val)
    sl_s = slice(n_train + n_val, n_train + n_val + n_test)
    xt, xv, xs = _standardize(x[sl_t], x[sl_v], x[sl_s])
    return {
        "task": storage.StorageTask(params),
        "xt": xt, "yt": y[sl_t], "xv": xv, "yv": y[sl_v],
        "xs": xs, "ys": y[sl_s],
        "log_mu_true": info["log_mu_true"][sl_s],
        "d_in": x.shape[1], "horizon": params.horizon,
    }


_CONTEXTS = {
    "inventory": _inventory_context,
    "generation": _generation_context,
    "storage": _storage_context,
}


# ---------------------------------------------------------------------------
# method runners


def _kind(method: str) -> str:
    return "linear" if method.endswith("_linear") else "mlp"


def _run_inventory(config, ctx, method, seed):
    task = ctx["task"]
    xt, yt, xv, yv = ctx["xt"], ctx["yt"], ctx["xv"], ctx["yv"]
    xs, ys = ctx["xs"], ctx["ys"]
    d_in, k, d = ctx["d_in"], ctx["k"], ctx["d"]

    if method == "true_model":
        return evaluate_model(task, _FixedOutputModel(ctx["true_probs"]),
                              xs, ys)

    if method.startswith("mle"):
        model = _make_model(_kind(method), d_in, k, config, seed, softmax=True)
        fit_mle(model, xt, yt, _with_seed(_pre_spec(config), seed), xv, yv,
                loss="cross_entropy")
        return evaluate_model(task, model, xs, ys)

    vals_t = d[yt.astype(int)].reshape(-1, 1)
    vals_v = d[yv.astype(int)].reshape(-1, 1)
    if method == "rmse":
        model = _make_model("mlp", d_in, 1, config, seed)
        fit_mle(model, xt, vals_t, _with_seed(_pre_spec(config), seed),
                xv, vals_v, loss="mse")
        return evaluate_model(task, model, xs, ys, policy=True)

    if method.startswith("policy"):
        model = _make_model(_kind(method), d_in, 1, config, seed)
        fit_mle(model, xt, vals_t, _with_seed(_pre_spec(config), seed),
                xv, vals_v, loss="mse")
        fit_policy_net(model, xt, yt, task, _with_seed(config.train, seed),
                       xv, yv)
        return evaluate_model(task, model, xs, ys, policy=True)

    # task_linear / task_nonlinear: likelihood warm start, task fine-tune
    model = _make_model(_kind(method), d_in, k, config, seed, softmax=True)
    fit_mle(model, xt, yt, _with_seed(_pre_spec(config), seed), xv, yv,
            loss="cross_entropy")
    task_loss_train(model, xt, yt, task, _with_seed(config.train, seed),
                    xv, yv)
    return evaluate_model(task, model, xs, ys)


def _true_generation_report(ctx) -> TaskLossReport:
    params = ctx["params"]
    xs, ys = ctx["xs"], ctx["ys"]
    mu_true, sigma2_true = ctx["mu_true"], ctx["sigma2_true"]
    task = generation.GenerationTask(params, np.ones(ctx["horizon"]))
    costs, violations = [], 0
    for i in range(len(xs)):
        forecast = generation.GaussianForecast(mu_true[i], sigma2_true[i])
        res = generation.sqp_solve(forecast, params)
        costs.append(generation.realized_generation_cost(res.z, ys[i], params))
        violations += task.violations(res.z)
    rmse = float(np.sqrt(np.mean((mu_true - ys) ** 2)))
    return TaskLossReport(method="", fold=0, train_size=0,
                          mean_task_loss=float(np.mean(costs)),
                          std_task_loss=float(np.std(costs)),
                          rmse=rmse, violations=violations)


def _run_generation(config, ctx, method, seed):
    params = ctx["params"]
    xt, yt, xv, yv = ctx["xt"], ctx["yt"], ctx["xv"], ctx["yv"]
    xs, ys = ctx["xs"], ctx["ys"]
    d_in, T = ctx["d_in"], ctx["horizon"]

    if method == "true_model":
        return _true_generation_report(ctx)

    def fit_regression(kind):
        model = _make_model(kind, d_in, T, config, seed)
        fit_mle(model, xt, yt, _with_seed(_pre_spec(config), seed), xv, yv,
                loss="mse")
        return model

    def task_for(model):
        sigma2 = residual_variance(model.forward(xt, mode="eval"), yt)
        return generation.GenerationTask(params, sigma2)

    if method.startswith("mle"):
        model = fit_regression(_kind(method))
        return evaluate_model(task_for(model), model, xs, ys)

    if method == "rmse":
        model = fit_regression("mlp")
        task = generation.GenerationTask(params, np.ones(T))
        return evaluate_model(task, model, xs, ys, policy=True)

    if method == "cost_weighted":
        model = fit_regression("mlp")
        task = task_for(model)
        fit_cost_weighted_rmse(model, xt, yt, task,
                               _with_seed(config.train, seed), xv, yv)
        return evaluate_model(task, model, xs, ys)

    if method.startswith("policy"):
        model = fit_regression(_kind(method))
        task = generation.GenerationTask(params, np.ones(T))
        fit_policy_net(model, xt, yt, task, _with_seed(config.train, seed),
                       xv, yv)
        return evaluate_model(task, model, xs, ys, policy=True)

    # task_linear / task_nonlinear: frozen residual variances, then task fit
    model = fit_regression(_kind(method))
    task = task_for(model)
    task_loss_train(model, xt, yt, task, _with_seed(config.train, seed),
                    xv, yv)
    return evaluate_model(task, model, xs, ys)


def _run_storage(config, ctx, method, seed):
    task = ctx["task"]
    xt, yt, xv, yv = ctx["xt"], ctx["yt"], ctx["xv"], ctx["yv"]
    xs, ys = ctx["xs"], ctx["ys"]
    d_in, T = ctx["d_in"], ctx["horizon"]
    log_t, log_v = task.nll_target(yt), task.nll_target(yv)

    if method == "true_model":
        return evaluate_model(task, _FixedOutputModel(ctx["log_mu_true"]),
                              xs, ys)

    if method.startswith("mle"):
        model = _make_model(_kind(method), d_in, T, config, seed)
        fit_mle(model, xt, log_t, _with_seed(_pre_spec(config), seed),
                xv, log_v, loss="mse")
        return evaluate_model(task, model, xs, ys)

    # task_linear / task_nonlinear
    model = _make_model(_kind(method), d_in, T, config, seed)
    fit_mle(model, xt, log_t, _with_seed(_pre_spec(config), seed),
            xv, log_v, loss="mse")
    task_loss_train(model, xt, yt, task, _with_seed(config.train, seed),
                    xv, yv)
    return evaluate_model(task, model, xs, ys)


_RUNNERS = {
    "inventory": _run_inventory,
    "generation": _run_generation,
    "storage": _run_storage,
}


# ---------------------------------------------------------------------------
# the experiment loop


def _run_fold(config: ExperimentConfig, size: int, fold: int):
    seed = config.seeds[fold]
    ctx = _CONTEXTS[config.task](config, size, seed)
    runner = _RUNNERS[config.task]
    reports, failures = [], []
    for method in config.methods:
        method_seed = seed * 100 + METHODS.index(method)
        t0 = perf_counter()
        try:
            report = runner(config, ctx, method, method_seed)
        except (TrainingError, RuntimeError, ValueError) as exc:
            failures.append(MethodFailure(method=method, fold=fold,
                                          train_size=size, error=str(exc)))
            continue
        report.method = method
        report.fold = fold
        report.train_size = size
        report.wall_time_s = perf_counter() - t0
        reports.append(report)
    return reports, failures


def _resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        jobs = int(os.environ.get(JOBS_ENV_VAR, "1"))
    return max(1, jobs)


def run_experiment(config: ExperimentConfig, jobs: int | None = None):
    """Run all (train size, fold, method) cells; returns (reports, failures)
    with reports in a deterministic order independent of scheduling."""
    jobs = _resolve_jobs(jobs)
    cells = [(size, fold) for size in config.train_sizes
             for fold in range(len(config.seeds))]
    reports, failures = [], []
    if jobs == 1 or len(cells) == 1:
        outcomes = [_run_fold(config, size, fold) for size, fold in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, config, size, fold)
                       for size, fold in cells]
            outcomes = [f.result() for f in futures]
    for (size, fold), (reps, fails) in zip(cells, outcomes):
        reports.extend(reps)
        failures.extend(fails)
    order = {m: i for i, m in enumerate(config.methods)}
    reports.sort(key=lambda r: (r.train_size, r.fold, order[r.method]))
    failures.sort(key=lambda f: (f.train_size, f.fold, order[f.method]))
    return reports, failures


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results(reports, task: str, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([task, r.method, r.fold, r.train_size,
                             _fmt(r.mean_task_loss), _fmt(r.std_task_loss),
                             _fmt(r.rmse), r.violations])


def write_timing(reports, task: str, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("task", "method", "fold", "train_size",
                         "wall_time_s"))
        for r in reports:
            writer.writerow([task, r.method, r.fold, r.train_size,
                             _fmt(r.wall_time_s)])


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Collapse per-fold result rows into per-(method, train_size) means and
    spreads, for plotting."""
    groups: dict = {}
    for row in rows:
        key = (row["task"], row["method"], int(row["train_size"]))
        groups.setdefault(key, []).append(row)
    out = []
    for (task, method, size), members in sorted(groups.items()):
        losses = np.array([float(m["mean_task_loss"]) for m in members])
        rmses = np.array([float(m["rmse"]) for m in members])
        out.append({
            "task": task, "method": method, "train_size": size,
            "folds": len(members),
            "mean_task_loss": float(losses.mean()),
            "std_task_loss": float(losses.std()),
            "mean_rmse": float(rmses.mean()),
        })
    return out


def summarize(reports, task: str) -> str:
    rows = [{"task": task, "method": r.method, "train_size": r.train_size,
             "mean_task_loss": r.mean_task_loss, "rmse": r.rmse}
            for r in reports]
    lines = [f"{'method':<18} {'n_train':>8} {'task loss':>14} {'rmse':>10}"]
    for agg in aggregate_rows(rows):
        lines.append(f"{agg['method']:<18} {agg['train_size']:>8} "
                     f"{agg['mean_task_loss']:>14.4f} {agg['mean_rmse']:>10.4f}")
    return "\n".join(lines)
