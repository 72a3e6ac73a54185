"""Training loops that push realized decision cost back into a model.

Every routine here works against a task adapter (see ``InventoryTask``,
``GenerationTask``, ``StorageTask``) that knows how to turn a model output
into a decision, price that decision against an outcome, and chain a loss
gradient at the decision back to the model output.  The model itself only
ever sees ``dL/d(output)``, so the same Adam loop in ``models.sgd_train``
drives likelihood fits, task-loss fits, policy nets, and reweighted
regressions identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from time import perf_counter

import numpy as np

from taskqp.argmin_diff import DegenerateSolutionError, backward, factorize_kkt
from taskqp.models import (cross_entropy, cross_entropy_grad, mle_batch_grad,
                           mse, mse_grad, sgd_train)
from taskqp.qp import SolverStatus, solve_qp

__all__ = [
    "TrainConfig",
    "TaskLossReport",
    "TrainingError",
    "MAX_FAILURE_RATIO",
    "task_loss_train",
    "fit_policy_net",
    "fit_cost_weighted_rmse",
    "evaluate_model",
]

# a training epoch where more than this share of decision subproblems fail
# indicates the model has left the region where the task is well posed
MAX_FAILURE_RATIO = 0.1


class TrainingError(RuntimeError):
    """Raised when task-loss training becomes unusable mid-run."""


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int = 32
    penalty_weight: float = 0.0
    nll_mix: float = 0.0
    seed: int = 0
    eval_every: int = 1
    patience: int = 10
    constraint_mode: str = "penalty"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")
        if not 0.0 <= self.nll_mix <= 1.0:
            raise ValueError("nll_mix must lie in [0, 1]")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be nonnegative")
        if self.constraint_mode not in ("penalty", "branch"):
            raise ValueError(f"unknown constraint_mode {self.constraint_mode!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 (or None)")


@dataclass
class TaskLossReport:
    method: str
    fold: int
    train_size: int
    mean_task_loss: float
    std_task_loss: float
    rmse: float
    violations: int
    wall_time_s: float = 0.0


def _nll_grad(loss_name: str, out, target):
    if loss_name == "cross_entropy":
        return cross_entropy_grad(out, target)
    return mse_grad(out, target)


def _nll_value(loss_name: str, out, target) -> float:
    if loss_name == "cross_entropy":
        return cross_entropy(out, target)
    return mse(out, target)


def _failure_hook(counters: dict):
    def hook(epoch: int) -> None:
        attempted, failed = counters["attempted"], counters["failed"]
        counters["attempted"] = counters["failed"] = 0
        if attempted and failed > MAX_FAILURE_RATIO * attempted:
            raise TrainingError(
                f"epoch {epoch}: {failed}/{attempted} decision subproblems "
                "failed; aborting task-loss training")
    return hook


def mean_task_loss(task, model, x, y) -> float:
    """Mean realized cost of the model's decisions; failed decisions are
    skipped, and an evaluation where every decision fails scores inf."""
    out = model.forward(x, mode="eval")
    costs = []
    for i in range(len(x)):
        proxy = task.decision(out[i])
        if proxy is None:
            continue
        costs.append(task.realized_cost(proxy["decision"], y[i]))
    return float(np.mean(costs)) if costs else float("inf")


def task_loss_train(model, x, y, task, config: TrainConfig, x_val, y_val,
                    history: list | None = None) -> float:
    """Minimize realized task cost (optionally blended with the likelihood
    loss via ``nll_mix``); early-stops on validation task loss.

    With ``nll_mix == 1`` the decision chain is skipped entirely and the
    update path is the one ``fit_mle`` takes, batch for batch.
    """
    nll_mix = config.nll_mix
    loss_name = task.nll_loss
    counters = {"attempted": 0, "failed": 0}

    def batch_grad(model, xb, yb, rng):
        if nll_mix == 1.0:
            return mle_batch_grad(model, xb, task.nll_target(yb), rng,
                                  loss_name)
        out = model.forward(xb, mode="train", rng=rng)
        dtask = np.zeros_like(out)
        used = 0
        for i in range(len(xb)):
            counters["attempted"] += 1
            proxy = task.decision(out[i])
            if proxy is None:
                counters["failed"] += 1
                continue
            try:
                dtask[i] = task.grad_model_out(
                    proxy, yb[i], penalty_weight=config.penalty_weight,
                    constraint_mode=config.constraint_mode)
            except DegenerateSolutionError:
                counters["failed"] += 1
                continue
            used += 1
        if used == 0 and nll_mix == 0.0:
            return None
        dL_dout = (1.0 - nll_mix) * dtask / max(used, 1)
        if nll_mix > 0.0:
            dL_dout = dL_dout + nll_mix * _nll_grad(loss_name, out,
                                                    task.nll_target(yb))
        grads, _ = model.backward(dL_dout)
        return grads

    if nll_mix == 1.0:
        def val_fn(model):
            return _nll_value(loss_name, model.forward(x_val, mode="eval"),
                              task.nll_target(y_val))
    else:
        def val_fn(model):
            return mean_task_loss(task, model, x_val, y_val)

    return sgd_train(model, x, y, config, batch_grad, val_fn=val_fn,
                     patience=config.patience, history=history,
                     epoch_hook=_failure_hook(counters))


def _project(task, u):
    qp = task.projection_qp(u)
    sol = solve_qp(qp)
    if sol.status != SolverStatus.OPTIMAL:
        return None, None
    return qp, sol


def fit_policy_net(model, x, y, task, config: TrainConfig, x_val, y_val,
                   history: list | None = None) -> float:
    """Train a model that outputs the decision itself; outputs are projected
    onto the feasible set and the realized cost is pushed back through the
    projection."""
    if not hasattr(task, "projection_qp"):
        raise ValueError(f"task {task.name!r} does not support policy nets")
    counters = {"attempted": 0, "failed": 0}

    def batch_grad(model, xb, yb, rng):
        out = model.forward(xb, mode="train", rng=rng)
        dL_dout = np.zeros_like(out)
        used = 0
        for i in range(len(xb)):
            counters["attempted"] += 1
            qp, sol = _project(task, out[i])
            if sol is None:
                counters["failed"] += 1
                continue
            try:
                grads = backward(factorize_kkt(qp, sol),
                                 task.realized_cost_grad(sol.z, yb[i]))
            except DegenerateSolutionError:
                counters["failed"] += 1
                continue
            # the projection's linear term is -u
            dL_dout[i] = -grads.dc
            used += 1
        if used == 0:
            return None
        grads, _ = model.backward(dL_dout / used)
        return grads

    def val_fn(model):
        out = model.forward(x_val, mode="eval")
        costs = []
        for i in range(len(x_val)):
            _, sol = _project(task, out[i])
            if sol is not None:
                costs.append(task.realized_cost(sol.z, y_val[i]))
        return float(np.mean(costs)) if costs else float("inf")

    return sgd_train(model, x, y, config, batch_grad, val_fn=val_fn,
                     patience=config.patience, history=history,
                     epoch_hook=_failure_hook(counters))


def fit_cost_weighted_rmse(model, x, y, task, config: TrainConfig, x_val,
                           y_val, reweight_every: int = 5,
                           history: list | None = None) -> float:
    """Least-squares fit whose per-sample weights track each sample's
    realized task cost.  Every ``reweight_every`` epochs the weights become
    clip(cost / mean cost, 0.1, 10), renormalized to mean one; samples
    whose decision fails keep a neutral weight."""
    N = len(x)
    target = np.stack([np.atleast_1d(task.rmse_target(yi)) for yi in y])
    target_val = np.stack([np.atleast_1d(task.rmse_target(yi)) for yi in y_val])
    weights = np.ones(N)

    def batch_grad(model, xb, idx, rng):
        out = model.forward(xb, mode="train", rng=rng)
        dl = mse_grad(out, target[idx]) * weights[idx][:, None]
        grads, _ = model.backward(dl)
        return grads

    def hook(epoch: int) -> None:
        if (epoch + 1) % reweight_every:
            return
        out = model.forward(x, mode="eval")
        costs = np.full(N, np.nan)
        for i in range(N):
            proxy = task.decision(out[i])
            if proxy is not None:
                costs[i] = task.realized_cost(proxy["decision"], y[i])
        ok = np.isfinite(costs)
        if not ok.any():
            return
        costs[~ok] = costs[ok].mean()
        w = np.clip(costs / costs.mean(), 0.1, 10.0)
        weights[:] = w / w.mean()

    def val_fn(model):
        return mse(model.forward(x_val, mode="eval"), target_val)

    idx_as_targets = np.arange(N)
    return sgd_train(model, x, idx_as_targets, config, batch_grad,
                     val_fn=val_fn, patience=config.patience, history=history,
                     epoch_hook=hook)


def evaluate_model(task, model, x, y, policy: bool = False, method: str = "",
                   fold: int = 0, train_size: int = 0) -> TaskLossReport:
    """Score a trained model on held-out data: mean/std realized cost of
    its decisions, RMSE of its point predictions (for a policy net, of the
    projected decision itself), and the count of constraint violations."""
    t0 = perf_counter()
    out = model.forward(x, mode="eval")
    costs, preds, targets = [], [], []
    violations = 0
    for i in range(len(x)):
        if policy:
            _, sol = _project(task, out[i])
            decision = None if sol is None else sol.z
            pred = decision
        else:
            proxy = task.decision(out[i])
            decision = None if proxy is None else proxy["decision"]
            pred = task.point_prediction(out[i])
        if decision is None:
            continue
        costs.append(task.realized_cost(decision, y[i]))
        violations += task.violations(decision)
        preds.append(np.atleast_1d(pred))
        targets.append(np.atleast_1d(task.rmse_target(y[i])))
    if costs:
        mean_cost = float(np.mean(costs))
        std_cost = float(np.std(costs))
        err = np.stack(preds) - np.stack(targets)
        rmse = float(np.sqrt(np.mean(err ** 2)))
    else:
        mean_cost = std_cost = rmse = float("inf")
    return TaskLossReport(method=method, fold=fold, train_size=train_size,
                          mean_task_loss=mean_cost, std_task_loss=std_cost,
                          rmse=rmse, violations=violations,
                          wall_time_s=perf_counter() - t0)
