"""Battery arbitrage against hourly electricity prices.

Decisions are hourly charge amounts ``z_in``, discharge amounts ``z_out``,
and the resulting state of charge ``z_state``, stacked as one vector of
length 3T.  Charging buys at the market price and discharging sells, so the
operating cost is ``sum(y * (z_in - z_out))`` plus a flexibility penalty
that anchors the state of charge at half capacity and small health terms
that discourage throughput.  The battery dynamics and the box limits are
hard constraints, so planning against predicted prices is a single QP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskqp.data import Dataset
from taskqp.qp import (QuadraticProgram, SolverOptions, SolverStatus,
                       solve_qp)

__all__ = [
    "BatteryParams",
    "build_storage_qp",
    "objective_offset",
    "realized_storage_cost",
    "realized_storage_cost_grad",
    "storage_plan",
    "storage_task_loss",
    "storage_task_loss_grad_mu",
    "storage_task_loss_grad_logmu",
    "generate_price_data",
    "StorageTask",
]


@dataclass(frozen=True)
class BatteryParams:
    lambda_flex: float
    eps_health: float
    horizon: int = 24
    capacity: float = 1.0
    efficiency: float = 0.9
    max_charge: float = 0.5
    max_discharge: float = 0.2

    def __post_init__(self) -> None:
        if self.lambda_flex <= 0 or self.eps_health <= 0:
            raise ValueError("penalty weights must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.capacity <= 0 or self.max_charge <= 0 or self.max_discharge <= 0:
            raise ValueError("capacity and rate limits must be positive")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in (0, 1]")


def build_storage_qp(mu: np.ndarray, params: BatteryParams) -> QuadraticProgram:
    """Arbitrage plan against hourly price means ``mu``; the constant
    ``objective_offset`` is dropped from the quadratic objective."""
    T = params.horizon
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (T,):
        raise ValueError(f"expected {T} hourly prices, got shape {mu.shape}")
    lam, eps, B = params.lambda_flex, params.eps_health, params.capacity

    Q = np.diag(np.concatenate([np.full(T, 2.0 * eps), np.full(T, 2.0 * eps),
                                np.full(T, 2.0 * lam)]))
    c = np.concatenate([mu, -mu, np.full(T, -lam * B)])

    eye = np.eye(T)
    zero = np.zeros((T, T))
    G = np.block([
        [eye, zero, zero], [-eye, zero, zero],
        [zero, eye, zero], [zero, -eye, zero],
        [zero, zero, eye], [zero, zero, -eye],
    ])
    h = np.concatenate([np.full(T, params.max_charge), np.zeros(T),
                        np.full(T, params.max_discharge), np.zeros(T),
                        np.full(T, B), np.zeros(T)])

    A = np.zeros((T, 3 * T))
    b = np.zeros(T)
    A[0, 2 * T] = 1.0
    b[0] = B / 2.0
    for i in range(1, T):
        A[i, i - 1] = params.efficiency
        A[i, T + i - 1] = -1.0
        A[i, 2 * T + i - 1] = 1.0
        A[i, 2 * T + i] = -1.0
    return QuadraticProgram(Q=Q, c=c, G=G, h=h, A=A, b=b)


def objective_offset(params: BatteryParams) -> float:
    """Constant left out of the QP objective so that
    qp.objective(z) + objective_offset == realized cost at y = mu."""
    return params.lambda_flex * params.horizon * (params.capacity / 2.0) ** 2


def _split(z: np.ndarray, T: int):
    return z[:T], z[T:2 * T], z[2 * T:]


def realized_storage_cost(z: np.ndarray, y: np.ndarray,
                          params: BatteryParams) -> float:
    T = params.horizon
    z_in, z_out, z_state = _split(np.asarray(z, dtype=np.float64), T)
    y = np.asarray(y, dtype=np.float64)
    lam, eps, B = params.lambda_flex, params.eps_health, params.capacity
    return float((y * (z_in - z_out)).sum()
                 + lam * ((z_state - B / 2.0) ** 2).sum()
                 + eps * (z_in ** 2).sum() + eps * (z_out ** 2).sum())


def realized_storage_cost_grad(z: np.ndarray, y: np.ndarray,
                               params: BatteryParams) -> np.ndarray:
    T = params.horizon
    z_in, z_out, z_state = _split(np.asarray(z, dtype=np.float64), T)
    y = np.asarray(y, dtype=np.float64)
    lam, eps, B = params.lambda_flex, params.eps_health, params.capacity
    return np.concatenate([y + 2.0 * eps * z_in,
                           -y + 2.0 * eps * z_out,
                           2.0 * lam * (z_state - B / 2.0)])


def storage_plan(mu: np.ndarray, params: BatteryParams,
                 options: SolverOptions | None = None):
    qp = build_storage_qp(mu, params)
    sol = solve_qp(qp, options)
    if sol.status != SolverStatus.OPTIMAL:
        raise RuntimeError(f"storage plan failed with status {sol.status.value}")
    return qp, sol


def storage_task_loss(mu: np.ndarray, y: np.ndarray, params: BatteryParams,
                      options: SolverOptions | None = None) -> float:
    _, sol = storage_plan(mu, params, options)
    return realized_storage_cost(sol.z, y, params)


def _grad_mu(qp, sol, y, params: BatteryParams) -> np.ndarray:
    from taskqp.argmin_diff import (DegenerateSolutionError, backward,
                                    factorize_kkt)

    T = params.horizon
    dL_dz = realized_storage_cost_grad(sol.z, y, params)
    try:
        grads = backward(factorize_kkt(qp, sol), dL_dz)
    except DegenerateSolutionError:
        # the plan is pinned by its operational limits (rate/capacity rows
        # determine it completely), so small price changes do not move it
        # and the realized cost is locally constant
        return np.zeros(T)
    # c = [mu; -mu; const]
    return grads.dc[:T] - grads.dc[T:2 * T]


def storage_task_loss_grad_mu(mu: np.ndarray, y: np.ndarray,
                              params: BatteryParams,
                              options: SolverOptions | None = None) -> np.ndarray:
    qp, sol = storage_plan(mu, params, options)
    return _grad_mu(qp, sol, np.asarray(y, dtype=np.float64), params)


def storage_task_loss_grad_logmu(mu: np.ndarray, y: np.ndarray,
                                 params: BatteryParams,
                                 options: SolverOptions | None = None
                                 ) -> np.ndarray:
    """Gradient in the log of the price means (models predict log prices)."""
    mu = np.asarray(mu, dtype=np.float64)
    return storage_task_loss_grad_mu(mu, y, params, options) * mu


# ---------------------------------------------------------------------------
# synthetic price data


def generate_price_data(num_days: int, seed: int, horizon: int = 24):
    """Hourly prices with a log-normal base following a daily demand shape
    plus occasional temperature-driven spikes that multiply prices by 3-10x.
    Features mirror what a desk would have ahead of the day: yesterday's
    log prices, temperatures, calendar encodings.  Returns (dataset, info)
    with info carrying each day's spike-free log-price means."""
    rng = np.random.default_rng((seed, 0x5708))
    hours = np.arange(horizon)
    shape = (0.25 * np.exp(-((hours - 8.5) ** 2) / 10.0)
             + 0.45 * np.exp(-((hours - 18.0) ** 2) / 6.0))
    days = num_days + 1
    temp_ar = 0.0
    log_prices = np.zeros((days, horizon))
    log_means = np.zeros((days, horizon))
    temps = np.zeros((days, horizon))
    doys = np.arange(days) % 365
    for t in range(days):
        season = np.cos(2.0 * np.pi * (doys[t] - 15.0) / 365.0)
        temp_ar = 0.7 * temp_ar + rng.normal(0.0, 2.0)
        temps[t] = (12.0 - 14.0 * season
                    + 4.0 * np.sin(2.0 * np.pi * (hours - 14.0) / 24.0) + temp_ar)
        weekend = t % 7 >= 5
        base = (3.2 + 0.15 * season + (0.0 if weekend else 0.2) + shape
                + 0.004 * (temps[t] - 18.0) ** 2)
        log_means[t] = base
        log_prices[t] = base + 0.12 * rng.standard_normal(horizon)
        # stress hours: extreme temperature makes spikes much more likely
        p_spike = 0.002 + 0.02 * (np.abs(temps[t] - 15.0) > 16.0)
        spikes = rng.random(horizon) < p_spike
        if spikes.any():
            log_prices[t, spikes] += np.log(rng.uniform(3.0, 10.0, spikes.sum()))
    prices = np.exp(log_prices)

    x_rows, y_rows = [], []
    for t in range(1, days):
        x_rows.append(np.concatenate([
            log_prices[t - 1],
            temps[t - 1],
            temps[t],
            (temps[t] - 18.0) ** 2 / 10.0,
            [float(t % 7 >= 5),
             np.sin(2.0 * np.pi * doys[t] / 365.0),
             np.cos(2.0 * np.pi * doys[t] / 365.0)],
        ]))
        y_rows.append(prices[t])
    info = {"log_mu_true": log_means[1:]}
    return Dataset(np.array(x_rows), np.array(y_rows)), info


class StorageTask:
    """Adapter exposing battery arbitrage to the generic trainer.  Models
    predict log prices; the planner sees their exponential."""

    name = "storage"
    nll_loss = "mse"

    def __init__(self, params: BatteryParams):
        self.params = params
        self.decision_dim = 3 * params.horizon

    def nll_target(self, y):
        return np.log(np.maximum(y, 1e-12))

    def decision(self, model_out: np.ndarray):
        mu = np.exp(np.clip(model_out, -30.0, 30.0))
        try:
            qp, sol = storage_plan(mu, self.params)
        except (RuntimeError, ValueError):
            return None
        return {"decision": sol.z, "qp": qp, "sol": sol, "mu": mu}

    def realized_cost(self, decision: np.ndarray, y) -> float:
        return realized_storage_cost(decision, y, self.params)

    def violations(self, decision: np.ndarray) -> int:
        return int((self.constraint_values(decision) > 1e-6).sum())

    def constraint_values(self, decision: np.ndarray) -> np.ndarray:
        T = self.params.horizon
        z_in, z_out, z_state = _split(np.asarray(decision, dtype=np.float64), T)
        return np.concatenate([
            z_in - self.params.max_charge, -z_in,
            z_out - self.params.max_discharge, -z_out,
            z_state - self.params.capacity, -z_state,
        ])

    def grad_model_out(self, proxy: dict, y, penalty_weight: float = 0.0,
                       constraint_mode: str = "penalty") -> np.ndarray:
        # operational limits are hard constraints of the plan itself, so
        # there is never a violation branch to take
        grad_mu = _grad_mu(proxy["qp"], proxy["sol"],
                           np.asarray(y, dtype=np.float64), self.params)
        return grad_mu * proxy["mu"]

    def point_prediction(self, model_out: np.ndarray) -> np.ndarray:
        return model_out

    def rmse_target(self, y) -> np.ndarray:
        return np.log(np.maximum(y, 1e-12))
