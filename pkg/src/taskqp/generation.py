"""24-hour generator scheduling under Gaussian demand forecasts.

Excess generation costs gamma_e per unit, shortage costs gamma_s, and a
quadratic term penalizes deviation from realized demand.  Under a Gaussian
forecast the expected linear part has the closed form ``alpha`` below, so
the schedule solves

    minimize_z  sum_i alpha(z_i) + 0.5 * ((z_i - mu_i)^2 + sigma2_i)
    subject to  |z_{i+1} - z_i| <= ramp_limit,

which is convex but not quadratic; we solve it by sequential quadratic
programming with exact second-order expansions of alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from taskqp.data import Dataset
from taskqp.qp import (QPSolution, QuadraticProgram, SolverOptions,
                       SolverStatus, solve_qp)

__all__ = [
    "GenSchedParams",
    "GaussianForecast",
    "SqpResult",
    "SqpError",
    "alpha",
    "alpha_dz",
    "alpha_dzz",
    "alpha_dmu",
    "expected_generation_cost",
    "ramp_constraints",
    "sqp_solve",
    "realized_generation_cost",
    "realized_generation_cost_grad",
    "generation_task_loss",
    "generation_task_loss_grad",
    "generate_load_data",
    "GenerationTask",
]

SIGMA2_FLOOR = 1e-8


@dataclass(frozen=True)
class GenSchedParams:
    gamma_e: float = 0.5
    gamma_s: float = 50.0
    ramp_limit: float = 0.4
    sqp_tol: float = 1e-6
    sqp_max_iter: int = 50

    def __post_init__(self) -> None:
        if self.gamma_e <= 0 or self.gamma_s <= 0:
            raise ValueError("excess and shortage prices must be positive")
        if self.ramp_limit <= 0:
            raise ValueError("ramp_limit must be positive")
        if self.sqp_tol <= 0 or self.sqp_max_iter < 1:
            raise ValueError("bad SQP controls")


@dataclass(frozen=True)
class GaussianForecast:
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if mu.shape != sigma2.shape or mu.ndim != 1:
            raise ValueError("mu and sigma2 must be 1-d arrays of equal length")
        if not (np.isfinite(mu).all() and np.isfinite(sigma2).all()):
            raise ValueError("forecast contains non-finite entries")
        if (sigma2 < SIGMA2_FLOOR).any():
            raise ValueError(f"sigma2 entries must be at least {SIGMA2_FLOOR}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)


class SqpError(RuntimeError):
    """Subproblem failure or non-convergence of the SQP iteration."""


def _pdf(z, mu, sigma2):
    return np.exp(-0.5 * (z - mu) ** 2 / sigma2) / np.sqrt(2.0 * np.pi * sigma2)


def _cdf(z, mu, sigma2):
    return ndtr((z - mu) / np.sqrt(sigma2))


def alpha(z, mu, sigma2, params: GenSchedParams):
    """Expected linear over/under-generation cost for a Gaussian demand."""
    z, mu, sigma2 = np.broadcast_arrays(z, mu, sigma2)
    gs, ge = params.gamma_s, params.gamma_e
    return ((gs + ge) * (sigma2 * _pdf(z, mu, sigma2)
                         + (z - mu) * _cdf(z, mu, sigma2))
            - gs * (z - mu))


def alpha_dz(z, mu, sigma2, params: GenSchedParams):
    return (params.gamma_s + params.gamma_e) * _cdf(z, mu, sigma2) - params.gamma_s


def alpha_dzz(z, mu, sigma2, params: GenSchedParams):
    return (params.gamma_s + params.gamma_e) * _pdf(z, mu, sigma2)


def alpha_dmu(z, mu, sigma2, params: GenSchedParams):
    # alpha depends on z - mu only
    return -alpha_dz(z, mu, sigma2, params)


def expected_generation_cost(z, forecast: GaussianForecast,
                             params: GenSchedParams) -> float:
    mu, sigma2 = forecast.mu, forecast.sigma2
    return float((alpha(z, mu, sigma2, params)
                  + 0.5 * ((z - mu) ** 2 + sigma2)).sum())


def ramp_constraints(T: int, ramp_limit: float):
    rows = []
    for i in range(T - 1):
        up = np.zeros(T)
        up[i + 1], up[i] = 1.0, -1.0
        rows.append(up)
        rows.append(-up)
    G = np.array(rows)
    return G, np.full(2 * (T - 1), ramp_limit)


@dataclass
class SqpResult:
    z: np.ndarray
    iterations: int
    qp: QuadraticProgram
    sol: QPSolution
    z_expand: np.ndarray        # expansion point of the returned subproblem


def sqp_solve(forecast: GaussianForecast, params: GenSchedParams,
              options: SolverOptions | None = None) -> SqpResult:
    """Iterate exact second-order expansions of the expected cost about the
    current schedule until the step drops below sqp_tol (max-norm).

    Each subproblem step from a feasible iterate is a descent direction of
    the true expected cost (the expansion Hessian is at least the identity),
    but a full step can overshoot its expansion's region of validity when
    curvatures differ strongly across hours; a backtracking line search on
    the true cost restores global convergence while leaving well-behaved
    instances on the pure full-step path.  A forecast that itself violates
    the ramp limits is first projected onto the feasible set — fractional
    steps between an infeasible point and a feasible subproblem solution
    would stay infeasible, and the descent property only holds from
    feasible iterates.
    """
    mu, sigma2 = forecast.mu, forecast.sigma2
    T = len(mu)
    G, h = ramp_constraints(T, params.ramp_limit)
    z = mu.copy()
    if T > 1 and np.abs(np.diff(z)).max() > params.ramp_limit:
        proj = QuadraticProgram(Q=np.eye(T), c=-mu, G=G, h=h)
        psol = solve_qp(proj, options)
        if psol.status != SolverStatus.OPTIMAL:
            raise SqpError("feasibility projection failed with status "
                           f"{psol.status.value}")
        z = psol.z.copy()
    f_z = expected_generation_cost(z, forecast, params)
    for it in range(1, params.sqp_max_iter + 1):
        a2 = alpha_dzz(z, mu, sigma2, params)
        g = alpha_dz(z, mu, sigma2, params) + (z - mu)
        H = a2 + 1.0
        qp = QuadraticProgram(Q=np.diag(H), c=g - H * z, G=G, h=h)
        sol = solve_qp(qp, options)
        if sol.status != SolverStatus.OPTIMAL:
            raise SqpError(f"subproblem failed with status {sol.status.value}")
        dz = sol.z - z
        step = np.abs(dz).max()
        if step < params.sqp_tol:
            return SqpResult(z=sol.z.copy(), iterations=it, qp=qp, sol=sol,
                             z_expand=z.copy())
        gd = float(g @ dz)
        t = 1.0
        z_new = sol.z
        f_new = expected_generation_cost(z_new, forecast, params)
        # in the convergence tail the true decrease falls below the rounding
        # error of the cost itself; the slack keeps that noise from rejecting
        # full steps (cycling raises the cost by far more than it)
        f_slack = 16.0 * np.finfo(float).eps * max(1.0, abs(f_z))
        while gd < 0.0 and f_new > f_z + 1e-4 * t * gd + f_slack and t > 1e-6:
            t *= 0.5
            z_new = z + t * dz
            f_new = expected_generation_cost(z_new, forecast, params)
        z, f_z = z_new, f_new
    raise SqpError(f"no convergence in {params.sqp_max_iter} iterations "
                   f"(last step {step:.3e})")


def realized_generation_cost(z: np.ndarray, y: np.ndarray,
                             params: GenSchedParams) -> float:
    short = np.maximum(y - z, 0.0)
    over = np.maximum(z - y, 0.0)
    return float((params.gamma_s * short + params.gamma_e * over
                  + 0.5 * (z - y) ** 2).sum())


def realized_generation_cost_grad(z: np.ndarray, y: np.ndarray,
                                  params: GenSchedParams) -> np.ndarray:
    return (-params.gamma_s * (y > z) + params.gamma_e * (z > y) + (z - y))


def _grad_mu_from_subproblem(res: SqpResult, forecast: GaussianForecast,
                             params: GenSchedParams,
                             dL_dz: np.ndarray) -> np.ndarray:
    """Chain a loss gradient at the schedule through the final subproblem's
    data back to the forecast means (sigma2 held fixed)."""
    from taskqp.argmin_diff import backward, factorize_kkt

    mu, sigma2 = forecast.mu, forecast.sigma2
    zk = res.z_expand
    grads = backward(factorize_kkt(res.qp, res.sol), dL_dz)
    a2 = alpha_dzz(zk, mu, sigma2, params)
    da2_dmu = a2 * (zk - mu) / sigma2
    # c = alpha'(zk) + zk - mu - (a2 + 1) zk; Q_ii = a2 + 1
    dc_dmu = -a2 - 1.0 - zk * da2_dmu
    dQ_dmu = da2_dmu
    return grads.dc * dc_dmu + np.diag(grads.dQ) * dQ_dmu


def generation_task_loss(mu, sigma2, y, params: GenSchedParams,
                         options: SolverOptions | None = None) -> float:
    res = sqp_solve(GaussianForecast(mu, sigma2), params, options)
    return realized_generation_cost(res.z, np.asarray(y, dtype=np.float64), params)


def generation_task_loss_grad(mu, sigma2, y, params: GenSchedParams,
                              options: SolverOptions | None = None) -> np.ndarray:
    forecast = GaussianForecast(mu, sigma2)
    res = sqp_solve(forecast, params, options)
    dL_dz = realized_generation_cost_grad(res.z, np.asarray(y, dtype=np.float64),
                                          params)
    return _grad_mu_from_subproblem(res, forecast, params, dL_dz)


# ---------------------------------------------------------------------------
# synthetic electricity-load data


def _daily_shape(hours: np.ndarray, weekend: bool) -> np.ndarray:
    if weekend:
        return 0.65 + 0.22 * np.exp(-((hours - 13.0) ** 2) / 18.0)
    return (0.70 + 0.25 * np.exp(-((hours - 8.5) ** 2) / 6.0)
            + 0.35 * np.exp(-((hours - 18.5) ** 2) / 8.0))


_HOLIDAY_DOYS = frozenset({0, 125, 185, 245, 359})


def generate_load_data(num_days: int, seed: int, noise_base: float = 0.05,
                       noise_load: float = 0.10):
    """Synthetic hourly load with yearly/weekly/daily structure, a quadratic
    temperature response, and noise that grows with the load level.

    Features for day t: previous-day load (24), previous-day temperature
    (24), same-day temperature (24), squared same-day temperature deviation
    (24), weekend and holiday flags, and the yearly phase (2).  Returns
    (dataset, info) where info carries the true conditional means and the
    true per-hour noise variances of every target day.
    """
    rng = np.random.default_rng((seed, 0x10AD))
    hours = np.arange(24.0)
    days = num_days + 1
    temp_ar = 0.0
    temps = np.zeros((days, 24))
    loads_det = np.zeros((days, 24))
    sigmas = np.zeros((days, 24))
    weekend_flags = np.zeros(days)
    holiday_flags = np.zeros(days)
    doys = np.zeros(days)
    for t in range(days):
        doy = t % 365
        doys[t] = doy
        season = np.cos(2.0 * np.pi * (doy - 15.0) / 365.0)
        weekday = t % 7
        weekend = weekday >= 5
        holiday = doy in _HOLIDAY_DOYS
        weekend_flags[t] = float(weekend)
        holiday_flags[t] = float(holiday)
        temp_ar = 0.7 * temp_ar + rng.normal(0.0, 2.0)
        temps[t] = (12.0 - 14.0 * season
                    + 4.0 * np.sin(2.0 * np.pi * (hours - 14.0) / 24.0) + temp_ar)
        level = 3.0 + 0.8 * season
        scale = 0.85 if (weekend or holiday) else 1.15
        loads_det[t] = (level + scale * _daily_shape(hours, weekend or holiday)
                        + 0.012 * (temps[t] - 18.0) ** 2)
        sigmas[t] = noise_base + noise_load * np.maximum(loads_det[t] - 3.4, 0.0)
    loads = loads_det + sigmas * rng.standard_normal((days, 24))

    x_rows, y_rows, mu_rows, s2_rows = [], [], [], []
    for t in range(1, days):
        x_rows.append(np.concatenate([
            loads[t - 1],
            temps[t - 1],
            temps[t],
            (temps[t] - 18.0) ** 2 / 10.0,
            [weekend_flags[t], holiday_flags[t],
             np.sin(2.0 * np.pi * doys[t] / 365.0),
             np.cos(2.0 * np.pi * doys[t] / 365.0)],
        ]))
        y_rows.append(loads[t])
        mu_rows.append(loads_det[t])
        s2_rows.append(sigmas[t] ** 2)
    info = {"mu_true": np.array(mu_rows), "sigma2_true": np.array(s2_rows)}
    return Dataset(np.array(x_rows), np.array(y_rows)), info


class GenerationTask:
    """Adapter exposing generator scheduling to the generic trainer."""

    name = "generation"
    nll_loss = "mse"
    decision_dim = 24

    def __init__(self, params: GenSchedParams, sigma2: np.ndarray):
        self.params = params
        self.sigma2 = np.asarray(sigma2, dtype=np.float64)

    def nll_target(self, y):
        return y

    def decision(self, model_out: np.ndarray):
        try:
            res = sqp_solve(GaussianForecast(model_out, self.sigma2), self.params)
        except (SqpError, ValueError):
            return None
        return {"decision": res.z, "res": res,
                "forecast": GaussianForecast(model_out, self.sigma2)}

    def realized_cost(self, decision: np.ndarray, y) -> float:
        return realized_generation_cost(decision, y, self.params)

    def realized_cost_grad(self, decision: np.ndarray, y) -> np.ndarray:
        return realized_generation_cost_grad(decision, y, self.params)

    def violations(self, decision: np.ndarray) -> int:
        diffs = np.abs(np.diff(decision))
        return int((diffs > self.params.ramp_limit + 1e-6).sum())

    def constraint_values(self, decision: np.ndarray) -> np.ndarray:
        diffs = np.diff(decision)
        return np.concatenate([diffs - self.params.ramp_limit,
                               -diffs - self.params.ramp_limit])

    def grad_model_out(self, proxy: dict, y, penalty_weight: float = 0.0,
                       constraint_mode: str = "penalty") -> np.ndarray:
        res = proxy["res"]
        z = res.z
        T = len(z)
        gvals = self.constraint_values(z)
        violated = gvals > 0
        G, _ = ramp_constraints(T, self.params.ramp_limit)
        if constraint_mode == "branch" and violated.any():
            dL_dz = penalty_weight * G[int(np.argmax(gvals))]
        else:
            dL_dz = realized_generation_cost_grad(z, y, self.params)
            if constraint_mode == "penalty" and violated.any():
                dL_dz = dL_dz + penalty_weight * G[violated].sum(axis=0)
        return _grad_mu_from_subproblem(res, proxy["forecast"], self.params,
                                        dL_dz)

    def point_prediction(self, model_out: np.ndarray) -> np.ndarray:
        return model_out

    def rmse_target(self, y) -> np.ndarray:
        return y

    def projection_qp(self, u: np.ndarray) -> QuadraticProgram:
        T = len(u)
        G, h = ramp_constraints(T, self.params.ramp_limit)
        return QuadraticProgram(Q=np.eye(T), c=-np.asarray(u, dtype=np.float64),
                                G=G, h=h)
