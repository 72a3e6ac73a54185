"""Newsvendor-style inventory task.

A single order quantity is chosen before demand is known.  Ordering,
backorder, and holding each carry linear plus quadratic costs, so for a
discrete demand distribution the expected-cost minimization is a QP: one
order variable plus per-demand-level shortage and excess slacks, with the
slack definitions relaxed to inequalities (they are tight at any optimum
with positive probabilities).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskqp.data import Dataset
from taskqp.qp import QuadraticProgram, SolverOptions, SolverStatus, solve_qp

__all__ = [
    "InventoryParams",
    "build_inventory_qp",
    "realized_stock_cost",
    "realized_stock_cost_grad",
    "expected_stock_cost",
    "inventory_task_loss",
    "inventory_task_loss_grad",
    "softmax_jacobian_vec",
    "generate_inventory_data",
    "true_demand_probs",
    "InventoryTask",
]

PROB_CLAMP = 1e-8


@dataclass(frozen=True)
class InventoryParams:
    """Linear/quadratic coefficients for ordering, backorder, and holding."""

    c_order: float = 10.0
    q_order: float = 2.0
    c_back: float = 30.0
    q_back: float = 14.0
    c_hold: float = 10.0
    q_hold: float = 2.0

    def __post_init__(self) -> None:
        for name in ("c_order", "q_order", "c_back", "q_back", "c_hold", "q_hold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.q_order + min(self.q_back, self.q_hold) <= 0:
            raise ValueError("order decision needs some quadratic curvature")


def build_inventory_qp(prob: np.ndarray, params: InventoryParams,
                       d: np.ndarray) -> QuadraticProgram:
    """Expected-cost QP over (order z, shortages z_b, excesses z_h).

    ``prob`` must be (near) a probability vector; model outputs should be
    clamped at PROB_CLAMP before calling (softmax can underflow to zero,
    which would make the QP lose strict convexity in that coordinate).
    """
    prob = np.asarray(prob, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    k = len(d)
    if prob.shape != (k,):
        raise ValueError(f"prob has shape {prob.shape}, demand grid has {k} levels")
    if (prob < 0).any():
        raise ValueError("probabilities must be nonnegative")
    if abs(prob.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {prob.sum():.8f}, expected 1")
    n = 2 * k + 1
    Q = np.diag(np.concatenate([[params.q_order],
                                params.q_back * prob,
                                params.q_hold * prob]))
    c = np.concatenate([[params.c_order],
                        params.c_back * prob,
                        params.c_hold * prob])
    I = np.eye(k)
    zk = np.zeros((k, k))
    col = np.ones((k, 1))
    G = np.vstack([
        np.hstack([-col, -I, zk]),          # d_i - z <= z_b,i
        np.hstack([col, zk, -I]),           # z - d_i <= z_h,i
        np.concatenate([[-1.0], np.zeros(2 * k)])[None, :],  # z >= 0
        np.hstack([np.zeros((k, 1)), -I, zk]),               # z_b >= 0
        np.hstack([np.zeros((k, 1)), zk, -I]),               # z_h >= 0
    ])
    h = np.concatenate([-d, d, [0.0], np.zeros(2 * k)])
    return QuadraticProgram(Q=Q, c=c, G=G, h=h)


def realized_stock_cost(z: float, y: float, params: InventoryParams) -> float:
    back = max(y - z, 0.0)
    hold = max(z - y, 0.0)
    return (params.c_order * z + 0.5 * params.q_order * z * z
            + params.c_back * back + 0.5 * params.q_back * back * back
            + params.c_hold * hold + 0.5 * params.q_hold * hold * hold)


def realized_stock_cost_grad(z: float, y: float, params: InventoryParams) -> float:
    g = params.c_order + params.q_order * z
    if y > z:
        g -= params.c_back + params.q_back * (y - z)
    elif z > y:
        g += params.c_hold + params.q_hold * (z - y)
    return g


def expected_stock_cost(z: float, prob: np.ndarray, params: InventoryParams,
                        d: np.ndarray) -> float:
    return float(sum(p * realized_stock_cost(z, yi, params)
                     for p, yi in zip(prob, d)))


def _solve_order(prob, params, d, options=None):
    qp = build_inventory_qp(np.maximum(prob, PROB_CLAMP), params, d)
    sol = solve_qp(qp, options)
    if sol.status != SolverStatus.OPTIMAL:
        raise RuntimeError(f"inventory QP solve failed: {sol.status}")
    return qp, sol


def inventory_task_loss(prob: np.ndarray, y: float, params: InventoryParams,
                        d: np.ndarray,
                        options: SolverOptions | None = None) -> float:
    """Realized cost of the order implied by a demand distribution."""
    _, sol = _solve_order(prob, params, d, options)
    return realized_stock_cost(float(sol.z[0]), y, params)


def inventory_task_loss_grad(prob: np.ndarray, y: float,
                             params: InventoryParams,
                             d: np.ndarray,
                             options: SolverOptions | None = None) -> np.ndarray:
    """Gradient of the realized cost in the demand probabilities.

    When the optimal order sits exactly on a demand level the active
    constraints pin it against small probability changes, making the
    realized cost locally constant; the zero vector returned there is the
    exact gradient (and a valid subgradient on the region's boundary).
    """
    from taskqp.argmin_diff import DegenerateSolutionError, backward, factorize_kkt

    qp, sol = _solve_order(prob, params, d, options)
    k = len(d)
    dL_dz = np.zeros(qp.n)
    dL_dz[0] = realized_stock_cost_grad(float(sol.z[0]), y, params)
    try:
        grads = backward(factorize_kkt(qp, sol), dL_dz)
    except DegenerateSolutionError:
        return np.zeros(k)
    dprob = (params.c_back * grads.dc[1:1 + k]
             + params.c_hold * grads.dc[1 + k:]
             + params.q_back * np.diag(grads.dQ)[1:1 + k]
             + params.q_hold * np.diag(grads.dQ)[1 + k:])
    # clamped coordinates do not respond to the raw probability
    dprob[np.asarray(prob) < PROB_CLAMP] = 0.0
    return dprob


def softmax_jacobian_vec(probs: np.ndarray, v: np.ndarray) -> np.ndarray:
    """J_softmax' v evaluated via probabilities (chain to logits)."""
    return probs * (v - float(v @ probs))


def true_demand_probs(x: np.ndarray, theta: np.ndarray,
                      truth: str) -> np.ndarray:
    logits = np.atleast_2d(x) @ theta
    if truth == "nonlinear":
        logits = logits ** 2
    elif truth != "linear":
        raise ValueError(f"unknown truth kind {truth!r}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def generate_inventory_data(num: int, n_features: int, k: int, truth: str,
                            seed: int, theta: np.ndarray | None = None):
    """Features are standard normal; demand is drawn from a (squared) linear
    softmax model over k levels.  Returns (dataset, theta)."""
    rng = np.random.default_rng((seed, 0x19A))
    if theta is None:
        theta = rng.standard_normal((n_features, k)) / np.sqrt(n_features)
    x = rng.standard_normal((num, n_features))
    probs = true_demand_probs(x, theta, truth)
    u = rng.random(num)
    y = (u[:, None] > probs.cumsum(axis=1)).sum(axis=1)
    y = np.minimum(y, k - 1)
    return Dataset(x, y.astype(np.int64)), theta


class InventoryTask:
    """Adapter exposing the inventory problem to the generic trainer."""

    name = "inventory"
    nll_loss = "cross_entropy"
    decision_dim = 1

    def __init__(self, params: InventoryParams, d: np.ndarray):
        self.params = params
        self.d = np.asarray(d, dtype=np.float64)
        self.k = len(self.d)

    def nll_target(self, y):
        return y

    def decision(self, model_out: np.ndarray):
        prob = np.maximum(model_out, PROB_CLAMP)
        qp = build_inventory_qp(prob, self.params, self.d)
        sol = solve_qp(qp)
        if sol.status != SolverStatus.OPTIMAL:
            return None
        return {"decision": sol.z[:1].copy(), "qp": qp, "sol": sol,
                "raw_out": model_out}

    def realized_cost(self, decision: np.ndarray, y) -> float:
        return realized_stock_cost(float(decision[0]), float(self.d[int(y)]),
                                   self.params)

    def realized_cost_grad(self, decision: np.ndarray, y) -> np.ndarray:
        return np.array([realized_stock_cost_grad(
            float(decision[0]), float(self.d[int(y)]), self.params)])

    def violations(self, decision: np.ndarray) -> int:
        return int(decision[0] < -1e-6)

    def constraint_values(self, decision: np.ndarray) -> np.ndarray:
        # deterministic feasibility of the order decision: z >= 0
        return np.array([-decision[0]])

    def constraint_grads(self, decision: np.ndarray) -> np.ndarray:
        return np.array([[-1.0]])

    def grad_model_out(self, proxy: dict, y, penalty_weight: float = 0.0,
                       constraint_mode: str = "penalty") -> np.ndarray:
        from taskqp.argmin_diff import (DegenerateSolutionError, backward,
                                        factorize_kkt)

        qp, sol = proxy["qp"], proxy["sol"]
        z0 = float(sol.z[0])
        yv = float(self.d[int(y)])
        dL_dz = np.zeros(qp.n)
        gvals = self.constraint_values(sol.z[:1])
        violated = gvals > 0
        if constraint_mode == "branch" and violated.any():
            worst = int(np.argmax(gvals))
            dL_dz[0] = penalty_weight * self.constraint_grads(sol.z[:1])[worst, 0]
        else:
            dL_dz[0] = realized_stock_cost_grad(z0, yv, self.params)
            if constraint_mode == "penalty" and violated.any():
                dL_dz[0] += penalty_weight * float(
                    self.constraint_grads(sol.z[:1])[violated].sum(axis=0)[0])
        try:
            grads = backward(factorize_kkt(qp, sol), dL_dz)
        except DegenerateSolutionError:
            # the order is pinned exactly on a demand level: small changes in
            # the probabilities do not move it, so the realized cost is
            # locally constant and the gradient is zero
            return np.zeros(self.k)
        dprob = (self.params.c_back * grads.dc[1:1 + self.k]
                 + self.params.c_hold * grads.dc[1 + self.k:]
                 + self.params.q_back * np.diag(grads.dQ)[1:1 + self.k]
                 + self.params.q_hold * np.diag(grads.dQ)[1 + self.k:])
        dprob[proxy["raw_out"] < PROB_CLAMP] = 0.0
        return dprob

    def point_prediction(self, model_out: np.ndarray) -> float:
        return float(model_out @ self.d)

    def rmse_target(self, y) -> float:
        return float(self.d[int(y)])

    def projection_qp(self, u: np.ndarray) -> QuadraticProgram:
        return QuadraticProgram(Q=np.eye(1), c=-np.asarray(u, dtype=np.float64),
                                G=[[-1.0]], h=[0.0])
