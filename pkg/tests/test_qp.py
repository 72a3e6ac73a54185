"""Solver contract tests: residuals, oracle agreement, invariances."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taskqp.qp import (
    QPSolution,
    QuadraticProgram,
    SolverOptions,
    SolverStatus,
    kkt_residuals,
    solve_batch,
    solve_qp,
)

from oracles import make_random_qp, pgd_solve


class TestBasicSolves:
    def test_unconstrained_scalar_min_at_zero(self):
        qp = QuadraticProgram(Q=[[1.0]], c=[0.0])
        sol = solve_qp(qp)
        assert sol.status == SolverStatus.OPTIMAL
        assert abs(sol.z[0]) < 1e-10

    def test_active_box_constraint(self):
        # min 0.5 z^2 - 2z s.t. z <= 1: unconstrained optimum 2, clipped to 1
        qp = QuadraticProgram(Q=[[1.0]], c=[-2.0], G=[[1.0]], h=[1.0])
        sol = solve_qp(qp)
        assert sol.status == SolverStatus.OPTIMAL
        assert sol.z[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.lam[0] == pytest.approx(1.0, abs=1e-6)

    def test_equality_only(self):
        qp = QuadraticProgram(Q=np.eye(3), c=np.zeros(3), A=[[1.0, 1.0, 1.0]], b=[3.0])
        sol = solve_qp(qp)
        assert sol.status == SolverStatus.OPTIMAL
        np.testing.assert_allclose(sol.z, np.ones(3), atol=1e-8)

    def test_inactive_constraints_match_unconstrained(self, rng):
        Q = np.diag([2.0, 1.0])
        c = np.array([-2.0, 1.0])
        free = solve_qp(QuadraticProgram(Q=Q, c=c))
        far = QuadraticProgram(Q=Q, c=c, G=np.eye(2), h=[100.0, 100.0])
        sol = solve_qp(far)
        np.testing.assert_allclose(sol.z, free.z, atol=1e-7)
        assert np.abs(sol.lam).max() < 1e-6

    def test_infeasible_reported_not_raised(self):
        qp = QuadraticProgram(Q=[[1.0]], c=[0.0], G=[[1.0], [-1.0]], h=[-1.0, -1.0])
        sol = solve_qp(qp)
        assert sol.status in (SolverStatus.INFEASIBLE, SolverStatus.MAX_ITERATIONS,
                              SolverStatus.NUMERICAL_FAILURE)

    def test_max_iterations_status(self):
        qp = QuadraticProgram(Q=[[1.0]], c=[-2.0], G=[[1.0]], h=[1.0])
        sol = solve_qp(qp, SolverOptions(max_iterations=1, tolerance=1e-12))
        assert sol.status in (SolverStatus.MAX_ITERATIONS, SolverStatus.OPTIMAL)

    def test_iterations_within_budget(self, rng):
        for k in range(20):
            qp = make_random_qp(rng, 8, 12, 2)
            sol = solve_qp(qp)
            assert sol.status == SolverStatus.OPTIMAL
            assert sol.iterations <= 100


class TestValidation:
    def test_asymmetric_q_rejected(self):
        with pytest.raises(ValueError, match="asymmetry"):
            QuadraticProgram(Q=[[1.0, 0.5], [0.0, 1.0]], c=[0.0, 0.0])

    def test_near_symmetric_q_symmetrized(self):
        eps = 5e-11
        qp = QuadraticProgram(Q=[[1.0, eps], [0.0, 1.0]], c=[0.0, 0.0])
        np.testing.assert_allclose(qp.Q, qp.Q.T)

    def test_indefinite_q_rejected(self):
        with pytest.raises(ValueError, match="positive semidefinite"):
            QuadraticProgram(Q=[[-1.0, 0.0], [0.0, 1.0]], c=[0.0, 0.0])

    def test_psd_with_zero_eigenvalue_accepted(self):
        QuadraticProgram(Q=[[1.0, 0.0], [0.0, 0.0]], c=[0.0, 0.0],
                         G=[[0.0, 1.0]], h=[1.0])

    def test_rank_deficient_equalities_rejected(self):
        with pytest.raises(ValueError, match="row rank"):
            QuadraticProgram(Q=np.eye(2), c=np.zeros(2),
                             A=[[1.0, 1.0], [2.0, 2.0]], b=[1.0, 2.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            QuadraticProgram(Q=np.eye(2), c=[0.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            QuadraticProgram(Q=np.eye(2), c=np.zeros(2), G=[[1.0, 0.0]], h=[1.0, 2.0])

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            QuadraticProgram(Q=[[np.nan]], c=[0.0])
        with pytest.raises(ValueError, match="non-finite"):
            QuadraticProgram(Q=[[1.0]], c=[np.inf])

    def test_bad_options_rejected(self):
        with pytest.raises(ValueError):
            SolverOptions(tolerance=0.0)
        with pytest.raises(ValueError):
            SolverOptions(max_iterations=0)
        with pytest.raises(ValueError):
            SolverOptions(regularization=-1e-9)


class TestResiduals:
    def test_optimal_implies_small_residuals(self, rng):
        for k in range(30):
            n = int(rng.integers(1, 21))
            m = int(rng.integers(0, 41))
            p = int(rng.integers(0, min(6, n + 1)))
            qp = make_random_qp(rng, n, m, p)
            sol = solve_qp(qp)
            assert sol.status == SolverStatus.OPTIMAL, (n, m, p)
            assert kkt_residuals(qp, sol).max_residual < 1e-8

    def test_residual_fields_on_suboptimal_point(self):
        qp = QuadraticProgram(Q=[[2.0]], c=[-2.0], G=[[1.0]], h=[0.5])
        bad = QPSolution(np.array([1.0]), np.array([-0.5]), np.zeros(0), 0,
                         SolverStatus.OPTIMAL)
        rep = kkt_residuals(qp, bad)
        assert rep.primal_ineq == pytest.approx(0.5)
        assert rep.dual_neg == pytest.approx(0.5)
        assert rep.complementarity == pytest.approx(0.25)
        assert rep.stationarity == pytest.approx(abs(2.0 - 2.0 - 0.5))
        assert rep.max_residual == pytest.approx(0.5)


class TestOracleAgreement:
    def test_matches_projected_gradient_small_instances(self, rng):
        for k in range(8):
            n = int(rng.integers(1, 4))
            m = int(rng.integers(1, 5))
            p = int(rng.integers(0, 2)) if n > 1 else 0
            qp = make_random_qp(rng, n, m, p)
            sol = solve_qp(qp)
            assert sol.status == SolverStatus.OPTIMAL
            z_ref = pgd_solve(qp, iterations=30_000, step=1e-3)
            np.testing.assert_allclose(sol.z, z_ref, atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10.0))
def test_objective_scaling_leaves_minimizer_fixed(seed, scale):
    rng = np.random.default_rng(seed)
    qp = make_random_qp(rng, 4, 6, 1)
    tight = SolverOptions(tolerance=1e-10)
    sol = solve_qp(qp, tight)
    scaled = QuadraticProgram(Q=scale * qp.Q, c=scale * qp.c, G=qp.G, h=qp.h,
                              A=qp.A, b=qp.b)
    sol_s = solve_qp(scaled, tight)
    assert sol.status == sol_s.status == SolverStatus.OPTIMAL
    np.testing.assert_allclose(sol_s.z, sol.z, atol=1e-6)
    np.testing.assert_allclose(sol_s.lam, scale * sol.lam, atol=1e-5 * max(1, scale))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_constraint_removal_never_raises_objective(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 8))
    qp = make_random_qp(rng, 3, m, 0)
    sol = solve_qp(qp)
    drop = int(rng.integers(0, m))
    keep = [i for i in range(m) if i != drop]
    sub = QuadraticProgram(Q=qp.Q, c=qp.c, G=qp.G[keep], h=qp.h[keep])
    sol_sub = solve_qp(sub)
    assert sol.status == sol_sub.status == SolverStatus.OPTIMAL
    assert sub.objective(sol_sub.z) <= qp.objective(sol.z) + 1e-7


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_solved_status_residual_contract(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    qp = make_random_qp(rng, n, int(rng.integers(0, 20)), int(rng.integers(0, min(4, n + 1))))
    sol = solve_qp(qp)
    if sol.status == SolverStatus.OPTIMAL:
        assert kkt_residuals(qp, sol).max_residual < 1e-8


class TestBatch:
    def test_batch_identical_to_sequential(self, rng):
        qps = [make_random_qp(rng, 5, 8, 1) for _ in range(12)]
        batch = solve_batch(qps)
        for qp, got in zip(qps, batch):
            ref = solve_qp(qp)
            assert got.status == ref.status
            np.testing.assert_array_equal(got.z, ref.z)
            np.testing.assert_array_equal(got.lam, ref.lam)
            np.testing.assert_array_equal(got.nu, ref.nu)
            assert got.iterations == ref.iterations

    def test_batch_preserves_order(self, rng):
        qps = [QuadraticProgram(Q=[[1.0]], c=[-float(i)]) for i in range(5)]
        zs = [s.z[0] for s in solve_batch(qps)]
        np.testing.assert_allclose(zs, np.arange(5.0), atol=1e-9)


class TestObjective:
    def test_objective_value(self):
        qp = QuadraticProgram(Q=[[2.0, 0.0], [0.0, 4.0]], c=[1.0, -1.0])
        z = np.array([1.0, 2.0])
        assert qp.objective(z) == pytest.approx(0.5 * (2 + 16) + 1 - 2)
