import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastgn.rowspace import (
    BatchSystem,
    CGDivergenceError,
    ResidualBoundError,
    RowOperator,
    adjoint_discrepancy,
    apply_whitened_operator,
    backproject,
    cg_solve,
    conjugate_gradient,
    parameter_residual,
    residual_transfer,
    spectral_norm_estimate,
    whitened_jacobian_norm,
    whitened_rhs,
)


def dense_system(seed, b, d, damping=None):
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((b, d))
    p_star = rng.uniform(0.02, 0.98, b)
    q = p_star * (1 - p_star)
    r = 1 - p_star
    lam = float(10 ** rng.uniform(-2, 0.5)) if damping is None else damping
    return BatchSystem(RowOperator.from_dense(J), q, r, lam), J


def dense_direction(J, q, r, lam):
    b, d = J.shape
    H = (J.T * q) @ J / b
    return -np.linalg.solve(H + lam * np.eye(d), J.T @ r / b)


def scalar_system():
    # b = d = 1, J = [1], p_star = p_dagger = 0.5, lambda = 1
    return BatchSystem(RowOperator.from_dense([[1.0]]), np.array([0.25]), np.array([0.5]), 1.0)


def zero_system(b=4, d=3, lam=0.7):
    op = RowOperator(lambda v: np.zeros(b), lambda u: np.zeros(d), b, d)
    p = np.linspace(0.2, 0.8, b)
    return BatchSystem(op, p * (1 - p), 1 - p, lam)


@pytest.mark.parametrize("p_star,expected", [(0.5, 1.0), (0.8, 0.5), (0.2, 2.0)])
def test_whitened_rhs(p_star, expected):
    sys_ = BatchSystem(RowOperator.from_dense([[1.0]]), np.array([p_star * (1 - p_star)]),
                       np.array([1 - p_star]), 1.0)
    assert whitened_rhs(sys_)[0] == pytest.approx(expected, rel=1e-15)


def test_system_validation():
    op = RowOperator.from_dense(np.ones((2, 2)))
    with pytest.raises(ValueError):
        BatchSystem(op, np.array([0.1, 0.0]), np.array([0.5, 0.5]), 1.0)
    with pytest.raises(ValueError):
        BatchSystem(op, np.array([0.1, 0.1]), np.array([0.5, 0.5]), 0.0)
    with pytest.raises(ValueError):
        BatchSystem(op, np.array([0.1]), np.array([0.5]), 1.0)


def test_floor_counter():
    op = RowOperator.from_dense(np.ones((2, 1)))
    sys_ = BatchSystem(op, np.array([1e-310, 0.2]), np.array([1e-310, 0.5]), 1.0)
    assert sys_.n_floored == 1
    assert np.all(np.isfinite(whitened_rhs(sys_)))


def test_operator_examples():
    sys_ = zero_system()
    v = np.arange(1.0, 5.0)
    np.testing.assert_allclose(apply_whitened_operator(sys_, v), 4 * 0.7 * v)
    assert apply_whitened_operator(scalar_system(), np.array([2.0]))[0] == pytest.approx(2.5)


def test_operator_matches_dense_and_counts():
    sys_, J = dense_system(0, 7, 5)
    v = np.random.default_rng(1).standard_normal(7)
    sq = np.sqrt(sys_.q)
    B = sq[:, None] * (J @ J.T) * sq[None, :] + 7 * sys_.damping * np.eye(7)
    np.testing.assert_allclose(apply_whitened_operator(sys_, v), B @ v, atol=1e-12)
    assert sys_.op.apply_j_count == 1 and sys_.op.apply_jt_count == 1
    with pytest.raises(ValueError):
        apply_whitened_operator(sys_, np.ones(6))


def test_row_operator_shape_checks():
    op = RowOperator.from_dense(np.ones((3, 2)))
    with pytest.raises(ValueError):
        op.apply_j(np.ones(3))
    with pytest.raises(ValueError):
        op.apply_jt(np.ones(2))


def test_adjoint_probe_detects_sign_error():
    J = np.random.default_rng(2).standard_normal((5, 4))
    good = RowOperator.from_dense(J)
    bad = RowOperator(lambda v: J @ v, lambda u: -(J.T @ u), 5, 4)
    assert adjoint_discrepancy(good, 100, rng=0) <= 1e-14
    assert adjoint_discrepancy(bad, 100, rng=0) > 0.1
    # probes never touch the solver budget
    assert good.apply_j_count == good.apply_jt_count == 0


def test_cg_zero_operator_one_iteration():
    sys_ = zero_system()
    rep = cg_solve(sys_, tol=1e-12, max_iter=10, estimate_norm=False)
    assert rep.iterations == 1
    np.testing.assert_allclose(rep.u, whitened_rhs(sys_) / (4 * 0.7), rtol=1e-15)


def test_cg_scalar_case_and_backprojection():
    sys_ = scalar_system()
    rep = cg_solve(sys_, tol=1e-12, max_iter=1, jtilde_norm=0.5)
    assert rep.u[0] == pytest.approx(0.8, rel=1e-15)
    assert rep.direction[0] == pytest.approx(-0.4, rel=1e-15)
    assert rep.direction[0] == pytest.approx(-0.5 / 1.25, rel=1e-15)
    np.testing.assert_array_equal(backproject(sys_, np.zeros(1)), [0.0])


def test_cg_finite_termination():
    rng = np.random.default_rng(3)
    Qm, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    for k in (1, 2, 3, 5):
        eig = np.repeat(np.linspace(1.0, 4.0, k), -(-12 // k))[:12]
        A = (Qm * eig) @ Qm.T
        rhs = rng.standard_normal(12)
        x, iters, _ = conjugate_gradient(lambda v: A @ v, rhs, tol=1e-13, max_iter=50)
        assert iters <= k + 1
        assert np.linalg.norm(A @ x - rhs) <= 1e-9 * np.linalg.norm(rhs)


def test_cg_energy_error_monotone():
    rng = np.random.default_rng(4)
    M = rng.standard_normal((20, 20))
    A = M @ M.T + 0.1 * np.eye(20)
    rhs = rng.standard_normal(20)
    x_star = np.linalg.solve(A, rhs)
    errs = []

    def record(k, x):
        e = x - x_star
        errs.append(e @ A @ e)

    conjugate_gradient(lambda v: A @ v, rhs, tol=1e-14, max_iter=20, callback=record)
    assert len(errs) > 5
    assert all(b <= a * (1 + 1e-10) for a, b in zip(errs, errs[1:]))


def test_cg_divergence_on_indefinite():
    A = np.diag([1.0, -2.0])
    with pytest.raises(CGDivergenceError):
        conjugate_gradient(lambda v: A @ v, np.array([1.0, 1.0]), tol=1e-12, max_iter=5)
    with pytest.raises(CGDivergenceError):
        conjugate_gradient(lambda v: v * np.nan, np.array([1.0, 1.0]), tol=1e-12, max_iter=5)


def test_cg_argument_checks():
    with pytest.raises(ValueError):
        conjugate_gradient(lambda v: v, np.ones(2), tol=0.0)
    with pytest.raises(ValueError):
        conjugate_gradient(lambda v: v, np.ones(2), max_iter=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(1, 32), st.integers(0, 2**31))
def test_row_parameter_equivalence(b, d, seed):
    sys_, J = dense_system(seed, b, d)
    rep = cg_solve(sys_, tol=1e-12, max_iter=4 * b, estimate_norm=False)
    ref = dense_direction(J, sys_.q, sys_.r, sys_.damping)
    assert np.linalg.norm(rep.direction - ref) <= 1e-8 * np.linalg.norm(ref)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 20), st.integers(0, 2**31))
def test_unwhitened_route_agrees(b, d, seed):
    # (Q J J^T + b lam I) u' = r with d = -J^T u' is the same step as the whitened system
    sys_, J = dense_system(seed, b, d)
    u_prime = np.linalg.solve((sys_.q[:, None] * (J @ J.T)) + b * sys_.damping * np.eye(b), sys_.r)
    d_unwhitened = -J.T @ u_prime
    rep = cg_solve(sys_, tol=1e-13, max_iter=4 * b, estimate_norm=False)
    assert np.linalg.norm(rep.direction - d_unwhitened) <= 1e-8 * np.linalg.norm(d_unwhitened)


@pytest.mark.parametrize("max_iter", [1, 2, 3, 5, 8])
def test_operator_budget(max_iter):
    sys_, _ = dense_system(5, 10, 30)
    rep = cg_solve(sys_, tol=1e-14, max_iter=max_iter, estimate_norm=True)
    assert rep.iterations == max_iter
    assert sys_.op.apply_j_count == rep.iterations
    assert sys_.op.apply_jt_count == rep.iterations + 1


def test_budget_with_early_stop():
    sys_, _ = dense_system(6, 10, 3)
    rep = cg_solve(sys_, tol=1e-10, max_iter=10, estimate_norm=False)
    assert rep.iterations <= 4
    assert sys_.op.apply_j_count == rep.iterations
    assert sys_.op.apply_jt_count == rep.iterations + 1
    assert rep.row_residual_norm <= 1e-9 * rep.rhs_norm


def test_reported_residual_is_recomputed():
    sys_, J = dense_system(7, 9, 14)
    rep = cg_solve(sys_, tol=1e-14, max_iter=3, estimate_norm=False)
    sq = np.sqrt(sys_.q)
    B = sq[:, None] * (J @ J.T) * sq[None, :] + 9 * sys_.damping * np.eye(9)
    true = np.linalg.norm(B @ rep.u - whitened_rhs(sys_))
    assert rep.row_residual_norm == pytest.approx(true, rel=1e-10)


def test_exact_solve_parameter_residual_tiny():
    sys_, _ = dense_system(8, 6, 10)
    rep = cg_solve(sys_, tol=1e-14, max_iter=60)
    actual = residual_transfer(sys_, rep)
    assert actual <= 1e-9 * np.linalg.norm(sys_.gradient())


@pytest.mark.parametrize("seed", range(10))
def test_truncated_residual_transfer(seed):
    sys_, J = dense_system(seed, 8, 20)
    norm = np.linalg.norm(np.sqrt(sys_.q)[:, None] * J, 2)
    rep = cg_solve(sys_, tol=1e-14, max_iter=1, jtilde_norm=norm)
    actual = residual_transfer(sys_, rep)
    assert actual <= rep.param_residual_bound
    # residual identity: (H + lam I) d + g = -J_tilde^T e / b
    e = apply_whitened_operator(sys_, rep.u, sys_.op.diagnostic) - whitened_rhs(sys_)
    Jt = np.sqrt(sys_.q)[:, None] * J
    np.testing.assert_allclose(parameter_residual(sys_, rep.direction), -Jt.T @ e / 8, atol=1e-13)


def test_residual_transfer_flags_broken_adjoint():
    J = np.random.default_rng(9).standard_normal((8, 20))
    op = RowOperator(lambda v: J @ v, lambda u: 3 * (J.T @ u), 8, 20)
    p = np.linspace(0.1, 0.9, 8)
    sys_ = BatchSystem(op, p * (1 - p), 1 - p, 0.3)
    rep = cg_solve(sys_, tol=1e-14, max_iter=2, jtilde_norm=np.linalg.norm(np.sqrt(sys_.q)[:, None] * J, 2))
    with pytest.raises(ResidualBoundError):
        residual_transfer(sys_, rep)


def test_residual_transfer_needs_bound():
    sys_, _ = dense_system(10, 4, 4)
    rep = cg_solve(sys_, max_iter=2, estimate_norm=False)
    with pytest.raises(ValueError):
        residual_transfer(sys_, rep)


@pytest.mark.parametrize("seed", range(5))
def test_power_iteration_norm(seed):
    sys_, J = dense_system(seed, 10, 25)
    exact = np.linalg.norm(np.sqrt(sys_.q)[:, None] * J, 2)
    est = whitened_jacobian_norm(sys_, n_iter=50, tol=0.0)
    assert est == pytest.approx(exact, rel=1e-6)
    assert sys_.op.apply_j_count == sys_.op.apply_jt_count == 0


def test_spectral_norm_zero_operator():
    assert spectral_norm_estimate(lambda v: 0 * v, 5) == 0.0
