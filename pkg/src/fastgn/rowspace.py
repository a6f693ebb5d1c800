"""Matrix-free solve of the damped FGN step in the ``b``-dimensional row space.

The batch FGN curvature is ``H = J^T Q J / b`` with one margin-Jacobian row
per example and ``Q = diag(p_star * p_dagger)``; the gradient is
``g = J^T r / b`` with ``r = p_dagger``. The damped step
``(H + lam I) d = -g`` is obtained from the whitened SPD system

    (K + b lam I) u = r_tilde,   K = Jt Jt^T,   Jt = Q^{1/2} J,   r_tilde = Q^{-1/2} r

followed by ``d = -Jt^T u``. Only products with ``J`` (a JVP of the margin
map) and ``J^T`` (a VJP) are needed.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .margin import Q_FLOOR

__all__ = [
    "CGDivergenceError",
    "ResidualBoundError",
    "RowOperator",
    "BatchSystem",
    "SolveReport",
    "adjoint_discrepancy",
    "conjugate_gradient",
    "spectral_norm_estimate",
    "whitened_rhs",
    "apply_whitened_operator",
    "whitened_jacobian_norm",
    "cg_solve",
    "backproject",
    "parameter_residual",
    "residual_transfer",
]


class CGDivergenceError(FloatingPointError):
    pass


class ResidualBoundError(ArithmeticError):
    pass


class RowOperator:
    """Margin Jacobian ``J`` (shape ``(b, d)``) given only through its products.

    ``apply_j`` maps ``R^d -> R^b`` and ``apply_jt`` maps ``R^b -> R^d``; both
    are counted. Products taken for diagnostics (true residuals, norm
    estimates, adjoint probes) go through :attr:`diagnostic`, which shares
    the same functions but keeps its own counters, so the solver budget in
    ``apply_j_count``/``apply_jt_count`` is exact.
    """

    def __init__(self, jvp: Callable, vjp: Callable, b: int, d: int, _counted=True):
        self._jvp = jvp
        self._vjp = vjp
        self.b = int(b)
        self.d = int(d)
        self.apply_j_count = 0
        self.apply_jt_count = 0
        self._diagnostic = None if _counted else self

    @classmethod
    def from_dense(cls, J):
        J = np.asarray(J, dtype=np.float64)
        return cls(lambda v: J @ v, lambda u: J.T @ u, *J.shape)

    @property
    def diagnostic(self):
        if self._diagnostic is None:
            self._diagnostic = RowOperator(self._jvp, self._vjp, self.b, self.d, _counted=False)
        return self._diagnostic

    def apply_j(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.d,):
            raise ValueError(f"apply_j expects a vector of length {self.d}, got shape {v.shape}")
        self.apply_j_count += 1
        return self._jvp(v)

    def apply_jt(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.b,):
            raise ValueError(f"apply_jt expects a vector of length {self.b}, got shape {u.shape}")
        self.apply_jt_count += 1
        return self._vjp(u)

    def reset_counts(self):
        self.apply_j_count = self.apply_jt_count = 0

    def to_dense(self):
        """Materialise ``J`` by probing with unit vectors (small problems only)."""
        diag = self.diagnostic
        return np.column_stack([diag.apply_j(e) for e in np.eye(self.d)])


def adjoint_discrepancy(op: RowOperator, n_probes=100, rng=None):
    """Largest relative mismatch of ``<J v, u>`` and ``<v, J^T u>`` over random probes."""
    rng = np.random.default_rng(rng)
    diag = op.diagnostic
    worst = 0.0
    for _ in range(n_probes):
        v = rng.standard_normal(op.d)
        u = rng.standard_normal(op.b)
        Jv = diag.apply_j(v)
        Jtu = diag.apply_jt(u)
        lhs, rhs = Jv @ u, v @ Jtu
        scale = max(np.linalg.norm(Jv) * np.linalg.norm(u), np.linalg.norm(v) * np.linalg.norm(Jtu))
        if scale > 0:
            worst = max(worst, abs(lhs - rhs) / scale)
    return worst


@dataclass
class BatchSystem:
    """Row-space ingredients for one mini-batch.

    ``q`` holds ``p_star * p_dagger`` and ``r`` holds ``p_dagger`` per example.
    """

    op: RowOperator
    q: np.ndarray
    r: np.ndarray
    damping: float
    n_floored: int = field(init=False, default=0)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.q.shape != (self.op.b,) or self.r.shape != (self.op.b,):
            raise ValueError("q and r must have one entry per operator row")
        if not self.damping > 0:
            raise ValueError(f"damping must be positive, got {self.damping}")
        if np.any(self.q <= 0):
            raise ValueError("q must be strictly positive")
        self.n_floored = int(np.count_nonzero(self.q < Q_FLOOR))
        self._sqrt_q = np.sqrt(np.maximum(self.q, Q_FLOOR))

    @classmethod
    def from_margins(cls, op, margins, damping):
        return cls(op=op, q=margins.q, r=margins.p_dagger, damping=damping)

    @property
    def b(self):
        return self.op.b

    @property
    def sqrt_q(self):
        return self._sqrt_q

    def gradient(self):
        """Exact batch gradient ``J^T r / b`` (one uncounted VJP)."""
        return self.op.diagnostic.apply_jt(self.r) / self.b


@dataclass
class SolveReport:
    u: np.ndarray
    direction: np.ndarray
    row_residual_norm: float
    iterations: int
    param_residual_bound: float
    jtilde_norm: float
    recurred_residual_norm: float
    rhs_norm: float


def conjugate_gradient(matvec, rhs, x0=None, tol=1e-5, max_iter=None, callback=None):
    """Plain CG for an SPD operator.

    Stops when the recurred residual satisfies ``||r_k|| <= tol * ||rhs||`` or
    after ``max_iter`` iterations. Returns ``(x, iterations, ||r_k||)``; one
    extra ``matvec`` is spent on the initial residual when ``x0`` is given.
    ``callback(k, x_k)`` is called after every iteration.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if max_iter is None:
        max_iter = rhs.size
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if x0 is None:
        x = np.zeros_like(rhs)
        res = rhs.copy()
    else:
        x = np.array(x0, dtype=np.float64)
        res = rhs - matvec(x)
    threshold = tol * np.linalg.norm(rhs)
    rr = res @ res
    if np.sqrt(rr) <= threshold:
        return x, 0, float(np.sqrt(rr))
    p = res.copy()
    k = 0
    while k < max_iter:
        Ap = matvec(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0:
            raise CGDivergenceError(f"CG divergence: p^T A p = {pAp!r} at iteration {k}")
        alpha = rr / pAp
        x += alpha * p
        res -= alpha * Ap
        rr_new = res @ res
        k += 1
        if not np.isfinite(rr_new):
            raise CGDivergenceError(f"CG divergence: non-finite residual at iteration {k}")
        if callback is not None:
            callback(k, x)
        if np.sqrt(rr_new) <= threshold:
            rr = rr_new
            break
        p *= rr_new / rr
        p += res
        rr = rr_new
    return x, k, float(np.sqrt(rr))


def spectral_norm_estimate(gram_matvec, dim, n_iter=30, tol=1e-6, rng=0):
    """``sqrt(lambda_max)`` of a PSD operator by power iteration.

    Iteration stops early once the eigenvalue estimate changes by less than
    ``tol`` relatively (``tol=0`` runs all ``n_iter`` steps). The result is an
    estimate from below, not a certified bound.
    """
    rng = np.random.default_rng(rng)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = gram_matvec(v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if tol > 0 and abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def whitened_rhs(system: BatchSystem):
    """``r_tilde_i = r_i / sqrt(q_i)``, i.e. ``sqrt(p_dagger / p_star)``."""
    return system.r / system.sqrt_q


def apply_whitened_operator(system: BatchSystem, v, op=None):
    """``(K + b lam I) v`` with one VJP and one JVP."""
    op = system.op if op is None else op
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (system.b,):
        raise ValueError(f"expected a vector of length {system.b}, got shape {v.shape}")
    a = system.sqrt_q * v
    beta = op.apply_jt(a)
    gamma = op.apply_j(beta)
    return system.sqrt_q * gamma + system.b * system.damping * v


def backproject(system: BatchSystem, u):
    """``d = -J^T Q^{1/2} u`` (one VJP)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (system.b,):
        raise ValueError(f"expected a vector of length {system.b}, got shape {u.shape}")
    return -system.op.apply_jt(system.sqrt_q * u)


def whitened_jacobian_norm(system: BatchSystem, n_iter=30, tol=1e-6, rng=0):
    """Power-iteration estimate of ``||Q^{1/2} J||`` through uncounted products."""
    diag = system.op.diagnostic
    sq = system.sqrt_q

    def gram(v):
        return sq * diag.apply_j(diag.apply_jt(sq * v))

    return spectral_norm_estimate(gram, system.b, n_iter=n_iter, tol=tol, rng=rng)


def cg_solve(system: BatchSystem, tol=1e-5, max_iter=None, jtilde_norm=None,
             estimate_norm=True, callback=None):
    """Solve the whitened row system from zero and backproject.

    The solver itself costs ``iterations`` JVPs and ``iterations + 1`` VJPs on
    ``system.op``. The reported row residual ``||B u - r_tilde||`` is recomputed
    from the backprojected direction with one extra (diagnostic) JVP. When
    ``jtilde_norm`` is not supplied and ``estimate_norm`` is set, it is
    estimated by power iteration; otherwise the parameter-space bound is NaN.
    """
    rhs = whitened_rhs(system)
    if max_iter is None:
        max_iter = system.b
    u, iters, recurred = conjugate_gradient(
        lambda v: apply_whitened_operator(system, v), rhs, tol=tol, max_iter=max_iter,
        callback=callback,
    )
    direction = backproject(system, u)
    # B u = Q^{1/2} J (J^T Q^{1/2} u) + b lam u, and J^T Q^{1/2} u = -direction
    Bu = system.sqrt_q * system.op.diagnostic.apply_j(-direction) + system.b * system.damping * u
    row_res = float(np.linalg.norm(Bu - rhs))
    if jtilde_norm is None and estimate_norm:
        jtilde_norm = whitened_jacobian_norm(system)
    bound = float(jtilde_norm) * row_res / system.b if jtilde_norm is not None else float("nan")
    return SolveReport(
        u=u,
        direction=direction,
        row_residual_norm=row_res,
        iterations=iters,
        param_residual_bound=bound,
        jtilde_norm=float("nan") if jtilde_norm is None else float(jtilde_norm),
        recurred_residual_norm=recurred,
        rhs_norm=float(np.linalg.norm(rhs)),
    )


def parameter_residual(system: BatchSystem, direction):
    """``(H + lam I) d + g`` evaluated with one uncounted JVP and VJP."""
    diag = system.op.diagnostic
    Jd = diag.apply_j(direction)
    return diag.apply_jt(system.q * Jd + system.r) / system.b + system.damping * direction


def residual_transfer(system: BatchSystem, report: SolveReport):
    """Actual parameter-space residual norm, checked against the row-space bound.

    Raises :class:`ResidualBoundError` if ``||(H + lam I) d + g||`` exceeds
    ``||Jt|| ||e|| / b`` by more than a relative 1e-8 (plus a roundoff
    allowance of 1e-12 ||g||), which points to an inconsistent adjoint.
    """
    actual = float(np.linalg.norm(parameter_residual(system, report.direction)))
    bound = report.param_residual_bound
    if np.isnan(bound):
        raise ValueError("report carries no parameter-space bound; solve with a norm estimate")
    slack = 1e-12 * float(np.linalg.norm(system.gradient()))
    if actual > bound * (1 + 1e-8) + slack:
        raise ResidualBoundError(
            f"parameter residual {actual:.3e} exceeds row-space bound {bound:.3e}"
        )
    return actual
