"""Invariant suites run by ``fastgn verify``.

Each suite draws seeded random instances, compares fast code against a
dense or finite-difference reference and returns a :class:`CheckResult`
carrying the worst error seen and the tolerance it was held to.
"""

from dataclasses import dataclass

import numpy as np

from . import affine
from .affine import FeatureBatch, HeadParams, gram_unwhitened, gram_whitened, head_loss, head_margins
from .margin import logit_gradient, loss, margin_stats, softmax
from .oracle import (
    decomposition_residual,
    fgn_dense,
    finite_difference_hessian,
    ggn_dense,
    min_eigenvalue,
)
from .rowspace import BatchSystem, adjoint_discrepancy, cg_solve, parameter_residual
from .experiments import trace_sweep

__all__ = [
    "CheckResult",
    "DEFAULT_TOLERANCES",
    "random_head",
    "random_logits",
    "check_decomposition",
    "check_loewner",
    "check_binary_equality",
    "check_loss_gradient",
    "check_gradient_fd",
    "check_adjoint",
    "check_row_parameter_equivalence",
    "check_residual_transfer",
    "check_affine_hessian",
    "check_gram",
    "check_trace_sum",
    "run_all",
]

DEFAULT_TOLERANCES = {
    "decomposition": 1e-10,
    "loewner": 1e-10,
    "binary_equality": 1e-12,
    "loss_gradient": 1e-12,
    "gradient_fd": 1e-6,
    "adjoint": 1e-12,
    "row_parameter": 1e-8,
    "residual_transfer": 1e-8,
    "affine_hessian": 1e-5,
    "gram": 1e-10,
    "trace_sum": 1e-12,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tol: float
    n_cases: int

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<20s} worst={self.worst:.3e}  tol={self.tol:.1e}  cases={self.n_cases}"


def _result(name, worst, tol, n, passed=None):
    worst = float(worst)
    if passed is None:
        passed = bool(np.isfinite(worst) and worst <= tol)
    return CheckResult(name, passed, worst, tol, n)


def random_logits(rng, n_classes, scale=3.0):
    return scale * rng.standard_normal(n_classes)


def random_head(rng, n_features, n_classes, batch_size, scale=1.0):
    """Random affine head and batch with logits of moderate size."""
    params = HeadParams.random(n_features, n_classes, rng, scale=scale)
    params.vector[-n_classes:] = rng.standard_normal(n_classes)
    batch = FeatureBatch(rng.standard_normal((batch_size, n_features)),
                         rng.integers(0, n_classes, batch_size))
    return params, batch


def check_decomposition(n=1000, tol=DEFAULT_TOLERANCES["decomposition"], seed=0):
    """``||H_ggn - H_fgn - R||_F / (1 + ||H_ggn||_F)`` for random ``C``, ``d``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        C = int(rng.integers(2, 17))
        d = int(rng.integers(1, 9))
        k = int(rng.integers(C))
        z = random_logits(rng, C)
        Jz = rng.standard_normal((C, d))
        st = margin_stats(z, k)
        H = ggn_dense(Jz, softmax(z))
        gap = H - fgn_dense(Jz, st, k) - decomposition_residual(Jz, st, k)
        worst = max(worst, np.linalg.norm(gap) / (1.0 + np.linalg.norm(H)))
    return _result("decomposition", worst, tol, n)


def check_loewner(n=500, tol=DEFAULT_TOLERANCES["loewner"], seed=1):
    """Most negative eigenvalue of ``H_ggn - H_fgn`` and of ``H_fgn``, relative to the trace."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        C = int(rng.integers(2, 17))
        d = int(rng.integers(1, 9))
        k = int(rng.integers(C))
        z = random_logits(rng, C)
        Jz = rng.standard_normal((C, d))
        st = margin_stats(z, k)
        H = ggn_dense(Jz, softmax(z))
        F = fgn_dense(Jz, st, k)
        scale = max(np.trace(H), np.finfo(float).tiny)
        worst = max(worst, -min_eigenvalue(H - F) / scale, -min_eigenvalue(F) / scale)
    return _result("loewner", worst, tol, n)


def check_binary_equality(n=300, tol=DEFAULT_TOLERANCES["binary_equality"], seed=2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 9))
        k = int(rng.integers(2))
        z = random_logits(rng, 2)
        Jz = rng.standard_normal((2, d))
        H = ggn_dense(Jz, softmax(z))
        F = fgn_dense(Jz, margin_stats(z, k), k)
        worst = max(worst, np.linalg.norm(H - F) / max(np.linalg.norm(H), np.finfo(float).tiny))
    return _result("binary_equality", worst, tol, n)


def check_loss_gradient(n=1000, tol=DEFAULT_TOLERANCES["loss_gradient"], seed=3):
    """Margin-form loss and gradient against a direct softmax evaluation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        C = int(rng.integers(2, 33))
        k = int(rng.integers(C))
        z = random_logits(rng, C, scale=float(rng.uniform(0.1, 10.0)))
        m = z.max()
        direct_loss = m + np.log(np.sum(np.exp(z - m))) - z[k]
        p = np.exp(z - m)
        p /= p.sum()
        y = np.zeros(C)
        y[k] = 1.0
        worst = max(
            worst,
            abs(loss(z, k) - direct_loss) / max(1.0, abs(direct_loss)),
            np.max(np.abs(logit_gradient(z, k) - (p - y))),
        )
    return _result("loss_gradient", worst, tol, n)


def check_gradient_fd(n=200, tol=DEFAULT_TOLERANCES["gradient_fd"], seed=4, h=1e-5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        C = int(rng.integers(2, 17))
        k = int(rng.integers(C))
        z = random_logits(rng, C)
        g = logit_gradient(z, k)
        E = np.eye(C) * h
        fd = np.array([(loss(z + E[c], k) - loss(z - E[c], k)) / (2 * h) for c in range(C)])
        worst = max(worst, np.max(np.abs(fd - g)))
    return _result("gradient_fd", worst, tol, n)


def check_adjoint(n=50, tol=DEFAULT_TOLERANCES["adjoint"], seed=5):
    """``<J v, u> = <v, J^T u>`` for the affine margin operator."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        params, batch = random_head(rng, int(rng.integers(1, 9)), int(rng.integers(2, 9)),
                                    int(rng.integers(1, 17)))
        op = affine.affine_row_operator(params, batch)
        worst = max(worst, adjoint_discrepancy(op, n_probes=20, rng=rng))
    return _result("adjoint", worst, tol, n)


def _dense_fgn_system(params, batch, damping):
    m = head_margins(params, batch)
    J = affine.margin_jacobian_dense(params, batch, m)
    b = len(batch)
    H = (J.T * m.q) @ J / b
    g = J.T @ m.p_dagger / b
    return J, H, g, m


def check_row_parameter_equivalence(n=200, tol=DEFAULT_TOLERANCES["row_parameter"], seed=6):
    """Tight-CG backprojected direction against a dense damped parameter-space solve."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        params, batch = random_head(rng, int(rng.integers(1, 6)), int(rng.integers(2, 7)),
                                    int(rng.integers(1, 13)))
        damping = float(10 ** rng.uniform(-2, 1))
        _, H, g, m = _dense_fgn_system(params, batch, damping)
        d_dense = -np.linalg.solve(H + damping * np.eye(H.shape[0]), g)
        system = BatchSystem.from_margins(affine.affine_row_operator(params, batch, m), m, damping)
        rep = cg_solve(system, tol=1e-15, max_iter=10 * len(batch), estimate_norm=False)
        err = np.linalg.norm(rep.direction - d_dense) / max(np.linalg.norm(d_dense), np.finfo(float).tiny)
        worst = max(worst, err)
    return _result("row_parameter", worst, tol, n)


def check_residual_transfer(n=100, tol=DEFAULT_TOLERANCES["residual_transfer"], seed=7,
                            budgets=(1, 2, 5)):
    """Worst ``actual / bound - 1`` for truncated CG, with ``||J_tilde||`` from a dense SVD.

    Passes when every actual parameter residual is at most ``bound * (1 + tol)``.
    Instances have at least as many parameters as rows, so ``K`` has full rank
    and a budget below ``b`` genuinely truncates the solve instead of reaching
    roundoff level, where both sides are rounding noise.
    """
    rng = np.random.default_rng(seed)
    worst = -np.inf
    cases = 0
    for _ in range(n):
        params, batch = random_head(rng, int(rng.integers(3, 7)), int(rng.integers(3, 7)),
                                    int(rng.integers(8, 17)))
        damping = float(10 ** rng.uniform(-2, 0))
        J, _, _, m = _dense_fgn_system(params, batch, damping)
        jt_norm = np.linalg.norm(np.sqrt(m.q)[:, None] * J, 2)
        for k in budgets:
            system = BatchSystem.from_margins(affine.affine_row_operator(params, batch, m), m, damping)
            rep = cg_solve(system, tol=1e-300, max_iter=k, jtilde_norm=jt_norm)
            actual = np.linalg.norm(parameter_residual(system, rep.direction))
            worst = max(worst, actual / rep.param_residual_bound - 1.0)
            cases += 1
    return _result("residual_transfer", worst, tol, cases)


def check_affine_hessian(n=20, tol=DEFAULT_TOLERANCES["affine_hessian"], seed=8):
    """Dense head GGN against the finite-difference Hessian of the batch loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d_f, C = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        params, batch = random_head(rng, d_f, C, int(rng.integers(1, 7)))
        m = head_margins(params, batch)
        H = np.mean([ggn_dense(affine.logit_jacobian(h, C), m.probs[i])
                     for i, h in enumerate(batch.features)], axis=0)
        fd = finite_difference_hessian(lambda w: head_loss(params.with_vector(w), batch), params.vector)
        worst = max(worst, np.linalg.norm(fd - H) / max(np.linalg.norm(H), np.finfo(float).tiny))
    return _result("affine_hessian", worst, tol, n)


def check_gram(n=100, tol=DEFAULT_TOLERANCES["gram"], seed=9):
    """Closed-form whitened Gram against the operator-built ``J_tilde J_tilde^T``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        params, batch = random_head(rng, int(rng.integers(1, 7)), int(rng.integers(2, 6)),
                                    int(rng.integers(1, 17)))
        m = head_margins(params, batch)
        K = gram_whitened(gram_unwhitened(batch.features, m.margin_rows()), m.q)
        Jt = np.sqrt(m.q)[:, None] * affine.affine_row_operator(params, batch, m).to_dense()
        ref = Jt @ Jt.T
        worst = max(worst, np.linalg.norm(K - ref) / max(np.linalg.norm(ref), np.finfo(float).tiny))
    return _result("gram", worst, tol, n)


def check_trace_sum(tol=DEFAULT_TOLERANCES["trace_sum"]):
    recs = trace_sweep()
    worst = max(abs(r.get("tau_ret") + r.get("tau_drop") - r.get("tau_full")) for r in recs)
    return _result("trace_sum", worst, tol, len(recs))


SUITES = {
    "decomposition": check_decomposition,
    "loewner": check_loewner,
    "binary_equality": check_binary_equality,
    "loss_gradient": check_loss_gradient,
    "gradient_fd": check_gradient_fd,
    "adjoint": check_adjoint,
    "row_parameter": check_row_parameter_equivalence,
    "residual_transfer": check_residual_transfer,
    "affine_hessian": check_affine_hessian,
    "gram": check_gram,
    "trace_sum": check_trace_sum,
}


def run_all(tolerances=None, only=None):
    """Run every suite (or those in ``only``) with optional tolerance overrides."""
    tolerances = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    unknown = set(tolerances) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites in tolerance overrides: {sorted(unknown)}")
    names = list(SUITES) if only is None else list(only)
    return [SUITES[name](tol=tolerances[name]) for name in names]
