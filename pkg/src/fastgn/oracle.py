"""Dense reference curvature for a single example.

Everything here builds explicit matrices and is meant for validation on
small problems only (``d * C <= 4096``). The hot path never calls it.

``Jz`` is always the ``(C, d)`` logit Jacobian in the original class order.
"""

from dataclasses import dataclass

import numpy as np

from .margin import MarginStats

__all__ = [
    "MAX_ORACLE_SIZE",
    "TraceTriple",
    "softmax_covariance",
    "ggn_dense",
    "margin_jacobian_row",
    "fgn_dense",
    "decomposition_residual",
    "competitor_gap_covariance_form",
    "logit_space_blocks",
    "trace_decomposition",
    "finite_difference_hessian",
    "min_eigenvalue",
]

MAX_ORACLE_SIZE = 4096


@dataclass(frozen=True)
class TraceTriple:
    tau_ret: float
    tau_drop: float
    tau_full: float


def _check_jacobian(Jz, n_classes):
    Jz = np.asarray(Jz, dtype=np.float64)
    if Jz.ndim != 2:
        raise ValueError(f"Jz must be 2-d, got shape {Jz.shape}")
    if Jz.shape[0] != n_classes:
        raise ValueError(f"Jz has {Jz.shape[0]} rows, expected {n_classes}")
    if Jz.size > MAX_ORACLE_SIZE:
        raise ValueError(f"dense oracle limited to d*C <= {MAX_ORACLE_SIZE}, got {Jz.size}")
    return Jz


def softmax_covariance(p):
    """``diag(p) - p p^T``.

    The diagonal is formed as ``p_i * sum_{j != i} p_j`` so that it keeps full
    relative accuracy when one probability is close to 1.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("p must be a nonempty vector")
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in (0, 1)")
    if abs(p.sum() - 1.0) > 1e-10:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    S = -np.outer(p, p)
    others = np.array([np.delete(p, i).sum() for i in range(p.size)])
    S[np.diag_indices(p.size)] = p * others
    return S


def ggn_dense(Jz, p):
    """Full softmax GGN ``Jz^T (diag(p) - p p^T) Jz``."""
    p = np.asarray(p, dtype=np.float64)
    Jz = _check_jacobian(Jz, p.size)
    H = Jz.T @ softmax_covariance(p) @ Jz
    return 0.5 * (H + H.T)


def _split(Jz, stats: MarginStats, true_class):
    if int(true_class) != stats.true_class:
        raise ValueError("true_class does not match the margin statistics")
    Jz = _check_jacobian(Jz, stats.n_classes)
    return Jz[true_class], np.delete(Jz, true_class, axis=0)


def margin_jacobian_row(Jz, stats, true_class):
    """``J_s = -J_star + rho^T J_comp``."""
    J_star, J_comp = _split(Jz, stats, true_class)
    return -J_star + stats.rho @ J_comp


def fgn_dense(Jz, stats, true_class):
    """Retained true-vs-rest curvature ``p_star p_dagger J_s^T J_s`` (rank one)."""
    js = margin_jacobian_row(Jz, stats, true_class)
    return stats.q * np.outer(js, js)


def decomposition_residual(Jz, stats, true_class):
    """Dropped competitor covariance ``p_dagger J_comp^T (diag(rho) - rho rho^T) J_comp``."""
    _, J_comp = _split(Jz, stats, true_class)
    rho = stats.rho
    cov = np.diag(rho) - np.outer(rho, rho)
    R = stats.p_dagger * (J_comp.T @ cov @ J_comp)
    return 0.5 * (R + R.T)


def competitor_gap_covariance_form(Jz, stats, true_class):
    """The same residual written as a rho-weighted covariance of competitor rows."""
    _, J_comp = _split(Jz, stats, true_class)
    centered = J_comp - stats.rho @ J_comp
    return stats.p_dagger * (centered.T * stats.rho) @ centered


def logit_space_blocks(stats):
    """Retained and dropped ``C x C`` logit-space blocks in the original class order.

    Their sum is the softmax covariance.
    """
    k = stats.true_class
    grad_s = np.insert(stats.rho, k, -1.0)
    kept = stats.q * np.outer(grad_s, grad_s)
    rho_full = np.insert(stats.rho, k, 0.0)
    dropped = stats.p_dagger * (np.diag(rho_full) - np.outer(rho_full, rho_full))
    return kept, dropped


def trace_decomposition(p_star, xi):
    """Closed-form traces of the retained, dropped and full logit-space curvature."""
    if not 0.0 < p_star < 1.0:
        raise ValueError(f"p_star must lie in (0, 1), got {p_star}")
    if not 0.0 <= xi < 1.0:
        raise ValueError(f"xi must lie in [0, 1), got {xi}")
    p_dagger = 1.0 - p_star
    return TraceTriple(
        tau_ret=p_star * p_dagger * (2.0 - xi),
        tau_drop=p_dagger * xi,
        tau_full=2.0 * p_star * p_dagger + p_dagger**2 * xi,
    )


def finite_difference_hessian(loss_fn, w, h=1e-4):
    """Symmetrised central-difference Hessian of a scalar function.

    Uses the four-point stencil for mixed partials, ``O(d^2)`` evaluations.
    """
    w = np.asarray(w, dtype=np.float64)
    d = w.size
    H = np.empty((d, d))
    f0 = loss_fn(w)
    E = np.eye(d) * h
    for i in range(d):
        H[i, i] = (loss_fn(w + E[i]) - 2.0 * f0 + loss_fn(w - E[i])) / h**2
        for j in range(i):
            H[i, j] = (
                loss_fn(w + E[i] + E[j])
                - loss_fn(w + E[i] - E[j])
                - loss_fn(w - E[i] + E[j])
                + loss_fn(w - E[i] - E[j])
            ) / (4.0 * h**2)
            H[j, i] = H[i, j]
    return H


def min_eigenvalue(A):
    A = np.asarray(A, dtype=np.float64)
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
