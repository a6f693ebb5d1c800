"""True-vs-rest margin form of softmax cross-entropy.

For logits ``z`` with true class ``k`` the loss is written as
``softplus(s)`` with the scalar margin ``s = logsumexp(z[j != k]) - z[k]``.
Loss and gradient are identical to the usual softmax cross-entropy; the
per-example quantities computed here (``p_star``, ``p_dagger``, ``rho``,
``q``, ``xi``) feed the curvature code in :mod:`fastgn.oracle` and the
row-space solver.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "MarginStats",
    "BatchMargins",
    "logsumexp",
    "softplus",
    "margin_stats",
    "loss",
    "softmax",
    "logit_gradient",
    "scalar_link_derivatives",
    "batch_margins",
]

# only used where a reciprocal square root of q is taken
Q_FLOOR = 1e-300


@dataclass(frozen=True)
class MarginStats:
    """Per-example margin quantities.

    ``rho`` is the softmax restricted to the competitor classes, in the
    original class order with the true class removed.
    """

    true_class: int
    z_star: float
    z_dagger: float
    s: float
    p_star: float
    p_dagger: float
    rho: np.ndarray
    q: float
    xi: float

    @property
    def n_classes(self):
        return self.rho.size + 1


def logsumexp(values):
    """``log(sum(exp(values)))`` with the max-shift trick."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty reduction")
    m = values.max()
    if values.size == 1:
        return float(m)
    return float(m + np.log(np.exp(values - m).sum()))


def softplus(s):
    """Stable ``log(1 + exp(s))`` (scalar or array)."""
    s = np.asarray(s, dtype=np.float64)
    out = np.where(s > 0, s + np.log1p(np.exp(-np.abs(s))), np.log1p(np.exp(np.minimum(s, 0.0))))
    return float(out) if out.ndim == 0 else out


def _check_logits(logits, true_class):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"logits must be a vector, got shape {z.shape}")
    if z.size < 2:
        raise ValueError(f"need at least 2 classes, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    k = int(true_class)
    if not 0 <= k < z.size:
        raise ValueError(f"true_class {k} out of range for {z.size} classes")
    return z, k


def _link_curvature(s):
    # p_star * p_dagger written as 1 / (4 cosh^2(s / 2)): never rounds above 1/4
    with np.errstate(over="ignore"):
        return 0.25 / np.cosh(0.5 * np.asarray(s, dtype=np.float64)) ** 2


def margin_stats(logits, true_class):
    z, k = _check_logits(logits, true_class)
    comp = np.delete(z, k)
    m = comp.max()
    e = np.exp(comp - m)
    total = e.sum()
    z_dagger = float(m + np.log(total))
    rho = e / total
    s = z_dagger - z[k]
    p_star = float(expit(-s))
    p_dagger = float(expit(s))
    return MarginStats(
        true_class=k,
        z_star=float(z[k]),
        z_dagger=z_dagger,
        s=float(s),
        p_star=p_star,
        p_dagger=p_dagger,
        rho=rho,
        q=float(_link_curvature(s)),
        xi=float(1.0 - rho @ rho),
    )


def loss(logits, true_class):
    """Cross-entropy of one example, computed as ``softplus(s)``."""
    return softplus(margin_stats(logits, true_class).s)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logit_gradient(logits, true_class, check=True):
    """``p - y`` in the original class order.

    With ``check`` the margin form ``p_dagger * [-1 at k, rho elsewhere]``
    is evaluated as well and must agree to 1e-12 componentwise.
    """
    z, k = _check_logits(logits, true_class)
    grad = softmax(z)
    grad[k] -= 1.0
    if check:
        st = margin_stats(z, k)
        alt = st.p_dagger * np.insert(st.rho, k, -1.0)
        err = np.max(np.abs(alt - grad))
        if err > 1e-12:
            raise FloatingPointError(f"margin-form gradient disagrees with p - y by {err:.3e}")
    return grad


def scalar_link_derivatives(s):
    """First and second derivative of softplus at ``s``: ``(p_dagger, p_star * p_dagger)``."""
    phi1 = float(expit(s))
    return phi1, phi1 * float(expit(-s))


@dataclass
class BatchMargins:
    """Vectorised :class:`MarginStats` for a batch of logit rows.

    ``rho`` is stored at full width ``(b, C)`` with zeros in the true-class
    column, so ``margin_rows`` is ``rho`` with ``-1`` written there.
    """

    labels: np.ndarray
    probs: np.ndarray
    z_dagger: np.ndarray
    s: np.ndarray
    p_star: np.ndarray
    p_dagger: np.ndarray
    rho: np.ndarray
    q: np.ndarray
    xi: np.ndarray

    @property
    def batch_size(self):
        return self.labels.size

    def losses(self):
        return softplus(self.s)

    def margin_rows(self):
        """Logit-space margin gradients ``a_i``, shape ``(b, C)``."""
        a = self.rho.copy()
        a[np.arange(a.shape[0]), self.labels] = -1.0
        return a

    def logit_residuals(self):
        """``p - y`` per row."""
        g = self.probs.copy()
        g[np.arange(g.shape[0]), self.labels] -= 1.0
        return g

    def stats(self, i):
        k = int(self.labels[i])
        return MarginStats(
            true_class=k,
            z_star=float(self.z_dagger[i] - self.s[i]),
            z_dagger=float(self.z_dagger[i]),
            s=float(self.s[i]),
            p_star=float(self.p_star[i]),
            p_dagger=float(self.p_dagger[i]),
            rho=np.delete(self.rho[i], k),
            q=float(self.q[i]),
            xi=float(self.xi[i]),
        )


def batch_margins(logits, labels):
    """Margin statistics for every row of a ``(b, C)`` logit matrix."""
    Z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise ValueError(f"logits must have shape (b, C>=2), got {Z.shape}")
    if labels.shape != (Z.shape[0],):
        raise ValueError("labels must have one entry per logit row")
    if labels.size and (labels.min() < 0 or labels.max() >= Z.shape[1]):
        raise ValueError("labels out of range")
    if not np.all(np.isfinite(Z)):
        raise ValueError("logits must be finite")
    rows = np.arange(Z.shape[0])
    z_star = Z[rows, labels]

    comp = Z.copy()
    comp[rows, labels] = -np.inf
    m = comp.max(axis=1)
    rho = np.exp(comp - m[:, None])
    total = rho.sum(axis=1)
    rho /= total[:, None]
    z_dagger = m + np.log(total)
    s = z_dagger - z_star

    p_star = expit(-s)
    p_dagger = expit(s)
    # full softmax recovered from the margin pieces: p_j = p_dagger * rho_j
    probs = rho * p_dagger[:, None]
    probs[rows, labels] = p_star
    return BatchMargins(
        labels=labels,
        probs=probs,
        z_dagger=z_dagger,
        s=s,
        p_star=p_star,
        p_dagger=p_dagger,
        rho=rho,
        q=_link_curvature(s),
        xi=1.0 - np.einsum("ij,ij->i", rho, rho),
    )
