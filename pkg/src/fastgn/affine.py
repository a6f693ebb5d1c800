"""Affine softmax head ``z_i = W^T h_i + bias`` on frozen features.

Parameters are stored as one flat vector ``[W.ravel(), bias]`` with ``W`` of
shape ``(d_f, C)`` in row-major order, so ``W[k, c]`` sits at ``k * C + c``.
Because the logits are affine in the parameters, the softmax GGN of this head
is its exact Hessian.
"""

from dataclasses import dataclass

import numpy as np

from .margin import BatchMargins, batch_margins, softplus
from .rowspace import BatchSystem, RowOperator

__all__ = [
    "FeatureBatch",
    "HeadParams",
    "standardize",
    "affine_logits",
    "head_margins",
    "head_loss",
    "head_gradient",
    "accuracy",
    "margin_row",
    "gram_unwhitened",
    "gram_whitened",
    "affine_row_operator",
    "affine_system",
    "logit_jacobian",
    "margin_jacobian_dense",
    "ggn_matvec",
]


@dataclass
class FeatureBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("need exactly one label per feature row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self):
        return self.labels.size

    @property
    def n_features(self):
        return self.features.shape[1]

    def take(self, idx):
        return FeatureBatch(self.features[idx], self.labels[idx])


class HeadParams:
    """Weights ``W`` (``d_f x C``) and ``bias`` (``C``) as views of one flat vector."""

    def __init__(self, vector, n_features, n_classes):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (n_features * n_classes + n_classes,):
            raise ValueError(
                f"expected {n_features * n_classes + n_classes} parameters, got shape {vector.shape}"
            )
        self.vector = vector
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)

    @classmethod
    def from_arrays(cls, W, bias):
        W = np.asarray(W, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if W.ndim != 2 or bias.shape != (W.shape[1],):
            raise ValueError("W must be (d_f, C) and bias (C,)")
        return cls(np.concatenate([W.ravel(), bias]), *W.shape)

    @classmethod
    def zeros(cls, n_features, n_classes):
        return cls(np.zeros(n_features * n_classes + n_classes), n_features, n_classes)

    @classmethod
    def random(cls, n_features, n_classes, rng=None, scale=0.01):
        rng = np.random.default_rng(rng)
        W = scale * rng.standard_normal((n_features, n_classes))
        return cls.from_arrays(W, np.zeros(n_classes))

    @property
    def W(self):
        return self.vector[: self.n_features * self.n_classes].reshape(self.n_features, self.n_classes)

    @property
    def bias(self):
        return self.vector[self.n_features * self.n_classes:]

    @property
    def size(self):
        return self.vector.size

    def with_vector(self, vector):
        return HeadParams(vector, self.n_features, self.n_classes)

    def split(self, v):
        """View a parameter-shaped vector as ``(V, v_bias)``."""
        n = self.n_features * self.n_classes
        return v[:n].reshape(self.n_features, self.n_classes), v[n:]

    def join(self, V, v_bias):
        return np.concatenate([np.ravel(V), v_bias])

    def backproject(self, X, M):
        """``join(X^T M, sum_i M_i)`` written straight into one flat vector."""
        out = np.empty(self.size)
        V, vb = self.split(out)
        np.matmul(X.T, M, out=V)
        np.sum(M, axis=0, out=vb)
        return out


def standardize(train, *others):
    """Standardise feature matrices coordinatewise with the statistics of ``train``.

    Constant coordinates keep unit scale.
    """
    train = np.asarray(train, dtype=np.float64)
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0] = 1.0
    out = [(train - mean) / std] + [(np.asarray(x, dtype=np.float64) - mean) / std for x in others]
    return out[0] if not others else tuple(out)


def _check(params, batch):
    if batch.features.shape[1] != params.n_features:
        raise ValueError(
            f"features have {batch.features.shape[1]} columns, head expects {params.n_features}"
        )
    if len(batch) and batch.labels.max() >= params.n_classes:
        raise ValueError("labels exceed the number of head classes")


def affine_logits(params: HeadParams, batch: FeatureBatch):
    _check(params, batch)
    return batch.features @ params.W + params.bias


def head_margins(params, batch) -> BatchMargins:
    return batch_margins(affine_logits(params, batch), batch.labels)


def head_loss(params, batch):
    """Mean cross-entropy of the head on ``batch``."""
    return float(np.mean(softplus(head_margins(params, batch).s)))


def head_gradient(params, batch, margins=None):
    """Softmax gradient ``mean_i Jz_i^T (p_i - y_i)`` as a flat vector."""
    if margins is None:
        margins = head_margins(params, batch)
    G = margins.logit_residuals() / len(batch)
    return params.backproject(batch.features, G)


def accuracy(params, batch):
    return float(np.mean(np.argmax(affine_logits(params, batch), axis=1) == batch.labels))


def margin_row(stats, true_class, n_classes):
    """Logit-space margin gradient: ``-1`` at the true class, ``rho`` elsewhere."""
    if int(true_class) != stats.true_class or stats.n_classes != n_classes:
        raise ValueError("statistics do not match the requested class layout")
    return np.insert(stats.rho, stats.true_class, -1.0)


def gram_unwhitened(features, rows):
    """``G_ij = (h_i^T h_j + 1)(a_i^T a_j)``; the ``+1`` is the bias column."""
    features = np.asarray(features, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    if features.shape[0] != rows.shape[0]:
        raise ValueError("features and margin rows disagree on the batch size")
    G = features @ features.T
    G += 1.0
    G *= rows @ rows.T
    return G


def gram_whitened(G, q):
    """``K_ij = sqrt(q_i q_j) G_ij``."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("q must be strictly positive")
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (q.size, q.size):
        raise ValueError("G must be b x b with b = len(q)")
    sq = np.sqrt(q)
    return sq[:, None] * G * sq[None, :]


def affine_row_operator(params, batch, margins=None):
    """Margin Jacobian of the head as a :class:`RowOperator`.

    Row ``i`` contracts a parameter direction ``(V, v_bias)`` as
    ``a_i^T (V^T h_i + v_bias)``; the adjoint spreads ``u_i a_i`` back through
    the features.
    """
    _check(params, batch)
    if margins is None:
        margins = head_margins(params, batch)
    A = margins.margin_rows()
    X = batch.features

    def jvp(v):
        V, vb = params.split(v)
        U = X @ V
        U += vb
        return np.einsum("ij,ij->i", U, A)

    def vjp(u):
        M = u[:, None] * A
        return params.backproject(X, M)

    return RowOperator(jvp, vjp, len(batch), params.size)


def affine_system(params, batch, damping, margins=None):
    """:class:`BatchSystem` for the head at ``params`` plus the margins it used."""
    if margins is None:
        margins = head_margins(params, batch)
    op = affine_row_operator(params, batch, margins)
    return BatchSystem.from_margins(op, margins, damping), margins


def logit_jacobian(h, n_classes):
    """Dense ``(C, d)`` Jacobian of ``z = W^T h + bias`` for one feature vector."""
    h = np.asarray(h, dtype=np.float64)
    d_f = h.size
    J = np.zeros((n_classes, d_f * n_classes + n_classes))
    for c in range(n_classes):
        J[c, c: d_f * n_classes: n_classes] = h
        J[c, d_f * n_classes + c] = 1.0
    return J


def margin_jacobian_dense(params, batch, margins=None):
    """Dense ``(b, d)`` margin Jacobian, row ``i`` equal to ``a_i^T Jz_i``."""
    if margins is None:
        margins = head_margins(params, batch)
    A = margins.margin_rows()
    return np.vstack([A[i] @ logit_jacobian(h, params.n_classes) for i, h in enumerate(batch.features)])


def ggn_matvec(params, batch, margins=None):
    """Batch-averaged softmax GGN product ``v -> mean_i Jz_i^T (diag(p_i) - p_i p_i^T) Jz_i v``."""
    if margins is None:
        margins = head_margins(params, batch)
    P = margins.probs
    X = batch.features
    b = len(batch)

    def matvec(v):
        V, vb = params.split(v)
        U = X @ V
        U += vb
        PU = P * U
        S = PU - P * PU.sum(axis=1, keepdims=True)
        S /= b
        return params.join(X.T @ S, S.sum(axis=0))

    return matvec
