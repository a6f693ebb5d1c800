"""Training steps for the affine head: FGN, SGN and Adam, plus the training loop.

FGN solves the damped true-vs-rest system in row space (closed-form Gram
for small batches, matrix-free margin products otherwise). SGN solves the
damped full softmax GGN system in parameter space by warm-started CG.
"""

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np

from .affine import (
    FeatureBatch,
    HeadParams,
    accuracy,
    affine_row_operator,
    affine_system,
    ggn_matvec,
    gram_unwhitened,
    head_gradient,
    head_loss,
    head_margins,
)
from .margin import Q_FLOOR
from .rowspace import (
    SolveReport,
    cg_solve,
    conjugate_gradient,
    spectral_norm_estimate,
)

__all__ = [
    "METHODS",
    "OptimizerConfig",
    "OpCounts",
    "StepResult",
    "SGNState",
    "AdamState",
    "fgn_step",
    "sgn_step",
    "adam_step",
    "static_batches",
    "LogRecord",
    "TrainingLog",
    "train",
    "fgn_gram_matvec_flops",
    "fgn_operator_matvec_flops",
    "sgn_ggn_matvec_flops",
]

METHODS = ("fgn", "sgn", "adam")

_DEFAULT_LR = {"fgn": 0.1, "sgn": 0.1, "adam": 3e-4}


@dataclass(frozen=True)
class OptimizerConfig:
    """Step hyperparameters.

    ``gram_threshold`` is the largest batch for which FGN assembles the
    closed-form ``b x b`` Gram; above it the generic margin operator is used.
    ``warm_start`` only affects SGN. ``diagnostics`` adds a power-iteration
    estimate of ``||Q^{1/2} J||`` to every FGN solve report.
    """

    method: str = "fgn"
    learning_rate: Optional[float] = None
    damping: float = 1.0
    cg_tol: float = 1e-5
    cg_max_iter: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    warm_start: bool = True
    gram_threshold: int = 512
    diagnostics: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", _DEFAULT_LR[self.method])
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.method != "adam" and not self.damping > 0:
            raise ValueError("damping must be positive for second-order methods")
        if self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be at least 1")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class OpCounts:
    forward: int = 0
    apply_j: int = 0
    apply_jt: int = 0
    curvature_products: int = 0
    flops_per_product: int = 0


@dataclass
class StepResult:
    new_params: HeadParams
    batch_loss: float
    grad_norm: float
    direction: np.ndarray
    solve: Optional[SolveReport] = None
    op_counts: OpCounts = field(default_factory=OpCounts)


def fgn_gram_matvec_flops(b):
    """Row-space product with an explicit Gram: ``K v`` plus the damping term."""
    return 2 * b * b + 2 * b


def fgn_operator_matvec_flops(b, d_f, C):
    """Row-space product through one margin VJP and one margin JVP."""
    jvp = 2 * b * d_f * C + b * C + 2 * b * C
    vjp = b * C + 2 * b * d_f * C + b * C
    return jvp + vjp + 4 * b


def sgn_ggn_matvec_flops(b, d_f, C):
    """Parameter-space damped GGN product with the ``C x C`` softmax covariance."""
    jvp = 2 * b * d_f * C + b * C
    covariance = 5 * b * C
    vjp = 2 * b * d_f * C + b * C
    return jvp + covariance + vjp + 2 * (d_f * C + C)


def _finite_loss(margins):
    value = float(np.mean(margins.losses()))
    if not math.isfinite(value):
        raise FloatingPointError("non-finite batch loss")
    return value


def _gram_solve(params, batch, margins, config):
    b = len(batch)
    lam_b = b * config.damping
    if np.any(margins.q <= 0):
        raise ValueError("q must be strictly positive")
    sq = np.sqrt(np.maximum(margins.q, Q_FLOOR))
    G = gram_unwhitened(batch.features, margins.margin_rows())
    K = sq[:, None] * G * sq[None, :]
    rhs = margins.p_dagger / sq
    n_products = 0

    def matvec(v):
        nonlocal n_products
        n_products += 1
        return K @ v + lam_b * v

    u, iters, recurred = conjugate_gradient(matvec, rhs, tol=config.cg_tol, max_iter=config.cg_max_iter)
    op = affine_row_operator(params, batch, margins)
    direction = -op.apply_jt(sq * u)
    row_res = float(np.linalg.norm(K @ u + lam_b * u - rhs))
    if config.diagnostics:
        jt_norm = spectral_norm_estimate(lambda v: K @ v, b)
        bound = jt_norm * row_res / b
    else:
        jt_norm = bound = float("nan")
    r = margins.p_dagger
    grad_norm = math.sqrt(max(float(r @ G @ r), 0.0)) / b
    report = SolveReport(
        u=u, direction=direction, row_residual_norm=row_res, iterations=iters,
        param_residual_bound=bound, jtilde_norm=jt_norm, recurred_residual_norm=recurred,
        rhs_norm=float(np.linalg.norm(rhs)),
    )
    counts = OpCounts(
        forward=1, apply_j=op.apply_j_count, apply_jt=op.apply_jt_count,
        curvature_products=n_products, flops_per_product=fgn_gram_matvec_flops(b),
    )
    return report, grad_norm, counts


def fgn_step(params: HeadParams, batch: FeatureBatch, config: OptimizerConfig) -> StepResult:
    """One damped FGN step ``w <- w + lr * d`` with ``(H_fgn + lam I) d = -g``.

    CG always starts from zero.
    """
    margins = head_margins(params, batch)
    batch_loss = _finite_loss(margins)
    b = len(batch)
    if b <= config.gram_threshold:
        report, grad_norm, counts = _gram_solve(params, batch, margins, config)
    else:
        system, _ = affine_system(params, batch, config.damping, margins)
        report = cg_solve(system, tol=config.cg_tol, max_iter=config.cg_max_iter,
                          estimate_norm=config.diagnostics)
        grad_norm = float(np.linalg.norm(system.gradient()))
        counts = OpCounts(
            forward=1, apply_j=system.op.apply_j_count, apply_jt=system.op.apply_jt_count,
            curvature_products=report.iterations,
            flops_per_product=fgn_operator_matvec_flops(b, params.n_features, params.n_classes),
        )
    new = params.with_vector(params.vector + config.learning_rate * report.direction)
    return StepResult(new, batch_loss, grad_norm, report.direction, report, counts)


@dataclass
class SGNState:
    previous_direction: Optional[np.ndarray] = None


def sgn_step(params, batch, config, state=None) -> StepResult:
    """One damped full-GGN step; CG is warm-started from the previous direction.

    ``state`` is updated in place when given.
    """
    margins = head_margins(params, batch)
    batch_loss = _finite_loss(margins)
    g = head_gradient(params, batch, margins)
    ggn = ggn_matvec(params, batch, margins)
    lam = config.damping
    n_products = 0

    def matvec(v):
        nonlocal n_products
        n_products += 1
        return ggn(v) + lam * v

    x0 = None
    if config.warm_start and state is not None and state.previous_direction is not None:
        x0 = state.previous_direction
    if np.any(g):
        d, _, _ = conjugate_gradient(matvec, -g, x0=x0, tol=config.cg_tol, max_iter=config.cg_max_iter)
    else:
        d = np.zeros_like(g)
    if state is not None:
        state.previous_direction = d
    counts = OpCounts(
        forward=1, curvature_products=n_products,
        flops_per_product=sgn_ggn_matvec_flops(len(batch), params.n_features, params.n_classes),
    )
    new = params.with_vector(params.vector + config.learning_rate * d)
    return StepResult(new, batch_loss, float(np.linalg.norm(g)), d, None, counts)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))


@numba.njit(cache=True)
def _adam_kernel(w, g, m, v, out, step, b1, b2, lr_t, eps_t):
    for i in range(w.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        di = -lr_t * mi / (math.sqrt(vi) + eps_t)
        step[i] = di
        out[i] = w[i] + di


def adam_step(params, batch, config, state: AdamState) -> StepResult:
    """Bias-corrected Adam step; moments in ``state`` are updated in place."""
    margins = head_margins(params, batch)
    batch_loss = _finite_loss(margins)
    g = head_gradient(params, batch, margins)
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into two scalars
    lr_t = config.learning_rate * math.sqrt(c2) / c1
    eps_t = config.adam_eps * math.sqrt(c2)
    out = np.empty_like(params.vector)
    step = np.empty_like(params.vector)
    _adam_kernel(params.vector, g, state.m, state.v, out, step, b1, b2, lr_t, eps_t)
    new = params.with_vector(out)
    return StepResult(new, batch_loss, float(np.linalg.norm(g)), step, None,
                      OpCounts(forward=1))


def static_batches(order, batch_size):
    """Cut a fixed example order into batches; the last one wraps to the start."""
    order = np.asarray(order)
    n = order.size
    if n == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n_batches = -(-n // batch_size)
    idx = np.arange(n_batches * batch_size) % n
    return [order[idx[i * batch_size:(i + 1) * batch_size]] for i in range(n_batches)]


@dataclass(frozen=True)
class LogRecord:
    step: int
    wall_seconds: float
    train_loss: float
    eval_loss: float
    eval_accuracy: float


@dataclass
class TrainingLog:
    method: str
    seed: int
    records: list
    params: Optional[HeadParams] = None

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])


def train(train_set: FeatureBatch, n_classes, config: OptimizerConfig, epochs=1, batch_size=128,
          eval_set: Optional[FeatureBatch] = None, eval_every=100, init_scale=0.01,
          callback=None) -> TrainingLog:
    """Train a head from a seeded random init over static batches.

    The seed drives the initial weights and the one-time shuffle; there is no
    reshuffling between epochs. Evaluation happens at step 0, every
    ``eval_every`` steps and after the last step. ``wall_seconds`` accumulates
    step time only. ``train_loss`` is the full training-set loss at the
    evaluation point.
    """
    if len(train_set) == 0:
        raise ValueError("empty dataset")
    if eval_set is None:
        eval_set = train_set
    if eval_set.features.shape[1] != train_set.features.shape[1]:
        raise ValueError("evaluation split has a different feature width")
    rng = np.random.default_rng(config.seed)
    params = HeadParams.random(train_set.n_features, n_classes, rng, scale=init_scale)
    batches = [train_set.take(idx) for idx in static_batches(rng.permutation(len(train_set)), batch_size)]

    sgn_state = SGNState()
    adam_state = AdamState.zeros(params.size)

    def evaluate(step, wall):
        return LogRecord(step, wall, head_loss(params, train_set), head_loss(params, eval_set),
                         accuracy(params, eval_set))

    records = [evaluate(0, 0.0)]
    wall = 0.0
    step = 0
    for _ in range(epochs):
        for batch in batches:
            t0 = time.perf_counter()
            if config.method == "fgn":
                result = fgn_step(params, batch, config)
            elif config.method == "sgn":
                result = sgn_step(params, batch, config, sgn_state)
            else:
                result = adam_step(params, batch, config, adam_state)
            wall += time.perf_counter() - t0
            params = result.new_params
            step += 1
            if callback is not None:
                callback(step, result)
            if step % eval_every == 0:
                records.append(evaluate(step, wall))
    if records[-1].step != step:
        records.append(evaluate(step, wall))
    return TrainingLog(config.method, config.seed, records, params)
