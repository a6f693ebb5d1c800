"""Mechanism sweeps and the frozen-feature head benchmark.

* :func:`trace_sweep` - retained, dropped and full logit-space traces against
  competitor dispersion at a fixed true-class probability.
* :func:`step_ratio_sweep` - how much of the full-GGN damped quadratic
  decrease the FGN step keeps, on a two-parameter linear-logit construction.
* :func:`curvature_cost_sweep` - per-step wall time and curvature-product
  operation counts for Adam, FGN and SGN as the class count grows.
* :func:`head_benchmark` - multi-seed training runs on cached features,
  interpolated onto a shared wall-time grid.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .affine import FeatureBatch, HeadParams, standardize
from .cache import make_features, read_feature_cache, stratified_split
from .margin import margin_stats
from .optim import (
    AdamState,
    OptimizerConfig,
    SGNState,
    adam_step,
    fgn_step,
    sgn_step,
    static_batches,
    train,
)
from .oracle import fgn_dense, ggn_dense, trace_decomposition

__all__ = [
    "SweepRecord",
    "StepRatioConfig",
    "trace_sweep",
    "competitor_offsets",
    "step_ratio_point",
    "step_ratio_sweep",
    "DEFAULT_CLASS_GRID",
    "curvature_cost_sweep",
    "BenchmarkResult",
    "head_benchmark",
    "load_benchmark_split",
    "time_to_threshold",
]


@dataclass
class SweepRecord:
    experiment: str
    inputs: dict
    outputs: dict
    diagnostics: dict = field(default_factory=dict)

    def get(self, key):
        for part in (self.inputs, self.outputs, self.diagnostics):
            if key in part:
                return part[key]
        raise KeyError(key)


def trace_sweep(p_star=0.6, n_classes=10, xi_grid=None, n_points=51):
    """Closed-form trace split over a dispersion grid (default: ``n_points`` evenly spaced)."""
    xi_max = 1.0 - 1.0 / (n_classes - 1)
    if xi_grid is None:
        xi_grid = np.linspace(0.0, xi_max, n_points)
    xi_grid = np.asarray(xi_grid, dtype=np.float64)
    if np.any(xi_grid < 0) or np.any(xi_grid > xi_max + 1e-15):
        raise ValueError(f"xi grid must lie in [0, {xi_max}] for C={n_classes}")
    records = []
    for xi in xi_grid:
        tr = trace_decomposition(p_star, float(xi))
        records.append(SweepRecord(
            "trace",
            {"xi": float(xi)},
            {"tau_ret": tr.tau_ret, "tau_drop": tr.tau_drop, "tau_full": tr.tau_full},
            {"p_star": p_star, "p_dagger": 1.0 - p_star, "n_classes": n_classes},
        ))
    return records


@dataclass(frozen=True)
class StepRatioConfig:
    """Two-parameter construction: true row ``(-1, eta)``, competitor rows ``(1, beta t_j)``.

    ``t_j`` are ``C - 1`` evenly spaced points on ``[0, 1]``, mean-centred, in
    increasing order; the concentrated end of the competitor blend sits on
    competitor ``concentrated`` (index into that order).
    """

    n_classes: int = 10
    p_star: float = 0.70
    eta: float = 1.25
    beta: float = 3.0
    alphas: tuple = tuple(np.linspace(0.02, 1.0, 50))
    damping_scales: tuple = (0.01, 0.1, 1.0)
    concentrated: int = 0

    def __post_init__(self):
        if any(a <= 0 or a > 1 for a in self.alphas):
            raise ValueError("alpha values must lie in (0, 1]")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.concentrated < self.n_classes - 1:
            raise ValueError("concentrated competitor index out of range")


def competitor_offsets(n_classes):
    t = np.linspace(0.0, 1.0, n_classes - 1)
    return t - t.mean()


def _construction(config):
    t = competitor_offsets(config.n_classes)
    rows = np.column_stack([np.ones_like(t), config.beta * t])
    return np.vstack([[-1.0, config.eta], rows])


def _blend(config, alpha):
    m = config.n_classes - 1
    rho = np.full(m, alpha / m)
    rho[config.concentrated] += 1.0 - alpha
    return rho


def step_ratio_point(config, alpha, damping_scale):
    """Ratio of GGN-model decreases of the FGN and GGN damped steps at one blend."""
    A = _construction(config)
    p_star = config.p_star
    p_dagger = 1.0 - p_star
    e_k = np.zeros(config.n_classes)
    e_k[0] = 1.0

    # H_fgn at the concentrated end (rho one-hot) sets the damping scale
    a0 = A[1 + config.concentrated] - A[0]
    lam = damping_scale * p_star * p_dagger * (a0 @ a0) / 2.0

    rho = _blend(config, alpha)
    p = np.concatenate([[p_star], p_dagger * rho])
    stats = margin_stats(np.log(p), 0)
    g = A.T @ (p - e_k)
    H_ggn = ggn_dense(A, p)
    H_fgn = fgn_dense(A, stats, 0)
    eye = np.eye(2)
    d_ggn = -np.linalg.solve(H_ggn + lam * eye, g)
    d_fgn = -np.linalg.solve(H_fgn + lam * eye, g)

    def decrease(d):
        return -(g @ d + 0.5 * d @ H_ggn @ d + 0.5 * lam * d @ d)

    dec_ggn, dec_fgn = decrease(d_ggn), decrease(d_fgn)
    assert dec_ggn > 0, "damped GGN step must decrease its own model"
    return {
        "xi": float(1.0 - rho @ rho),
        "ratio": float(dec_fgn / dec_ggn),
        "lambda": float(lam),
        "decrease_ggn": float(dec_ggn),
        "decrease_fgn": float(dec_fgn),
    }


def step_ratio_sweep(config=StepRatioConfig()):
    records = []
    for s in config.damping_scales:
        for alpha in config.alphas:
            pt = step_ratio_point(config, float(alpha), float(s))
            records.append(SweepRecord(
                "step-ratio",
                {"alpha": float(alpha), "damping_scale": float(s)},
                {"xi": pt["xi"], "ratio": pt["ratio"]},
                {k: pt[k] for k in ("lambda", "decrease_ggn", "decrease_fgn")},
            ))
    return records


DEFAULT_CLASS_GRID = tuple(2 ** k for k in range(1, 13))


def curvature_cost_sweep(class_grid=DEFAULT_CLASS_GRID, n_features=2048, batch_size=512,
                         n_examples=32768, n_warmup=128, n_timed=640,
                         methods=("adam", "fgn", "sgn"), damping=1.0, cg_max_iter=5,
                         cg_tol=1e-5, seed=0):
    """Steady-state step timing on Gaussian features over a range of class counts.

    ``flops_curvature`` is the model flop count of one curvature-operator
    application inside CG (0 for Adam); ``apply_j_count``/``apply_jt_count``
    are the margin-map products of the last timed step.
    """
    records = []
    for C in class_grid:
        data = make_features(n_examples, n_features, C, seed=seed, mode="gaussian")
        order = np.random.default_rng(seed).permutation(n_examples)
        batches = [data.take(idx) for idx in static_batches(order, batch_size)]
        for method in methods:
            config = OptimizerConfig(method, damping=damping, cg_max_iter=cg_max_iter,
                                     cg_tol=cg_tol, seed=seed)
            params = HeadParams.random(n_features, C, np.random.default_rng(seed))
            sgn_state = SGNState()
            adam_state = AdamState.zeros(params.size)
            times = []
            result = None
            for i in range(n_warmup + n_timed):
                batch = batches[i % len(batches)]
                t0 = time.perf_counter()
                if method == "fgn":
                    result = fgn_step(params, batch, config)
                elif method == "sgn":
                    result = sgn_step(params, batch, config, sgn_state)
                else:
                    result = adam_step(params, batch, config, adam_state)
                elapsed = time.perf_counter() - t0
                params = result.new_params
                if i >= n_warmup:
                    times.append(elapsed)
            counts = result.op_counts
            times = np.asarray(times)
            records.append(SweepRecord(
                "timing",
                {"C": int(C), "method": method},
                {
                    "mean_step_seconds": float(times.mean()) if times.size else float("nan"),
                    "std_step_seconds": float(times.std()) if times.size else float("nan"),
                    "flops_curvature": int(counts.flops_per_product),
                    "apply_j_count": int(counts.apply_j),
                    "apply_jt_count": int(counts.apply_jt),
                },
                {"curvature_products": int(counts.curvature_products), "batch_size": batch_size,
                 "n_features": n_features, "n_timed": n_timed, "n_warmup": n_warmup},
            ))
    return records


def time_to_threshold(grid, curve, threshold):
    """First grid time at which ``curve`` reaches ``threshold``; ``None`` if never."""
    hit = np.flatnonzero(np.asarray(curve) >= threshold)
    return float(grid[hit[0]]) if hit.size else None


@dataclass
class BenchmarkResult:
    logs: dict
    grid: np.ndarray
    curves: dict
    thresholds: dict
    horizon: float

    def summary(self):
        """Per method: accuracy and loss (mean, std) at the shared horizon."""
        return {
            name: {
                "accuracy": (c["mean_accuracy"][-1], c["std_accuracy"][-1]),
                "loss": (c["mean_loss"][-1], c["std_loss"][-1]),
            }
            for name, c in self.curves.items()
        }


def head_benchmark(train_set: FeatureBatch, eval_set: FeatureBatch, n_classes, configs,
                   seeds=range(10), epochs=150, batch_size=128, eval_every=100,
                   thresholds=(), grid_points=200):
    """Run every config for every seed and average the eval curves over wall time.

    The shared grid ends at the earliest final evaluation time over all runs,
    so no run is extrapolated.
    """
    if eval_set.labels.size and eval_set.labels.max() >= n_classes:
        raise ValueError("evaluation labels exceed the number of classes")
    if train_set.labels.max() >= n_classes:
        raise ValueError("training labels exceed the number of classes")
    logs = {
        name: [train(train_set, n_classes, cfg.with_(seed=int(s)), epochs=epochs,
                     batch_size=batch_size, eval_set=eval_set, eval_every=eval_every)
               for s in seeds]
        for name, cfg in configs.items()
    }
    horizon = min(log.records[-1].wall_seconds for runs in logs.values() for log in runs)
    grid = np.linspace(0.0, horizon, grid_points)
    curves, reached = {}, {}
    for name, runs in logs.items():
        acc = np.array([np.interp(grid, r.column("wall_seconds"), r.column("eval_accuracy")) for r in runs])
        ce = np.array([np.interp(grid, r.column("wall_seconds"), r.column("eval_loss")) for r in runs])
        curves[name] = {
            "mean_accuracy": acc.mean(axis=0),
            "std_accuracy": acc.std(axis=0),
            "mean_loss": ce.mean(axis=0),
            "std_loss": ce.std(axis=0),
        }
        reached[name] = {thr: time_to_threshold(grid, curves[name]["mean_accuracy"], thr)
                         for thr in thresholds}
    return BenchmarkResult(logs, grid, curves, reached, horizon)


def load_benchmark_split(cache_path, eval_fraction=0.1, split_seed=0, eval_cache=None,
                         standardize_features=True):
    """Read a feature cache and return ``(train_set, eval_set, n_classes)``.

    With ``eval_cache`` the second file is the evaluation split; otherwise a
    per-label stratified split of ``eval_fraction`` is taken. Features are
    standardised with training-split statistics unless told otherwise.
    """
    data, n_classes = read_feature_cache(cache_path)
    if eval_cache is not None:
        eval_set, c_eval = read_feature_cache(eval_cache)
        if c_eval != n_classes or eval_set.n_features != data.n_features:
            raise ValueError("evaluation cache does not match the training cache layout")
        train_set = data
    else:
        train_idx, eval_idx = stratified_split(data.labels, eval_fraction, seed=split_seed)
        train_set, eval_set = data.take(train_idx), data.take(eval_idx)
    if standardize_features:
        X_train, X_eval = standardize(train_set.features, eval_set.features)
        train_set = FeatureBatch(X_train, train_set.labels)
        eval_set = FeatureBatch(X_eval, eval_set.labels)
    return train_set, eval_set, n_classes
