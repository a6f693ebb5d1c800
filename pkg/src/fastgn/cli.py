"""``fastgn`` command line: verify, mechanism sweeps, feature caches, head training.

Exit status is 0 on success, 1 on a validation failure (bad arguments,
malformed cache, failed invariant) and 2 on an I/O error.
"""

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .cache import CacheFormatError, make_features, write_feature_cache
from .experiments import (
    DEFAULT_CLASS_GRID,
    StepRatioConfig,
    curvature_cost_sweep,
    head_benchmark,
    load_benchmark_split,
    step_ratio_sweep,
    trace_sweep,
)
from .optim import METHODS, OptimizerConfig

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

TRACE_COLUMNS = ("xi", "tau_ret", "tau_drop", "tau_full")
STEP_RATIO_COLUMNS = ("alpha", "xi", "damping_scale", "ratio")
TIMING_COLUMNS = ("C", "method", "mean_step_seconds", "std_step_seconds", "flops_curvature",
                  "apply_j_count", "apply_jt_count")
LOG_COLUMNS = ("seed", "step", "wall_seconds", "train_loss", "eval_loss", "eval_accuracy")
AGGREGATE_COLUMNS = ("method", "wall_seconds", "mean_accuracy", "std_accuracy", "mean_loss", "std_loss")
THRESHOLD_COLUMNS = ("method", "threshold", "time_seconds")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which is reserved here for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_VALIDATION)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows):
    """Write ``rows`` (sequences in column order) with a header row and ``\\n`` line ends."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _emit_meta(out, command, seed, config):
    digest = config_hash(config)
    meta = {"command": command, "seed": seed, "config_hash": digest, "config": config,
            "version": __version__}
    Path(str(out) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    print(f"seed={seed} config_hash={digest}")
    return digest


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _tolerance(text):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    return name, float(value)


# commands


def cmd_verify(args):
    from .verify import run_all

    results = run_all(dict(args.tol or []), only=args.only)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_OK if not failed else EXIT_VALIDATION


def cmd_trace(args):
    recs = trace_sweep(args.p_star, args.classes, n_points=args.points)
    write_csv(args.out, TRACE_COLUMNS, [[r.get(c) for c in TRACE_COLUMNS] for r in recs])
    _emit_meta(args.out, "mechanism trace", None,
               {"p_star": args.p_star, "classes": args.classes, "points": args.points})
    return EXIT_OK


def cmd_step_ratio(args):
    config = StepRatioConfig(
        n_classes=args.classes, p_star=args.p_star, eta=args.eta, beta=args.beta,
        alphas=tuple(np.linspace(1.0 / args.points, 1.0, args.points)),
        damping_scales=tuple(args.damping_scales), concentrated=args.concentrated,
    )
    recs = step_ratio_sweep(config)
    write_csv(args.out, STEP_RATIO_COLUMNS, [[r.get(c) for c in STEP_RATIO_COLUMNS] for r in recs])
    _emit_meta(args.out, "mechanism step-ratio", None,
               {"classes": args.classes, "p_star": args.p_star, "eta": args.eta, "beta": args.beta,
                "points": args.points, "damping_scales": args.damping_scales,
                "concentrated": args.concentrated})
    return EXIT_OK


def cmd_timing(args):
    config = {
        "class_grid": args.classes_grid, "n_features": args.features, "batch_size": args.batch,
        "n_examples": args.examples, "n_warmup": args.warmup, "n_timed": args.timed,
        "damping": args.damping, "cg_max_iter": args.cg_max_iter, "cg_tol": args.cg_tol,
        "methods": args.methods, "seed": args.seed,
    }
    with threadpool_limits(limits=args.threads or 1):
        recs = curvature_cost_sweep(**config)
    write_csv(args.out, TIMING_COLUMNS, [[r.get(c) for c in TIMING_COLUMNS] for r in recs])
    _emit_meta(args.out, "mechanism timing", args.seed, {**config, "threads": args.threads or 1})
    return EXIT_OK


def cmd_make_features(args):
    data = make_features(args.n, args.features, args.classes, seed=args.seed, mode=args.mode,
                         noise=args.noise, radius=args.radius)
    write_feature_cache(args.out, data.features, data.labels, args.classes)
    _emit_meta(args.out, "make-features", args.seed,
               {"n": args.n, "features": args.features, "classes": args.classes, "mode": args.mode,
                "noise": args.noise, "radius": args.radius})
    return EXIT_OK


def cmd_train_head(args):
    train_set, eval_set, n_classes = load_benchmark_split(
        args.cache, eval_fraction=args.eval_fraction, split_seed=args.split_seed,
        eval_cache=args.eval_cache, standardize_features=not args.no_standardize,
    )
    config = OptimizerConfig(args.method, learning_rate=args.lr, damping=args.damping,
                             cg_tol=args.cg_tol, cg_max_iter=args.cg_max_iter)
    seeds = list(range(args.seed, args.seed + args.seeds))
    run_config = {
        "cache": str(args.cache), "eval_cache": None if args.eval_cache is None else str(args.eval_cache),
        "eval_fraction": args.eval_fraction, "split_seed": args.split_seed,
        "method": config.method, "lr": config.learning_rate, "damping": config.damping,
        "cg_tol": config.cg_tol, "cg_max_iter": config.cg_max_iter, "batch": args.batch,
        "epochs": args.epochs, "seeds": seeds, "eval_cadence": args.eval_cadence,
        "thresholds": args.thresholds, "deterministic": args.deterministic,
        "standardize": not args.no_standardize,
    }
    threads = 1 if args.deterministic else args.threads
    with threadpool_limits(limits=threads):
        result = head_benchmark(train_set, eval_set, n_classes, {config.method: config}, seeds=seeds,
                                epochs=args.epochs, batch_size=args.batch,
                                eval_every=args.eval_cadence, thresholds=args.thresholds,
                                grid_points=args.grid_points)
    out = Path(args.out)
    logs = result.logs[config.method]
    write_csv(out, LOG_COLUMNS, [
        [log.seed, r.step, r.wall_seconds, r.train_loss, r.eval_loss, r.eval_accuracy]
        for log in logs for r in log.records
    ])
    curves = result.curves[config.method]
    write_csv(out.with_name(out.stem + ".aggregate.csv"), AGGREGATE_COLUMNS, [
        [config.method, float(t), float(curves["mean_accuracy"][i]), float(curves["std_accuracy"][i]),
         float(curves["mean_loss"][i]), float(curves["std_loss"][i])]
        for i, t in enumerate(result.grid)
    ])
    write_csv(out.with_name(out.stem + ".thresholds.csv"), THRESHOLD_COLUMNS, [
        [config.method, thr, "--" if t is None else t]
        for thr, t in result.thresholds[config.method].items()
    ])
    _emit_meta(out, "train-head", seeds, {**run_config, "threads": threads})
    for name, s in result.summary().items():
        (acc, acc_sd), (ce, ce_sd) = s["accuracy"], s["loss"]
        print(f"{name}: eval accuracy {100 * acc:.2f} +- {100 * acc_sd:.2f}%  "
              f"eval loss {ce:.4f} +- {ce_sd:.4f}  at {result.horizon:.2f}s")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="fastgn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fastgn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--tol", type=_tolerance, action="append", metavar="SUITE=VALUE",
                   help="override one suite tolerance (repeatable)")
    v.add_argument("--only", nargs="+", metavar="SUITE", help="run only these suites")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("mechanism", help="curvature mechanism sweeps")
    msub = m.add_subparsers(dest="sweep", required=True, parser_class=_Parser)

    t = msub.add_parser("trace", help="logit-space trace split against dispersion")
    t.add_argument("--p-star", type=float, default=0.6)
    t.add_argument("--classes", type=int, default=10)
    t.add_argument("--points", type=int, default=51)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_trace)

    r = msub.add_parser("step-ratio", help="FGN/GGN damped-step decrease ratio")
    r.add_argument("--classes", type=int, default=10)
    r.add_argument("--p-star", type=float, default=0.7)
    r.add_argument("--eta", type=float, default=1.25)
    r.add_argument("--beta", type=float, default=3.0)
    r.add_argument("--points", type=int, default=50, help="alpha grid size on (0, 1]")
    r.add_argument("--damping-scales", type=_float_list, default=[0.01, 0.1, 1.0])
    r.add_argument("--concentrated", type=int, default=0,
                   help="competitor carrying the mass at the concentrated end")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_step_ratio)

    tm = msub.add_parser("timing", help="per-step cost against the class count")
    tm.add_argument("--classes-grid", type=_int_list, default=list(DEFAULT_CLASS_GRID))
    tm.add_argument("--features", type=int, default=2048)
    tm.add_argument("--batch", type=int, default=512)
    tm.add_argument("--examples", type=int, default=32768)
    tm.add_argument("--warmup", type=int, default=128)
    tm.add_argument("--timed", type=int, default=640)
    tm.add_argument("--damping", type=float, default=1.0)
    tm.add_argument("--cg-max-iter", type=int, default=5)
    tm.add_argument("--cg-tol", type=float, default=1e-5)
    tm.add_argument("--methods", nargs="+", choices=METHODS, default=["adam", "fgn", "sgn"])
    tm.add_argument("--seed", type=int, default=0)
    tm.add_argument("--threads", type=int, default=None, help="BLAS threads (default 1)")
    tm.add_argument("--out", required=True)
    tm.set_defaults(func=cmd_timing)

    f = sub.add_parser("make-features", help="write a synthetic FGNF feature cache")
    f.add_argument("mode", choices=["gaussian", "clustered"])
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--features", type=int, required=True)
    f.add_argument("--classes", type=int, required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--noise", type=float, default=1.0, help="within-class std (clustered)")
    f.add_argument("--radius", type=float, default=2.0, help="class-mean radius (clustered)")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_make_features)

    h = sub.add_parser("train-head", help="train an affine head on a feature cache")
    h.add_argument("cache")
    h.add_argument("--method", choices=METHODS, default="fgn")
    h.add_argument("--lr", type=float, default=None, help="default: 0.1 for fgn/sgn, 3e-4 for adam")
    h.add_argument("--damping", type=float, default=1.0)
    h.add_argument("--cg-tol", type=float, default=1e-5)
    h.add_argument("--cg-max-iter", type=int, default=5)
    h.add_argument("--batch", type=int, default=128)
    h.add_argument("--epochs", type=int, default=150)
    h.add_argument("--seeds", type=int, default=10, help="number of seeds")
    h.add_argument("--seed", type=int, default=0, help="first seed")
    h.add_argument("--eval-cadence", type=int, default=100, help="steps between evaluations")
    h.add_argument("--eval-fraction", type=float, default=0.1)
    h.add_argument("--split-seed", type=int, default=0)
    h.add_argument("--eval-cache", default=None, help="separate evaluation cache")
    h.add_argument("--no-standardize", action="store_true",
                   help="use raw cached features instead of train-split standardisation")
    h.add_argument("--thresholds", type=_float_list, default=[],
                   help="accuracy thresholds for time-to-threshold rows")
    h.add_argument("--grid-points", type=int, default=200)
    h.add_argument("--threads", type=int, default=None)
    h.add_argument("--deterministic", action="store_true",
                   help="single BLAS thread so repeated runs give identical logs")
    h.add_argument("--out", required=True, help="per-seed log CSV; siblings get the aggregates")
    h.set_defaults(func=cmd_train_head)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    for name in ("points", "classes", "batch", "epochs", "seeds", "eval_cadence", "grid_points", "n"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            print(f"fastgn: error: --{name.replace('_', '-')} must be positive", file=sys.stderr)
            return EXIT_VALIDATION
    try:
        return args.func(args)
    except (CacheFormatError, ValueError, ArithmeticError) as exc:
        print(f"fastgn: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"fastgn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
