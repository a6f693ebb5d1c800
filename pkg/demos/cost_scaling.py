"""Per-step cost against the number of classes, at a laptop-friendly size.

FGN's row-space product works on a b x b system and does not grow with C;
the full-GGN product does. Pass a larger feature width or class grid for
the full-size sweep (the CLI's ``mechanism timing`` has the same knobs).
"""
import sys

from threadpoolctl import threadpool_limits

from fastgn.experiments import curvature_cost_sweep

top = int(sys.argv[1]) if len(sys.argv) > 1 else 1024
grid = [2 ** k for k in range(1, top.bit_length())]

with threadpool_limits(1):
    recs = curvature_cost_sweep(class_grid=grid, n_features=256, batch_size=256, n_examples=1024,
                                n_warmup=2, n_timed=8)

print(f"{'C':>6s} {'method':>6s} {'ms/step':>9s} {'flops/product':>14s}")
for r in recs:
    print(f"{r.get('C'):6d} {r.get('method'):>6s} {1e3 * r.get('mean_step_seconds'):9.2f} "
          f"{r.get('flops_curvature'):14d}")
