"""Where the dropped curvature goes as competitor mass spreads out.

Prints the per-example curvature traces along the dispersion axis and the
step-ratio curve of a two-parameter construction for three damping scales.
"""
import numpy as np

from fastgn.experiments import StepRatioConfig, step_ratio_sweep, trace_sweep


def main():
    print("traces for p_star = 0.6, C = 10")
    print(f"{'xi':>6s} {'retained':>9s} {'dropped':>9s} {'full':>9s}")
    for r in trace_sweep(0.6, 10, n_points=9):
        print(f"{r.get('xi'):6.3f} {r.get('tau_ret'):9.4f} {r.get('tau_drop'):9.4f} {r.get('tau_full'):9.4f}")

    cfg = StepRatioConfig(alphas=tuple(np.linspace(0.05, 1.0, 8)))
    recs = step_ratio_sweep(cfg)
    print("\nGGN-model decrease of the FGN step relative to the GGN step")
    print(f"{'xi':>6s}" + "".join(f"  s={s:<6g}" for s in cfg.damping_scales))
    for alpha in cfg.alphas:
        row = [r for r in recs if r.get("alpha") == alpha]
        print(f"{row[0].get('xi'):6.3f}" + "".join(f"  {r.get('ratio'):8.5f}" for r in row))


if __name__ == "__main__":
    main()
