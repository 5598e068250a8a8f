"""Inversion quadrature order, contour truncation, and rectangular-window cutoff experiments.

    python3 scripts/error_analysis.py [--out runs/analysis]
"""

import argparse
from pathlib import Path

import numpy as np

from stlt.analysis import (SummaryTable, exponential_envelope_signal, quadrature_sweep, rows_to_csv,
                           truncation_sweep, window_cutoff_experiment)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    for sig in ("decaying_sine", "gaussian_pulse", "step"):
        reps, p = quadrature_sweep(sig)
        print(SummaryTable(f"{sig}: trapezoid order p = {p:.3f}", ["S", "E_quad"],
                           [[r.S, r.E_quad] for r in reps]).render(), "\n")
        trunc = truncation_sweep(sig, B_values=(2.0, 4.0, 8.0, 16.0, 32.0))
        print(SummaryTable(f"{sig}: contour truncation", ["B", "E_trunc"],
                           [[r.B, r.E_trunc] for r in trunc]).render(), "\n")
        if out:
            rows_to_csv(reps + trunc, out / f"inversion_{sig}.csv")

    x = exponential_envelope_signal(400)
    for sigma_min in (0.025, 0.05, 0.1):
        curve = window_cutoff_experiment(x, np.arange(10, 81, 10), sigma_min)
        print(f"window cutoff sigma_min={sigma_min}: slope {curve.slope:.4f}")
        if out:
            rows_to_csv(curve.rows(), out / f"window_{sigma_min}.csv")


if __name__ == "__main__":
    main()
