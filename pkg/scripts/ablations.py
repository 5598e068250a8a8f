"""Paired-seed ablations: learnable vs frozen omega, and mask regularisation on vs off.

    python3 scripts/ablations.py [omega|mask_reg ...] [--seeds 0 1 2] [--out runs/ablations]
"""

import argparse
import logging

from stlt.analysis import rows_to_csv
from stlt.train import ABLATIONS, paired, run_ablation

COMPARISONS = {
    "omega": ("learnable", "frozen", "eval_loss"),
    "mask_reg": ("regularized", "unregularized", "s_eff"),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("which", nargs="*", default=list(ABLATIONS), choices=list(ABLATIONS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    for name in args.which:
        base, variants = ABLATIONS[name]
        rows = run_ablation(base, variants, args.seeds, args.out and f"{args.out}/{name}")
        print(rows_to_csv(rows), end="")
        a, b, key = COMPARISONS[name]
        wins = sum(va < vb for _, va, vb in paired(rows, a, b, key))
        print(f"{name}: {a} has lower {key} than {b} in {wins}/{len(args.seeds)} seeds\n")


if __name__ == "__main__":
    main()
