"""Time streaming, windowed and dense mixing against sequence length and fit log-log slopes.

    python3 scripts/bench_scaling.py [--out runs/bench]
"""

import argparse
from pathlib import Path

from stlt.bench import bench_scaling, results_csv, scaling_slope

SWEEPS = {
    "stlt_streaming": [1024, 2048, 4096, 8192, 16384],
    "stlt_windowed": [1024, 2048, 4096, 8192, 16384],
    "naive_attention": [256, 512, 1024, 2048],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    rows, report = [], []
    for mech, Ns in SWEEPS.items():
        res = bench_scaling(Ns, S=16, d=8, mechanism=mech, repeats=args.repeats)
        rows += res
        report.append(f"{mech}: slope {scaling_slope(res):.3f} over N={Ns[0]}..{Ns[-1]}")
    text = results_csv(rows)
    print(text + "\n".join(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(text)
        (out / "bench_report.txt").write_text("\n".join(report) + "\n")


if __name__ == "__main__":
    main()
