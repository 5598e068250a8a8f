"""Train the delay-16 copy model until it reaches 99% token accuracy.

    python3 scripts/copy_task.py [--out runs/copy] [key=value ...]
"""

import argparse
import logging
import time

from stlt.train import COPY_BASE, apply_overrides, train_loop

def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/copy")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = apply_overrides(COPY_BASE, args.overrides)
    t0 = time.perf_counter()
    res = train_loop(cfg, args.out)
    ev = res.final_eval
    print(f"steps={res.steps_run} eval_accuracy={ev.accuracy:.4f} eval_loss={ev.loss:.4f} "
          f"wall={time.perf_counter() - t0:.0f}s checkpoint={res.checkpoint_path}")


if __name__ == "__main__":
    main()
