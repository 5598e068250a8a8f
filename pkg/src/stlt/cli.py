"""Command-line entry point: ``stlt <subcommand> [flags]``.

Exit status is 0 on success, 1 when inputs fail validation (unknown config
keys, corrupt checkpoints, budget refusals, failed checks) and 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("stlt")


class ValidationFailure(Exception):
    pass


def _kv_pair(text: str) -> str:
    if "=" not in text or not text.partition("=")[0].strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return text


def _split_sets(pairs, known: dict) -> dict:
    """Parse ``key=value`` strings against ``known`` defaults (type taken from the default)."""
    out = dict(known)
    for pair in pairs or ():
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in known:
            raise ValidationFailure(f"unknown key {key!r}; expected one of {sorted(known)}")
        try:
            out[key] = type(known[key])(raw)
        except ValueError as exc:
            raise ValidationFailure(f"bad value for {key}: {raw!r}") from exc
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args):
    from .train import TrainConfig, apply_overrides, read_config

    try:
        cfg = read_config(args.config) if args.config else TrainConfig()
        extra = list(args.set or [])
        if args.seed is not None:
            extra.append(f"seed={args.seed}")
        return apply_overrides(cfg, extra)
    except (KeyError, ValueError, OSError) as exc:
        raise ValidationFailure(str(exc)) from exc


def _load(path):
    from .checkpoint import CorruptCheckpointError
    from .train import load_training_checkpoint

    try:
        return load_training_checkpoint(path)
    except (CorruptCheckpointError, OSError, KeyError, ValueError) as exc:
        raise ValidationFailure(f"cannot load checkpoint {path}: {exc}") from exc


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(args.out) / "checkpoint.bin"


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .train import TrainingDiverged, train_loop

    cfg = _train_config(args)
    out = _out_dir(args)
    try:
        res = train_loop(cfg, out)
    except TrainingDiverged as exc:
        raise ValidationFailure(f"{exc}; last good checkpoint kept at {out / 'checkpoint.bin'}") from exc
    if res.final_eval is not None:
        ev = res.final_eval
        line = f"eval_loss={ev.loss!r} eval_accuracy={ev.accuracy!r}"
        (out / "eval.txt").write_text(line + "\n")
        print(line)
    print(f"wrote {res.metrics_path} and {res.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    from .tasks import ByteCorpus
    from .train import evaluate

    cfg, params, _, lam = _load(_checkpoint_path(args))
    if args.seed is not None:
        cfg.seed = args.seed
    corpus = ByteCorpus(cfg.corpus, cfg.seq_len) if cfg.task == "char_lm" else None
    ev = evaluate(params, cfg, lam, corpus=corpus)
    line = f"task={cfg.task} eval_loss={ev.loss!r} eval_accuracy={ev.accuracy!r}"
    for k, v in ev.s_eff.items():
        line += f" s_eff[{k}]={v:.4f}"
    print(line)
    if args.out:
        (_out_dir(args) / "eval.txt").write_text(line + "\n")
    return 0


def greedy_generate(params, prompt, length: int, temperature: float = 1.0):
    """Greedy continuation of ``prompt`` (1-d token ids) by ``length`` tokens."""
    from .adaptive import MaskMode, MaskPolicy
    from .mixer import forward_lm

    toks = [int(t) for t in prompt]
    policy = MaskPolicy(MaskMode.DETERMINISTIC_EVAL, temperature=temperature)
    for _ in range(length):
        logits = forward_lm(np.asarray(toks)[None, :], params, policy)
        toks.append(int(np.argmax(logits[0, -1])))
    return toks


def cmd_generate(args) -> int:
    cfg, params, _, lam = _load(_checkpoint_path(args))
    if cfg.task == "char_lm":
        prompt = list((args.prompt or "\n").encode("utf-8"))
    else:
        try:
            prompt = [int(t) for t in (args.prompt or "0").split(",")]
        except ValueError as exc:
            raise ValidationFailure("prompt must be comma-separated token ids for this task") from exc
    if not prompt or max(prompt) >= params.config.vocab or min(prompt) < 0:
        raise ValidationFailure("prompt token out of vocabulary")
    toks = greedy_generate(params, prompt, args.length, lam)
    if cfg.task == "char_lm":
        print(bytes(toks).decode("utf-8", errors="replace"))
    else:
        print(",".join(map(str, toks)))
    return 0


def cmd_gradcheck(args) -> int:
    from .train import model_gradcheck

    seed = args.seed if args.seed is not None else 0
    opts = _split_sets(args.set, {"N": 8, "tol": 1e-4})
    rep = model_gradcheck(seed=seed, N=opts["N"])
    print(rep.table())
    ok = rep.passed(opts["tol"])
    print("PASS" if ok else "FAIL", f"max relative error {rep.worst:.3e} (tolerance {opts['tol']:g})")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from .bench import DEFAULT_BUDGET, MemoryBudgetError, bench_scaling, results_csv, scaling_slope

    opts = _split_sets(args.set, {"S": 16, "d": 8, "repeats": 5, "budget_mb": DEFAULT_BUDGET // 2**20})
    mech = args.mechanism or "stlt_streaming"
    Ns = args.N or ([1024, 2048, 4096, 8192, 16384] if mech != "naive_attention" else [256, 512, 1024, 2048])
    try:
        rows = bench_scaling(sorted(Ns), opts["S"], opts["d"], mech, repeats=opts["repeats"],
                             budget_bytes=opts["budget_mb"] * 2**20, seed=args.seed or 0)
    except MemoryBudgetError as exc:
        raise ValidationFailure(f"refusing to run: {exc}") from exc
    text = results_csv(rows)
    print(text, end="")
    if args.out:
        out = _out_dir(args)
        (out / "bench.csv").write_text(text)
        if len(rows) >= 2:
            (out / "bench_report.txt").write_text(
                f"{mech}: log-log slope of time vs N = {scaling_slope(rows):.3f}\n"
                "STLT rows time coefficient computation; memory is the coefficient buffer N*S*d complex entries.\n"
            )
    if len(rows) >= 2:
        print(f"slope {scaling_slope(rows):.3f}")
    return 0


def cmd_analyze(args) -> int:
    from . import analysis as an

    out = _out_dir(args) if args.out else None
    kind = args.kind
    if kind == "inversion":
        opts = _split_sets(args.set, {"signal": "decaying_sine", "B": 4.0, "gamma": 0.5})
        try:
            reps, p = an.quadrature_sweep(an.Signal(opts["signal"]), B=opts["B"], gamma=opts["gamma"])
        except ValueError as exc:
            raise ValidationFailure(str(exc)) from exc
        table = an.SummaryTable(f"{opts['signal']} trapezoid inversion, fitted order p = {p:.3f}",
                                ["S", "E_quad", "E_trunc", "E_total"],
                                [[r.S, r.E_quad, r.E_trunc, r.E_total] for r in reps])
        rows = [r.to_row() for r in reps]
    elif kind == "window":
        opts = _split_sets(args.set, {"sigma_min": 0.05, "N": 400, "T_max": 80})
        x = an.exponential_envelope_signal(opts["N"], seed=args.seed or 0)
        T = np.arange(10, opts["T_max"] + 1, 10)
        curve = an.window_cutoff_experiment(x, T, opts["sigma_min"])
        table = an.SummaryTable(f"rectangular cutoff, sigma_min = {opts['sigma_min']}, fitted slope = {curve.slope:.4f}",
                                ["T", "error"], [[int(t), float(e)] for t, e in zip(curve.T, curve.error)])
        rows = curve.rows()
    elif kind == "perturb":
        from .train import make_batch

        cfg, params, _, lam = _load(_checkpoint_path(args))
        if args.seed is not None:
            cfg.seed = args.seed
        tokens, targets = make_batch(cfg, stream=2**41, batch=cfg.eval_batch)
        from .adaptive import MaskMode, MaskPolicy

        res = an.relevance_perturbation(params, tokens, targets, (0.0, 1e-3, 1e-2),
                                        MaskPolicy(MaskMode.DETERMINISTIC_EVAL, temperature=lam))
        table = an.SummaryTable("relevance perturbation", ["eps", "norm_dR", "delta_loss", "ratio"],
                                [[r.eps, r.norm_dR, r.delta_loss, r.ratio] for r in res])
        rows = [{"eps": r.eps, "norm_dR": r.norm_dR, "loss": r.loss, "delta_loss": r.delta_loss} for r in res]
    else:
        return cmd_dump_params(args)
    print(table.render())
    if out is not None:
        an.rows_to_csv(rows, out / f"{kind}.csv")
        (out / f"{kind}_report.txt").write_text(table.render() + "\n")
    return 0


def cmd_dump_params(args) -> int:
    from .analysis import dump_params
    from .checkpoint import CorruptCheckpointError

    path = _checkpoint_path(args)
    target = (_out_dir(args) / "params.csv") if args.out else None
    try:
        text = dump_params(path, target)
    except (CorruptCheckpointError, OSError) as exc:
        raise ValidationFailure(f"cannot load checkpoint {path}: {exc}") from exc
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", type=_kv_pair, metavar="KEY=VALUE", help="override (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.bin)")

    p = argparse.ArgumentParser(prog="stlt", description="Laplace-node sequence mixer: training, checks, benchmarks.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(fn=cmd_train)
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint").set_defaults(fn=cmd_eval)
    g = sub.add_parser("generate", parents=[common], help="greedy generation from a checkpoint")
    g.add_argument("--prompt")
    g.add_argument("--length", type=int, default=32)
    g.set_defaults(fn=cmd_generate)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the tiny model").set_defaults(
        fn=cmd_gradcheck)
    b = sub.add_parser("bench", parents=[common], help="time vs sequence length")
    b.add_argument("--mechanism", choices=["stlt_streaming", "stlt_windowed", "naive_attention"])
    b.add_argument("--N", type=int, action="append")
    b.set_defaults(fn=cmd_bench)
    a = sub.add_parser("analyze", parents=[common], help="error-theory experiments and parameter dumps")
    a.add_argument("kind", choices=["inversion", "window", "perturb", "dump-params"])
    a.set_defaults(fn=cmd_analyze)
    sub.add_parser("dump-params", parents=[common], help="CSV of learned node banks").set_defaults(fn=cmd_dump_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
