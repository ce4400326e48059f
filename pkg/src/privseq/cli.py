"""Command-line entry point: ``privseq <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import clipping, privacy, reattention, seqdata, traineval, transformer
from .numkit import Rng


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.split(",") if x]


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.split(",") if x]


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _add_data_args(p) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="interaction log path")
    g.add_argument("--synthetic", metavar="N_USERS,N_ITEMS", help="generate a Zipf log instead of reading one")
    p.add_argument("--format", default="tsv", choices=seqdata.FORMATS)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--data-seed", type=int, default=0, help="seed for --synthetic")
    p.add_argument("--zipf-exponent", type=float, default=1.1)
    p.add_argument("--structure", choices=seqdata.STRUCTURES, default="successor", help="synthetic transition rule")


def _load_dataset(args) -> seqdata.SequenceDataset:
    if args.synthetic:
        n_users, n_items = _ints(args.synthetic)
        log = seqdata.synthetic_zipf_log(n_users, n_items, Rng(args.data_seed, "data"),
                                          exponent=args.zipf_exponent, structure=args.structure)
    else:
        with open(args.data, "rb") as fh:
            log = seqdata.ingest_interactions(fh, args.format)
    return seqdata.build_dataset(log, min_count=args.min_count, max_len=args.max_len)


def _train_config(args, **override) -> traineval.TrainConfig:
    kw = dict(
        epsilon=args.epsilon,
        sigma_dp=args.sigma,
        delta=args.delta,
        epochs=args.epochs,
        warmup_fraction=args.warmup,
        batch_size=getattr(args, "batch", None),
        q=getattr(args, "q", None),
        sampling=args.sampling,
        learning_rate=getattr(args, "lr", 0.0),
        weight_decay=args.weight_decay,
        C=args.C,
        clip_mode=args.clip_mode,
        d=args.d,
        n_blocks=args.blocks,
        n_heads=args.heads,
        d_ff=args.d_ff,
        dropout=args.dropout,
        activation=args.activation,
        reattention=args.reattention,
        renormalize=not args.no_renorm,
        sharing=args.sharing,
        seed=getattr(args, "seed", 0),
        eval_every=args.eval_every,
        K=args.K,
        exclude_seen=args.exclude_seen,
        sampled_negatives=args.sampled_negatives,
        record_runtime=args.record_runtime,
    )
    kw.update(override)
    return traineval.TrainConfig(**kw)


def _add_train_args(p, grid: bool = False) -> None:
    _add_data_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--sigma", type=float, help="noise multiplier; 0 disables DP noise")
    p.add_argument("--delta", type=float, help="default 1/(10 * users)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--warmup", type=float, default=0.2)
    if not grid:
        b = p.add_mutually_exclusive_group(required=True)
        b.add_argument("--batch", type=int)
        b.add_argument("--q", type=float)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampling", choices=("poisson", "uniform"), default="poisson")
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--clip-mode", choices=clipping.CLIP_MODES, default="normalize")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--activation", choices=("relu", "gelu"), default="relu")
    p.add_argument("--reattention", type=_on_off, default=False, metavar="{on,off}")
    p.add_argument("--no-renorm", action="store_true", help="skip row renormalisation after the attention correction")
    p.add_argument("--sharing", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--eval-every", type=int, default=5)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--exclude-seen", action="store_true")
    p.add_argument("--sampled-negatives", type=int, default=0)
    p.add_argument("--record-runtime", action="store_true", help="add wall time to the report (breaks byte-identity)")


def cmd_train(args) -> int:
    ds = _load_dataset(args)
    cfg = _train_config(args)
    try:
        params, report = traineval.train(cfg, ds)
    except traineval.PrivacyBudgetExceeded as exc:
        _emit(exc.report, args.out)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.checkpoint:
        transformer.save_checkpoint(params, args.checkpoint)
    _emit(report, args.out)
    return 0


def cmd_eval(args) -> int:
    ds = _load_dataset(args)
    params = transformer.load_checkpoint(args.checkpoint)
    rng = Rng(args.seed, "eval")
    ndcg, hit = traineval.evaluate(params, ds, args.K, exclude_seen=args.exclude_seen,
                                   sampled_negatives=args.sampled_negatives, rng=rng)
    _emit({"checkpoint": args.checkpoint, "K": args.K, "ndcg": ndcg, "hit": hit, "users": ds.n_users})
    return 0


def cmd_summary(args) -> int:
    _emit(seqdata.dataset_summary(_load_dataset(args)))
    return 0


def cmd_synth(args) -> int:
    log = seqdata.synthetic_zipf_log(args.users, args.items, Rng(args.seed, "data"), exponent=args.zipf_exponent,
                                     structure=args.structure)
    Path(args.out).write_bytes(seqdata.write_tsv(log))
    return 0


def cmd_bench_clip(args) -> int:
    _emit(clipping.bench_clip(args.B, args.L, args.M, args.d, args.method, args.repeats, args.seed))
    return 0


def cmd_accountant(args) -> int:
    steps = args.steps
    out = {"delta": args.delta, "q": args.q, "steps": steps}
    if args.epsilon is not None:
        out["epsilon_target"] = args.epsilon
        sigma = privacy.calibrate_sigma(args.epsilon, args.delta, args.q, steps)
        out["sigma_dp"] = sigma
        out["epsilon"] = privacy.epsilon_for(sigma, args.q, steps, args.delta)
    else:
        led = privacy.PrivacyLedger(args.sigma, args.q, args.delta, steps)
        out.update(led.to_dict())
    _emit(out)
    return 0


def cmd_distraction(args) -> int:
    rows = reattention.distraction_table(args.d, args.sigma_grid, args.samples, args.seed, args.L)
    _emit({"d": args.d, "L": args.L, "samples": args.samples, "rows": rows})
    return 0


def cmd_check_grad(args) -> int:
    cfg = transformer.ModelConfig(vocab_size=args.M, max_len=args.L, d=args.d, n_blocks=args.blocks,
                                  n_heads=args.heads, dropout=0.0, sharing=args.sharing, activation=args.activation)
    rng = Rng(args.seed, "init")
    params = transformer.init_params(cfg, rng)
    data = Rng(args.seed, "data")
    tok = data.integers(0, args.M + 1, size=(args.B, args.L))
    tok[:, -1] = np.maximum(tok[:, -1], 1)
    tgt = np.where(tok > 0, data.integers(1, args.M + 1, size=(args.B, args.L)), 0)
    err, detail = transformer.finite_difference_check(params, tok, tgt, Rng(args.seed, "check"), n_coords=args.coords,
                                                      return_details=True)
    groups = sorted({name for name, *_ in detail})
    _emit({"max_relative_error": err, "coords": len(detail), "groups": groups, "passed": bool(err < args.tol)})
    return 0 if err < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privseq", description="Differentially private next-token Transformer training")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate, writing a JSON report")
    _add_train_args(p)
    p.add_argument("--out", help="report path (stdout if omitted)")
    p.add_argument("--checkpoint", help="save final parameters here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--exclude-seen", action="store_true")
    p.add_argument("--sampled-negatives", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summary", help="dataset statistics")
    _add_data_args(p)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("synth", help="write a synthetic Zipf interaction log as TSV")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--zipf-exponent", type=float, default=1.1)
    p.add_argument("--structure", choices=seqdata.STRUCTURES, default="successor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grid", help="batch x learning-rate grid with seed replicates")
    _add_train_args(p, grid=True)
    p.add_argument("--batches", type=_ints, required=True)
    p.add_argument("--lrs", type=_floats, required=True)
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--csv", help="write the mean±std matrix here")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench-clip", help="per-sample norm timing and buffer sizes")
    p.add_argument("--B", type=int, default=32)
    p.add_argument("--L", type=int, default=50)
    p.add_argument("--M", type=int, default=1000)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--method", choices=("naive", "ghost", "phantom"), default="phantom")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_clip)

    p = sub.add_parser("accountant", help="sigma from epsilon, or epsilon from sigma")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--sigma", type=float)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("distraction", help="attention under noisy keys, before and after correction")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--sigma-grid", type=_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_distraction)

    p = sub.add_parser("check-grad", help="finite-difference check of the manual backward pass")
    p.add_argument("--M", type=int, default=12)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--B", type=int, default=3)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--activation", choices=("relu", "gelu"), default="gelu")
    p.add_argument("--sharing", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_grad)
    return ap


def cmd_grid(args) -> int:
    ds = _load_dataset(args)
    base = _train_config(args, batch_size=args.batches[0], q=None, learning_rate=0.0, seed=args.seeds[0])
    out = traineval.run_experiment_grid(base, ds, args.lrs, args.batches, args.seeds)
    if args.csv:
        Path(args.csv).write_text(out["csv"])
    _emit(out["cells"])
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, privacy.CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
