"""Command-line front end.

Subcommands: verify (acceptance suites), bench (flop reports over a context
sweep), train (toy hybrid run), gate-trace (routing decisions as CSV), fit
(power-law fit of a compute/loss CSV), sweep (fixed-sparsity segmentation
sweep). Exit codes: 0 success, 1 verification failure, 2 usage/config error.

The seed comes from --seed, else the MOBA_SEED environment variable, else a
fixed default; every subcommand is deterministic given its seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .attention import AttentionConfig
from .errors import MobaError
from .gating import build_routing_table, make_partition
from .harness import flop_report, segmentation_sweep
from .metrics import fit_power_law
from .model import (
    TrainSchedule,
    default_toy_config,
    layer_stack_config_from_dict,
    synthetic_corpus,
    train_run,
    train_schedule_from_dict,
)
from .tensor import seeded_random
from .verify import DEFAULT_SEED, SUITES, run_suite


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MOBA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise MobaError(f"MOBA_SEED must be an integer, got {env!r}") from exc
    return DEFAULT_SEED


def _out_stream(path: str | None):
    return open(path, "w", newline="") if path else sys.stdout


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_verify(args) -> int:
    seed = _resolve_seed(args)
    names = args.suite or list(SUITES)
    failures = 0
    for name in names:
        if name not in SUITES:
            print(f"unknown suite {name!r}; available: {', '.join(SUITES)}", file=sys.stderr)
            return 2
        result = run_suite(name, seed)
        print(f"{'PASS' if result.passed else 'FAIL'} {result.name}: {result.detail}")
        failures += 0 if result.passed else 1
    print(f"{len(names) - failures}/{len(names)} suites passed (seed {seed})")
    return 1 if failures else 0


def cmd_bench(args) -> int:
    config = AttentionConfig(
        mode="moba", num_heads=args.heads, head_dim=args.head_dim,
        block_size=args.block_size, top_k=args.top_k,
    )
    out = _out_stream(args.out)
    try:
        writer = csv.writer(out)
        writer.writerow([
            "context_length", "block_size", "top_k", "num_heads", "head_dim",
            "dense_flops", "moba_flops", "gating_flops", "ratio",
            "theoretical_ratio", "sparsity",
        ])
        for n in args.context:
            r = flop_report(config, n)
            writer.writerow([
                r.context_length, r.block_size, r.top_k, r.num_heads, r.head_dim,
                r.dense_flops, r.moba_flops, r.gating_flops,
                repr(r.ratio), repr(r.theoretical_ratio), repr(r.sparsity),
            ])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _load_train_setup(args):
    config_dict = {}
    if args.config:
        with open(args.config) as fh:
            config_dict = json.load(fh)
        if not isinstance(config_dict, dict):
            raise MobaError("config file must hold a JSON object")
    if "model" in config_dict:
        config = layer_stack_config_from_dict(config_dict["model"])
    else:
        config = default_toy_config()
    sched_dict = dict(config_dict.get("schedule", {}))
    overrides = {
        "total_steps": args.steps,
        "context_length": args.context,
        "switch_fraction": args.switch_fraction,
        "learning_rate": args.learning_rate,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            sched_dict[key] = value
    sched_dict.setdefault("total_steps", 100)
    sched_dict.setdefault("context_length", min(128, config.max_context))
    sched_dict.setdefault("seed", _resolve_seed(args))
    schedule = train_schedule_from_dict(sched_dict)
    return config, schedule


def cmd_train(args) -> int:
    config, schedule = _load_train_setup(args)
    if args.corpus:
        corpus = np.frombuffer(open(args.corpus, "rb").read(), dtype=np.uint8).astype(np.int64)
        if corpus.max(initial=0) >= config.vocab_size:
            raise MobaError(
                f"corpus bytes exceed vocab_size {config.vocab_size}; "
                "raise vocab_size to 256 for raw byte corpora"
            )
    else:
        corpus = synthetic_corpus(
            length=max(args.corpus_length, schedule.context_length + 1),
            vocab_size=config.vocab_size,
            seed=schedule.seed,
        )
    os.makedirs(args.out_dir, exist_ok=True)
    loss_csv = os.path.join(args.out_dir, "loss.csv")
    checkpoint = os.path.join(args.out_dir, "checkpoint.npz")
    result = train_run(corpus, config, schedule, loss_csv_path=loss_csv, checkpoint_path=checkpoint)
    first, last = result.records[0], result.records[-1]
    print(f"trained {schedule.total_steps} steps (switch at {schedule.switch_step}); "
          f"loss {first.loss:.4f} -> {last.loss:.4f}")
    print(f"wrote {loss_csv} and {checkpoint}")
    return 0


def cmd_gate_trace(args) -> int:
    seed = _resolve_seed(args)
    partition = make_partition(args.context, args.block_size)
    q = seeded_random((args.context, args.heads, args.head_dim), seed)
    k = seeded_random((args.context, args.heads, args.head_dim), seed + 1)
    table = build_routing_table(q, k, partition, args.top_k)
    out = _out_stream(args.out)
    try:
        writer = csv.writer(out)
        writer.writerow(["query_pos", "head", "selected_blocks"])
        for p in range(1, args.context + 1):
            for j in range(args.heads):
                writer.writerow([p, j, " ".join(str(b) for b in table.selected(p, j))])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_fit(args) -> int:
    points = []
    with open(args.input, newline="") as fh:
        for row in csv.reader(fh):
            if not row or len(row) < 2:
                continue
            try:
                points.append((float(row[0]), float(row[1])))
            except ValueError:
                continue  # header or comment row
    fit = fit_power_law(points)
    print(f"coefficient: {fit.coefficient!r}")
    print(f"exponent: {fit.exponent!r}")
    print(f"log_rms_residual: {fit.log_rms_residual!r}")
    print(f"points: {fit.point_count}")
    return 0


def cmd_sweep(args) -> int:
    entries = segmentation_sweep(
        context_length=args.context,
        sparsity_target=args.sparsity,
        block_counts=args.block_counts,
        num_heads=args.heads,
        head_dim=args.head_dim,
        model_steps=args.model_steps,
        seed=_resolve_seed(args),
    )
    out = _out_stream(args.out)
    try:
        writer = csv.writer(out)
        writer.writerow([
            "block_count", "block_size", "top_k", "sparsity",
            "dense_flops", "moba_flops", "gating_flops", "ratio", "final_loss",
        ])
        for e in entries:
            writer.writerow([
                e.block_count, e.block_size, e.top_k, repr(e.sparsity),
                e.report.dense_flops, e.report.moba_flops, e.report.gating_flops,
                repr(e.report.ratio),
                "" if e.final_loss is None else repr(e.final_loss),
            ])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moba",
        description="Block-sparse attention toolkit: verification, benchmarks, toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the acceptance suites")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="flop reports over a context-length sweep")
    p.add_argument("--context", type=_int_list, default=[8192, 32768],
                   help="comma-separated context lengths")
    p.add_argument("--block-size", type=int, default=512)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("train", help="train the toy decoder under a hybrid schedule")
    p.add_argument("--config", default=None, help="JSON file with model/schedule sections")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--context", type=int, default=None)
    p.add_argument("--switch-fraction", type=float, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus", default=None, help="raw byte file (default: synthetic)")
    p.add_argument("--corpus-length", type=int, default=2048)
    p.add_argument("--out-dir", default="train-out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gate-trace", help="per-(query, head) selected blocks as CSV")
    p.add_argument("--context", type=int, default=256)
    p.add_argument("--block-size", type=int, default=32)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gate_trace)

    p = sub.add_parser("fit", help="fit L = a * C^b to a compute,loss CSV")
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("sweep", help="fixed-sparsity segmentation sweep")
    p.add_argument("--context", type=int, default=2048)
    p.add_argument("--sparsity", type=float, default=0.75)
    p.add_argument("--block-counts", type=_int_list, default=[8, 16, 32, 64, 128])
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--model-steps", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MobaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
