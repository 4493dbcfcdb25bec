"""Command-line front end.

Commands: train, eval, sweep, analyze, verify, gradcheck.  All settings
flow through one flat key=value config file; any key can be overridden
with ``--set key=value``.  The environment variable MUTE_SEED supplies a
seed when neither the config nor --seed does.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import time

from .analysis import diversity_report, dump_weights, write_diversity
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, parse_file, resolve
from .errors import ConfigError, MuteLabError
from .model import MuteModel
from .tasks import batchify, generate_pairs
from .trainer import Trainer, evaluate
from . import verify

SWEEP_SAMPLE_RATES = (0.5, 0.75, 0.85, 1.0)
SWEEP_UNITS = (1, 2, 3, 4, 5, 6)


def _gather(args) -> tuple:
    """The user's settings before resolution: (file values, overrides)."""
    file_values = parse_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    return file_values, overrides


def _resolve(args) -> RunConfig:
    file_values, overrides = _gather(args)
    return resolve(file_values, overrides)


def _train_one(rc: RunConfig, resume=None) -> tuple:
    if resume:
        trainer = Trainer.resume(resume, rc.task, rc.train, rc.out_dir)
    else:
        model = MuteModel(rc.model, seed=rc.seed)
        trainer = Trainer(model, rc.task, rc.train, rc.out_dir)
    metrics = trainer.train()
    final = os.path.join(rc.out_dir, "final.ckpt")
    save_checkpoint(final, trainer.model, trainer.step,
                    adam=(trainer.adam.t, trainer.adam.m, trainer.adam.v))
    return trainer, metrics


def cmd_train(args) -> int:
    rc = _resolve(args)
    rc.write_resolved()
    trainer, metrics = _train_one(rc, resume=args.resume)
    print(f"steps\t{trainer.step}")
    print(f"token_acc\t{metrics['token_acc']:.6f}")
    print(f"exact_match\t{metrics['exact_match']:.6f}")
    for layer, hard, pen in trainer.shuffle_summary():
        print(f"shuffle_l{layer}\thardness={hard:.6f}\tpenalty={pen:.6f}")
    return 0


def cmd_eval(args) -> int:
    rc = _resolve(args)
    model = restore_model(load_checkpoint(args.ckpt))
    pairs = generate_pairs(rc.task, rc.train.eval_pairs, split="eval")
    metrics = evaluate(model, batchify(pairs, rc.train.batch_tokens))
    print(f"token_acc\t{metrics['token_acc']:.6f}")
    print(f"exact_match\t{metrics['exact_match']:.6f}")
    print(f"sequences\t{metrics['sequences']}")
    return 0


def measure_decode_speed(model, task, batch_tokens: int,
                         probe_sequences: int = 2000, runs: int = 3) -> float:
    """Median greedy-decode throughput in tokens/sec over a fixed probe."""
    pairs = generate_pairs(task, probe_sequences, split="eval")
    batches = batchify(pairs, batch_tokens)
    rates = []
    for _ in range(runs):
        produced = 0
        start = time.monotonic()
        for batch in batches:
            hyps = model.greedy_decode_batch(
                batch.src, max_len=batch.tgt_out.shape[1] + 2)
            produced += sum(len(h) for h in hyps)
        elapsed = max(time.monotonic() - start, 1e-9)
        rates.append(produced / elapsed)
    return statistics.median(rates)


def cmd_sweep(args) -> int:
    rc = _resolve(args)
    file_values, overrides = _gather(args)
    if args.axis == "units":
        values = SWEEP_UNITS
    else:
        values = SWEEP_SAMPLE_RATES
    os.makedirs(rc.out_dir, exist_ok=True)
    rows = []
    for value in values:
        # Rebuild each row from the pre-resolution settings so derived
        # keys (an "auto" noise cycle in particular) re-expand for the
        # row's own unit count instead of echoing the base config's.
        sub = dict(overrides)
        sub[args.axis] = str(value)
        sub["out_dir"] = os.path.join(rc.out_dir, f"{args.axis}_{value}")
        sub_rc = resolve(file_values, sub)
        sub_rc.write_resolved()
        _, metrics = _train_one(sub_rc)
        model = restore_model(
            load_checkpoint(os.path.join(sub_rc.out_dir, "final.ckpt")))
        speed = measure_decode_speed(model, sub_rc.task,
                                     sub_rc.train.batch_tokens,
                                     probe_sequences=args.probe)
        rows.append((value, metrics["token_acc"], metrics["exact_match"],
                     speed))
    table = os.path.join(rc.out_dir, f"sweep_{args.axis}.tsv")
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(f"{args.axis}\ttoken_acc\texact_match\ttokens_per_sec\n")
        for value, acc, exact, speed in rows:
            fh.write(f"{value}\t{acc:.6f}\t{exact:.6f}\t{speed:.1f}\n")
    with open(table, "r", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_analyze(args) -> int:
    rc = _resolve(args)
    model = restore_model(load_checkpoint(args.ckpt))
    os.makedirs(rc.out_dir, exist_ok=True)
    pairs = generate_pairs(rc.task, args.probes, split="eval")
    written = dump_weights(model, pairs[0][0], rc.out_dir,
                           threshold=args.threshold)
    if model.config.units >= 2:
        batches = batchify(pairs, rc.train.batch_tokens)
        report = diversity_report(model, batches)
        written.append(write_diversity(report, rc.out_dir))
    for path in written:
        print(path)
    return 0


def cmd_verify(args) -> int:
    results = verify.run(args.suite or None)
    failed = False
    for name, (ok, detail) in results.items():
        print(f"{name}\t{'PASS' if ok else 'FAIL'}\t{detail}")
        failed = failed or not ok
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    report = verify.full_model_grad_check(d=args.d, units=args.units,
                                          n=args.n, n_enc=args.layers,
                                          n_dec=args.layers, h=args.h)
    print(f"coords\t{report['coords']}")
    print(f"seconds\t{report['seconds']:.1f}")
    print(f"max_rel_err\t{report['max_err']:.3g}")
    ok = report["max_err"] < args.tol
    print(f"result\t{'PASS' if ok else 'FAIL'} (tol {args.tol})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mute-lab",
        description="Multi-unit transformer laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one configuration key")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate along one axis")
    common(p)
    p.add_argument("--axis", choices=("units", "sample_rate"),
                   default="units")
    p.add_argument("--probe", type=int, default=2000,
                   help="decode-speed probe size in sequences")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze", help="dump weights and diversity tables")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--suite", action="append",
                   help="suite name (repeatable; default all)")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check a model")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--units", type=int, default=4)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MuteLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
