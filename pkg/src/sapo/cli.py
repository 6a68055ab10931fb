"""``sapo`` command line: gen-data, sft, train, eval, gradcheck, compare.

Exit codes: 0 success, 2 configuration/validation, 3 data format, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from .config import DatasetRef, RunConfig, dump_config, load_config, resolve
from .corpus import evaluate_preference_accuracy, mean_chosen_nll, write_jsonl
from .errors import ConfigError, SapoError
from .experiments import (
    compare_paradigms, gradcheck_report, initial_model, load_dataset, sha256,
)
from .trainer import StepMetrics, TrainResult, run_sft, train, write_metrics_csv

log = logging.getLogger("sapo")

LOCK_NAME = ".sapo.lock"


@contextlib.contextmanager
def locked_output(path: str | Path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out} is in use (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else resolve(RunConfig())
    changes = {}
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    if getattr(args, "dataset", None):
        changes["task"] = DatasetRef(str(Path(args.dataset).resolve()), cfg.vocab_size)
    if getattr(args, "init", None):
        changes["init_checkpoint"] = str(Path(args.init).resolve())
    return resolve(dataclasses.replace(cfg, **changes)) if changes else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if isinstance(cfg.task, DatasetRef):
        raise ConfigError("gen-data needs a task specification, not a dataset path")
    with locked_output(cfg.output_dir) as out:
        dump_config(cfg, out / "config.resolved.json")
        examples = load_dataset(cfg)
        write_jsonl(examples, out / "dataset.jsonl")
    _emit({"dataset": str(out / "dataset.jsonl"), "count": len(examples)})
    return 0


def cmd_sft(args) -> int:
    cfg = _config(args)
    with locked_output(cfg.output_dir) as out:
        dump_config(cfg, out / "config.resolved.json")
        dataset = load_dataset(cfg)
        policy = initial_model(cfg)
        result = run_sft(cfg.sft, dataset, policy)
        digest = checkpoint.save(out / "model.ckpt", policy, rng_note=f"seed={cfg.seed}")
        write_metrics_csv(result.metrics, out / "metrics.csv")
    _emit({"checkpoint": str(out / "model.ckpt"), "sha256": digest, "steps": len(result.metrics)})
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    with locked_output(cfg.output_dir) as out:
        dump_config(cfg, out / "config.resolved.json")
        dataset = load_dataset(cfg)
        policy = initial_model(cfg)

        def periodic(row: StepMetrics, result: TrainResult) -> None:
            if cfg.checkpoint_every and row.stage != "skip" and row.step % cfg.checkpoint_every == 0:
                shadow = result.ema.shadow if result.ema is not None else None
                checkpoint.save(out / f"step-{row.step:06d}.ckpt", policy, shadow,
                                f"seed={cfg.seed}")

        result = train(cfg.trainer, dataset, policy, callback=periodic)
        shadow = result.ema.shadow if result.ema is not None else None
        digest = checkpoint.save(out / "model.ckpt", policy, shadow, f"seed={cfg.seed}")
        write_metrics_csv(result.metrics, out / "metrics.csv")
    _emit({
        "checkpoint": str(out / "model.ckpt"),
        "sha256": digest,
        "metrics_sha256": sha256(out / "metrics.csv"),
        "rows": len(result.metrics),
    })
    return 0


def cmd_eval(args) -> int:
    ckpt = checkpoint.load(args.checkpoint)
    if args.dataset:
        from .corpus import load_jsonl

        try:
            dataset = load_jsonl(args.dataset, ckpt.model.vocab_size)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {args.dataset}: {exc}") from None
    elif args.config:
        dataset = load_dataset(load_config(args.config))
    else:
        raise ConfigError("eval needs --dataset or --config")
    _emit({
        "pref_acc": evaluate_preference_accuracy(ckpt.model, dataset, args.corruptor_seed),
        "mean_chosen_nll": mean_chosen_nll(ckpt.model, dataset),
    })
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(n_tuples=args.tuples, seed=args.seed)
    _emit(report)
    return 0 if report["passed"] else 4


def cmd_compare(args) -> int:
    cfg = _config(args)
    with locked_output(cfg.output_dir) as out:
        dump_config(cfg, out / "config.resolved.json")
        rows = compare_paradigms(cfg, out)
    print((out / "paradigms.md").read_text(encoding="utf-8"), end="")
    return 0 if all(r["deterministic"] for r in rows) else 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sapo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as JSONL")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sft", help="supervised warm start on chosen responses")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("train", help="preference training (sapo, on_policy, spin, offline_paired)")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="preference accuracy and chosen NLL of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--config")
    p.add_argument("--corruptor-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of both losses")
    p.add_argument("--config", help="accepted for symmetry; the probes are fixed")
    p.add_argument("--tuples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="paradigm comparison table under one budget")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SapoError as exc:
        print(f"sapo {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"sapo {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
