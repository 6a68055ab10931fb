"""Run assembly shared by the CLI: datasets, models, gradient checks, paradigm tables."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import grad_check
from .config import DatasetRef, RunConfig
from .corpus import (
    PreferenceTuple, SftExample, evaluate_preference_accuracy, generate_dataset, load_jsonl,
    write_jsonl,
)
from .errors import ConfigError
from .losses import LossConfig, batch_loss
from .model import FeedForwardLM, PolicyModel, TabularBigramLM, build_model
from .trainer import run_sft, train, write_metrics_csv


def load_dataset(cfg: RunConfig) -> list[SftExample]:
    if isinstance(cfg.task, DatasetRef):
        try:
            return load_jsonl(cfg.task.dataset, cfg.vocab_size)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {cfg.task.dataset}: {exc}") from None
    return generate_dataset(cfg.task)


def fresh_model(cfg: RunConfig) -> PolicyModel:
    m = cfg.model
    return build_model(m.kind, cfg.vocab_size, m.dim, m.context_window, m.hidden,
                       seed=cfg.seed, init_scale=m.init_scale)


def initial_model(cfg: RunConfig) -> PolicyModel:
    if cfg.init_checkpoint is None:
        return fresh_model(cfg)
    model = checkpoint.load(cfg.init_checkpoint).model
    if model.vocab_size != cfg.vocab_size:
        raise ConfigError(
            f"checkpoint vocab_size {model.vocab_size} != configured {cfg.vocab_size}"
        )
    return model


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- gradient checks

GRADCHECK_MODELS = {
    "bigram": dict(tol=1e-5),
    "feedforward": dict(tol=1e-4),
}


def _random_tuples(vocab_size: int, n: int, rng: np.random.Generator) -> list[PreferenceTuple]:
    out = []
    for _ in range(n):
        prompt = tuple(int(t) for t in rng.integers(1, vocab_size, size=3))
        chosen = tuple(int(t) for t in rng.integers(1, vocab_size, size=4))
        rejected = tuple(int(t) for t in rng.integers(1, vocab_size, size=4))
        out.append(PreferenceTuple(prompt, chosen, rejected))
    return out


def _probe_models(kind: str, seed: int):
    # probe parameters are drawn from [-1, 1]: at the tiny training init many
    # gradient entries sit below the roundoff floor of central differences
    if kind == "bigram":
        make = lambda s: TabularBigramLM(8, seed=s, init_scale=1.0)  # noqa: E731
    else:
        make = lambda s: FeedForwardLM(16, 8, 4, 16, seed=s, init_scale=1.0)  # noqa: E731
    return make(seed), make(seed + 1).clone_frozen()


def gradcheck_report(n_tuples: int = 20, seed: int = 0, step: float = 1e-6,
                     beta: float = 0.1, lam: float = 0.05) -> dict:
    """Finite-difference check of both losses on both model families."""
    rows = []
    for kind, opts in GRADCHECK_MODELS.items():
        policy, reference = _probe_models(kind, seed)
        tuples = _random_tuples(policy.vocab_size, n_tuples, np.random.default_rng(seed))
        for loss in ("dpo", "orpo"):
            lc = LossConfig(loss, beta=beta, lam=lam)
            ref = reference if loss == "dpo" else None
            rep = grad_check(lambda: batch_loss(tuples, policy, ref, lc).loss,
                             policy.params, step=step, tol=opts["tol"])
            rows.append({"model": kind, "loss": loss, "max_rel_error": float(rep.max_rel_error),
                         "tol": opts["tol"], "passed": bool(rep.passed)})
    return {"checks": rows, "passed": all(r["passed"] for r in rows)}


# ---------------------------------------------------------------- paradigm table


def run_pipeline(cfg: RunConfig, dataset, out_dir: str | Path | None = None) -> dict:
    """SFT warm start followed by the configured preference paradigm."""
    policy = fresh_model(cfg)
    run_sft(cfg.sft, dataset, policy)
    sft_acc = evaluate_preference_accuracy(policy, dataset, cfg.trainer.eval_seed)
    result = train(cfg.trainer, dataset, policy)
    acc = evaluate_preference_accuracy(policy, dataset, cfg.trainer.eval_seed)
    summary = {"paradigm": cfg.trainer.paradigm, "sft_pref_acc": sft_acc, "pref_acc": acc,
               "steps": sum(1 for r in result.metrics if r.stage != "skip")}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        shadow = result.ema.shadow if result.ema is not None else None
        summary["checkpoint_sha256"] = checkpoint.save(out / "model.ckpt", policy, shadow,
                                                       f"seed={cfg.seed}")
        write_metrics_csv(result.metrics, out / "metrics.csv")
        summary["metrics_sha256"] = sha256(out / "metrics.csv")
    return summary


def compare_paradigms(cfg: RunConfig, out_dir: str | Path,
                      paradigms=("sapo", "on_policy", "spin", "offline_paired")) -> list[dict]:
    """Run every paradigm twice from one config and write ``paradigms.md`` / ``.json``.

    The second run only checks that the hashes reproduce.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(cfg.task, DatasetRef):
        dataset = load_dataset(cfg)
    else:
        # offline_paired needs rejected responses; the others ignore them
        dataset = generate_dataset(dataclasses.replace(cfg.task, paired=True))
    write_jsonl(dataset, out / "dataset.jsonl")
    rows = []
    for paradigm in paradigms:
        pcfg = dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, paradigm=paradigm))
        first = run_pipeline(pcfg, dataset, out / paradigm / "run1")
        second = run_pipeline(pcfg, dataset, out / paradigm / "run2")
        first["deterministic"] = (
            first["checkpoint_sha256"] == second["checkpoint_sha256"]
            and first["metrics_sha256"] == second["metrics_sha256"]
        )
        rows.append(first)
    lines = ["| paradigm | optimizer steps | SFT pref_acc | final pref_acc | deterministic |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['paradigm']} | {r['steps']} | {r['sft_pref_acc']:.3f} | "
                     f"{r['pref_acc']:.3f} | {'yes' if r['deterministic'] else 'NO'} |")
    (out / "paradigms.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "paradigms.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows
