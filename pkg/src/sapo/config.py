"""Run configuration files: strict JSON -> dataclasses, presets, resolution."""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import TaskSpec
from .errors import ConfigError
from .trainer import SftConfig, TrainerConfig

SEED_ENV = "SAPO_SEED"

# preset values act as defaults; explicit keys in the file still win
PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "trainer": {"beta": 0.1, "lam": 0.05, "buffer_capacity": 2000,
                    "ema": {"alpha": 0.5, "update_every": 2}, "augment": {"n_seg": 4}},
    },
    "paper": {
        "trainer": {"beta": 0.1, "lam": 0.05, "buffer_capacity": 2000,
                    "ema": {"alpha": 0.5, "update_every": 2}, "augment": {"n_seg": 256}},
    },
}


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "feedforward"
    vocab_size: int | None = None  # defaults to the task's vocabulary
    dim: int = 16
    context_window: int = 8
    hidden: int = 64
    init_scale: float = 0.05


@dataclass(frozen=True)
class DatasetRef:
    dataset: str
    vocab_size: int | None = None


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec | DatasetRef = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    preset: str = "desk"
    output_dir: str = "runs/default"
    init_checkpoint: str | None = None
    checkpoint_every: int = 0
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        if self.model.vocab_size is not None:
            return self.model.vocab_size
        if isinstance(self.task, TaskSpec):
            return self.task.vocab_size
        if self.task.vocab_size is not None:
            return self.task.vocab_size
        raise ConfigError("vocab_size must be given in model or task when loading a dataset")


# ---------------------------------------------------------------- strict loading


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[-1] if len(errors) == 1 else f"{where}: no matching form ({'; '.join(errors)})")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def build(cls, data: dict, where: str = "config"):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def _task(data) -> TaskSpec | DatasetRef:
    if not isinstance(data, dict):
        raise ConfigError("task: expected an object")
    if "dataset" in data:
        return build(DatasetRef, data, "task")
    return build(TaskSpec, data, "task")


def parse_config(raw: dict, env: dict | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    env = os.environ if env is None else env
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    for section in ("trainer", "sft"):
        if isinstance(raw.get(section), dict) and "seed" in raw[section]:
            raise ConfigError(f"{section}.seed: set the run seed at top level")
    merged = _merge(PRESETS[preset], raw)
    task = _task(merged.pop("task", {}))
    cfg = build(RunConfig, merged, "config")
    cfg = dataclasses.replace(cfg, task=task)
    if env.get(SEED_ENV):
        try:
            cfg = dataclasses.replace(cfg, seed=int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be a decimal integer") from None
    return resolve(cfg)


def resolve(cfg: RunConfig) -> RunConfig:
    """Push the run seed into sections and fill derived defaults."""
    model = cfg.model
    if model.vocab_size is None:
        model = dataclasses.replace(model, vocab_size=cfg.vocab_size)
    cfg = dataclasses.replace(
        cfg,
        model=model,
        trainer=dataclasses.replace(cfg.trainer, seed=cfg.seed),
        sft=dataclasses.replace(cfg.sft, seed=cfg.seed),
    )
    cfg.trainer.validate()
    cfg.sft.validate()
    if isinstance(cfg.task, TaskSpec):
        cfg.task.validate()
        if cfg.task.vocab_size != model.vocab_size:
            raise ConfigError("model.vocab_size differs from task.vocab_size")
    if cfg.checkpoint_every < 0:
        raise ConfigError("checkpoint_every must be >= 0")
    return cfg


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(raw, env)


def to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["trainer"].pop("seed")
    out["sft"].pop("seed")
    return out


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
        fh.write("\n")

