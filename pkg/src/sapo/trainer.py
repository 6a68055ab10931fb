"""Training loops: SAPO, on-policy and SPIN self-play, offline paired, plain SFT."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _rng
from .augment import AugmentConfig, synthesize_rejected_batch
from .autodiff import backward
from .buffer import ReplayBuffer
from .corpus import PreferenceTuple, SftExample, evaluate_preference_accuracy
from .ema import EmaState, RefStrategy, refresh_reference
from .errors import BufferEmpty, ConfigError, ContractError, NumericError
from .losses import LossConfig, batch_loss, sft_loss
from .model import PolicyModel

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# stream tags for derived seeds
_DATA, _AUG, _BUF, _SPIN, _EPOCH = 1, 2, 3, 4, 5

METRICS_HEADER = (
    "step", "stage", "loss_total", "loss_sft", "loss_contrastive", "margin", "grad_norm",
    "pref_margin_mean", "buffer_size", "buffer_mean_count", "eval_acc",
)


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.5
    update_every: int = 2


@dataclass(frozen=True)
class TrainerConfig:
    loss: str = "orpo"
    paradigm: str = "sapo"
    iterations: int = 500
    sampling_batch: int = 16
    training_batch: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    beta: float = 0.1
    lam: float = 0.05
    orpo_prob: str = "mean"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    buffer_capacity: int = 2000
    ema: EmaConfig = field(default_factory=EmaConfig)
    ref_strategy: RefStrategy = field(default_factory=RefStrategy)
    spin_iters: int = 2
    spin_epochs_per_iter: int = 1
    spin_mode: str = "full_regen"
    epochs: int = 1
    steps_per_sample: int = 1
    eval_every: int = 50
    eval_seed: int = 0
    grad_clip: float | None = 10.0
    seed: int = 0

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.beta, self.lam, self.orpo_prob)

    def validate(self) -> None:
        self.loss_config.validate()
        self.augment.validate()
        self.ref_strategy.validate()
        if self.paradigm not in ("sapo", "on_policy", "spin", "offline_paired"):
            raise ConfigError(f"unknown paradigm {self.paradigm!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.iterations < 1 or self.sampling_batch < 1 or self.training_batch < 1:
            raise ConfigError("iterations, sampling_batch and training_batch must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.buffer_capacity < 1 or self.steps_per_sample < 1 or self.eval_every < 0:
            raise ConfigError("buffer_capacity and steps_per_sample must be >= 1, eval_every >= 0")
        if self.spin_iters < 0 or self.spin_epochs_per_iter < 0 or self.epochs < 0:
            raise ConfigError("epoch and iteration counts must be >= 0")
        if self.spin_mode not in ("segment", "full_regen"):
            raise ConfigError(f"unknown spin_mode {self.spin_mode!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        if not 0.0 <= self.ema.alpha <= 1.0 or self.ema.update_every < 1:
            raise ConfigError("ema.alpha must lie in [0, 1] and ema.update_every >= 1")


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 1
    lr: float = 1e-2
    batch_size: int = 16
    optimizer: str = "adam"
    grad_clip: float | None = 10.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("sft needs epochs >= 0, batch_size >= 1, lr >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class StepMetrics:
    step: int
    stage: str
    loss_total: float | None = None
    loss_sft: float | None = None
    loss_contrastive: float | None = None
    margin: float | None = None
    grad_norm: float | None = None
    pref_margin_mean: float | None = None
    buffer_size: int | None = None
    buffer_mean_count: float | None = None
    eval_acc: float | None = None

    def csv_row(self) -> list[str]:
        return ["" if v is None else repr(v) if isinstance(v, float) else str(v)
                for v in asdict(self).values()]


def write_metrics_csv(rows: Sequence[StepMetrics], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


@dataclass
class TrainResult:
    policy: PolicyModel
    metrics: list[StepMetrics]
    ema: EmaState | None = None
    reference: PolicyModel | None = None
    buffer: ReplayBuffer | None = None


# ---------------------------------------------------------------- optimizer


class Optimizer:
    """SGD or bias-corrected Adam over a model's flat parameter vector."""

    def __init__(self, kind: str, lr: float, n_params: int, grad_clip: float | None = None):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.grad_clip = grad_clip
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, model: PolicyModel) -> float:
        """Apply one update from the model's accumulated grads; returns the pre-clip norm."""
        grads = model.grads()
        norm = float(np.sqrt(np.dot(grads, grads)))
        if not np.isfinite(norm):
            raise NumericError("non-finite gradient")
        if self.grad_clip is not None and norm > self.grad_clip:
            grads = grads * (self.grad_clip / norm)
        params = model.get_params()
        sgd_or_adam_step(params, grads, self, self.lr)
        model.set_params(params)
        model.zero_grad()
        return norm


def sgd_or_adam_step(params: np.ndarray, grads: np.ndarray, state: Optimizer, lr: float) -> None:
    """In-place update of ``params``."""
    if params.shape != grads.shape:
        raise ContractError(f"params {params.shape} vs grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    if state.kind == "sgd":
        params -= lr * grads
        return
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1 - ADAM_BETA1**state.t)
    v_hat = state.v / (1 - ADAM_BETA2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------- shared pieces

StepCallback = Callable[[StepMetrics, "TrainResult"], None]


def _train_step(policy, reference, batch, cfg: TrainerConfig, opt: Optimizer, step: int, stage: str):
    breakdown = batch_loss(batch, policy, reference, cfg.loss_config)
    if not np.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss at step {step}")
    policy.zero_grad()
    backward(breakdown.loss)
    norm = opt.step(policy)
    return StepMetrics(
        step=step, stage=stage, loss_total=breakdown.total, loss_sft=breakdown.sft_term,
        loss_contrastive=breakdown.contrastive_term, margin=breakdown.margin, grad_norm=norm,
        pref_margin_mean=breakdown.pref_margin,
    )


def _maybe_eval(row: StepMetrics, policy, cfg: TrainerConfig, eval_examples, iteration: int):
    if cfg.eval_every and eval_examples and iteration % cfg.eval_every == 0:
        row.eval_acc = evaluate_preference_accuracy(policy, eval_examples, cfg.eval_seed)


def _check(cfg: TrainerConfig, dataset: Sequence[SftExample]) -> None:
    cfg.validate()
    if not dataset:
        raise ConfigError("dataset is empty")


def _make_reference(cfg: TrainerConfig, policy: PolicyModel) -> PolicyModel | None:
    return policy.clone_frozen() if cfg.loss == "dpo" else None


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int, tag: int = 0):
    order = _rng.rng(seed, _EPOCH, tag, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------- paradigms


def _self_play(cfg: TrainerConfig, dataset, policy, eval_examples, callback, use_buffer: bool):
    _check(cfg, dataset)
    eval_examples = dataset if eval_examples is None else eval_examples
    opt = Optimizer(cfg.optimizer, cfg.lr, policy.param_count, cfg.grad_clip)
    ema = EmaState(policy.get_params(), cfg.ema.alpha, cfg.ema.update_every)
    reference = _make_reference(cfg, policy)
    buffer = ReplayBuffer(cfg.buffer_capacity) if use_buffer else None
    shadow_model = policy.clone_frozen() if use_buffer else None
    result = TrainResult(policy, [], ema, reference, buffer)
    step = 0
    for it in range(1, cfg.iterations + 1):
        # sampling stage
        picks = _rng.rng(cfg.seed, _DATA, it).integers(len(dataset), size=cfg.sampling_batch)
        items = [(dataset[k].prompt, dataset[k].chosen) for k in picks]
        seeds = [_rng.derive_seed(cfg.seed, _AUG, it, j) for j in range(len(items))]
        if use_buffer:
            shadow_model.set_params(ema.shadow)
            generator = shadow_model
        else:
            generator = policy
        fresh = [t for t in synthesize_rejected_batch(items, generator, cfg.augment, seeds) if t]
        if use_buffer:
            for t in fresh:
                buffer.push(t)

        # training stage
        for s in range(cfg.steps_per_sample):
            try:
                batch = (
                    buffer.sample_batch(cfg.training_batch, _rng.derive_seed(cfg.seed, _BUF, it, s))
                    if use_buffer else fresh
                )
                if not batch:
                    raise BufferEmpty("no fresh tuples")
            except BufferEmpty:
                log.info("iteration %d: nothing to train on, training stage skipped", it)
                row = StepMetrics(step=step, stage="skip")
            else:
                step += 1
                row = _train_step(policy, reference, batch, cfg, opt, step, "train")
                ema.update(policy.get_params())
                if reference is not None:
                    refresh_reference(cfg.ref_strategy, reference, policy, ema, step)
            if use_buffer:
                st = buffer.stats()
                row.buffer_size, row.buffer_mean_count = st.size, st.mean_count
            if s == cfg.steps_per_sample - 1:
                _maybe_eval(row, policy, cfg, eval_examples, it)
            result.metrics.append(row)
            if callback:
                callback(row, result)
    return result


def run_sapo(cfg: TrainerConfig, dataset: Sequence[SftExample], policy: PolicyModel,
             eval_examples=None, callback: StepCallback | None = None) -> TrainResult:
    """Off-policy loop: EMA generator, FIFO replay buffer, one optimizer step per sampling stage."""
    return _self_play(cfg, dataset, policy, eval_examples, callback, use_buffer=True)


def run_on_policy(cfg: TrainerConfig, dataset: Sequence[SftExample], policy: PolicyModel,
                  eval_examples=None, callback: StepCallback | None = None) -> TrainResult:
    """Ablation: the current policy generates, and each fresh batch is trained on directly."""
    return _self_play(cfg, dataset, policy, eval_examples, callback, use_buffer=False)


def run_spin(cfg: TrainerConfig, dataset: Sequence[SftExample], policy: PolicyModel,
             eval_examples=None, callback: StepCallback | None = None) -> TrainResult:
    """Offline self-play: snapshot, regenerate the whole dataset, train epochs on the fixed set."""
    _check(cfg, dataset)
    eval_examples = dataset if eval_examples is None else eval_examples
    opt = Optimizer(cfg.optimizer, cfg.lr, policy.param_count, cfg.grad_clip)
    aug = AugmentConfig(cfg.augment.n_seg, cfg.augment.temperature,
                        cfg.augment.resample_on_identical, cfg.spin_mode)
    result = TrainResult(policy, [])
    step = 0
    for k in range(cfg.spin_iters):
        snapshot = policy.clone_frozen()
        items = [(ex.prompt, ex.chosen) for ex in dataset]
        seeds = [_rng.derive_seed(cfg.seed, _SPIN, k, j) for j in range(len(items))]
        paired = [t for t in synthesize_rejected_batch(items, snapshot, aug, seeds) if t]
        reference = snapshot if cfg.loss == "dpo" else None
        result.reference = reference
        if not paired:
            log.info("spin iteration %d produced no usable tuples", k)
            continue
        for epoch in range(cfg.spin_epochs_per_iter):
            for idx in _epoch_batches(len(paired), cfg.training_batch, cfg.seed, epoch, tag=k + 1):
                step += 1
                row = _train_step(policy, reference, [paired[i] for i in idx], cfg, opt, step,
                                  f"spin-{k}")
                result.metrics.append(row)
                if callback:
                    callback(row, result)
        if result.metrics:
            _maybe_eval(result.metrics[-1], policy, cfg, eval_examples, cfg.eval_every or 1)
    return result


def run_offline_paired(cfg: TrainerConfig, dataset: Sequence[SftExample], policy: PolicyModel,
                       eval_examples=None, callback: StepCallback | None = None) -> TrainResult:
    """Epoch training on pre-collected (prompt, chosen, rejected) triples."""
    _check(cfg, dataset)
    if any(ex.rejected is None for ex in dataset):
        raise ConfigError("offline_paired needs a 'rejected' response on every example")
    eval_examples = dataset if eval_examples is None else eval_examples
    opt = Optimizer(cfg.optimizer, cfg.lr, policy.param_count, cfg.grad_clip)
    reference = _make_reference(cfg, policy)
    tuples = [PreferenceTuple(ex.prompt, ex.chosen, ex.rejected) for ex in dataset]
    result = TrainResult(policy, [], reference=reference)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _epoch_batches(len(tuples), cfg.training_batch, cfg.seed, epoch):
            step += 1
            row = _train_step(policy, reference, [tuples[i] for i in idx], cfg, opt, step,
                              f"epoch-{epoch}")
            result.metrics.append(row)
            if callback:
                callback(row, result)
        if result.metrics:
            _maybe_eval(result.metrics[-1], policy, cfg, eval_examples, cfg.eval_every or 1)
    return result


def run_sft(cfg: SftConfig, dataset: Sequence[SftExample], policy: PolicyModel) -> TrainResult:
    """Mean per-token NLL on chosen responses; same batching/shuffle scheme as offline training."""
    cfg.validate()
    if not dataset:
        raise ConfigError("dataset is empty")
    opt = Optimizer(cfg.optimizer, cfg.lr, policy.param_count, cfg.grad_clip)
    result = TrainResult(policy, [])
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            step += 1
            loss = sft_loss(policy, [(dataset[i].prompt, dataset[i].chosen) for i in idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite SFT loss at step {step}")
            policy.zero_grad()
            backward(loss)
            norm = opt.step(policy)
            result.metrics.append(StepMetrics(step=step, stage=f"epoch-{epoch}", loss_total=value,
                                              loss_sft=value, grad_norm=norm))
    return result


PARADIGMS = {
    "sapo": run_sapo,
    "on_policy": run_on_policy,
    "spin": run_spin,
    "offline_paired": run_offline_paired,
}


def train(cfg: TrainerConfig, dataset, policy, eval_examples=None, callback=None) -> TrainResult:
    cfg.validate()
    return PARADIGMS[cfg.paradigm](cfg, dataset, policy, eval_examples, callback)
