"""Autoregressive policy models, sequence scoring and sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _rng
from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

PAD = 0


class PolicyModel:
    """Base class: a next-token distribution over a fixed-width left-padded context."""

    kind: str
    vocab_size: int
    context_window: int
    params: list[Tensor]

    def logits(self, contexts: np.ndarray) -> Tensor:
        raise NotImplementedError

    def shapes(self) -> dict[str, list[int]]:
        return {p.name: list(p.shape) for p in self.params}

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def trainable(self) -> bool:
        return self.params[0].requires_grad

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ContractError(f"expected {self.param_count} parameters, got shape {flat.shape}")
        offset = 0
        for p in self.params:
            p.data[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grads(self) -> np.ndarray:
        return np.concatenate(
            [(np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)) for p in self.params]
        )

    def clone_frozen(self) -> "PolicyModel":
        clone = self._blank()
        clone.set_params(self.get_params())
        for p in clone.params:
            p.requires_grad = False
        return clone

    def _blank(self) -> "PolicyModel":
        raise NotImplementedError

    def next_logprobs(self, contexts: np.ndarray) -> Tensor:
        return ad.log_softmax(self.logits(contexts))


def _init(rng: np.random.Generator, shape, scale: float, name: str) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


class TabularBigramLM(PolicyModel):
    """One logit row per previous token; row 0 doubles as begin-of-sequence."""

    kind = "bigram"

    def __init__(self, vocab_size: int, seed: int = 0, init_scale: float = 0.05):
        self.vocab_size = vocab_size
        self.context_window = 1
        rng = np.random.default_rng(seed)
        self.params = [_init(rng, (vocab_size, vocab_size), init_scale, "table")]

    def logits(self, contexts: np.ndarray) -> Tensor:
        return ad.gather_rows(self.params[0], contexts[:, -1])

    def _blank(self):
        return TabularBigramLM(self.vocab_size, init_scale=0.0)


class FeedForwardLM(PolicyModel):
    """Embed W context tokens, concatenate, one tanh hidden layer, softmax head."""

    kind = "feedforward"

    def __init__(
        self,
        vocab_size: int = 32,
        dim: int = 16,
        context_window: int = 8,
        hidden: int = 64,
        seed: int = 0,
        init_scale: float = 0.05,
    ):
        self.vocab_size = vocab_size
        self.dim = dim
        self.context_window = context_window
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        V, d, W, h = vocab_size, dim, context_window, hidden
        self.params = [
            _init(rng, (V, d), init_scale, "embed"),
            _init(rng, (W * d, h), init_scale, "w_hidden"),
            _init(rng, (h,), init_scale, "b_hidden"),
            _init(rng, (h, V), init_scale, "w_out"),
            _init(rng, (V,), init_scale, "b_out"),
        ]

    def logits(self, contexts: np.ndarray) -> Tensor:
        embed, w1, b1, w2, b2 = self.params
        n = contexts.shape[0]
        x = ad.reshape(ad.gather_rows(embed, contexts), (n, self.context_window * self.dim))
        hid = ad.tanh(ad.matmul(x, w1) + b1)
        return ad.matmul(hid, w2) + b2

    def _blank(self):
        return FeedForwardLM(
            self.vocab_size, self.dim, self.context_window, self.hidden, init_scale=0.0
        )


def build_model(kind: str, vocab_size: int, dim: int = 16, context_window: int = 8,
                hidden: int = 64, seed: int = 0, init_scale: float = 0.05) -> PolicyModel:
    if kind == "bigram":
        return TabularBigramLM(vocab_size, seed=seed, init_scale=init_scale)
    if kind == "feedforward":
        return FeedForwardLM(vocab_size, dim, context_window, hidden, seed=seed, init_scale=init_scale)
    raise ConfigError(f"unknown model kind {kind!r}")


def model_from_shapes(kind: str, shapes: dict[str, list[int]]) -> PolicyModel:
    if kind == "bigram":
        return TabularBigramLM(shapes["table"][0], init_scale=0.0)
    if kind == "feedforward":
        V, d = shapes["embed"]
        Wd, h = shapes["w_hidden"]
        return FeedForwardLM(V, d, Wd // d, h, init_scale=0.0)
    raise ConfigError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- scoring


def context_matrix(prefixes: Sequence[Sequence[int]], width: int) -> np.ndarray:
    """Last ``width`` tokens of each prefix, left-padded with PAD."""
    out = np.full((len(prefixes), width), PAD, dtype=np.int64)
    for i, prefix in enumerate(prefixes):
        tail = list(prefix[-width:]) if width else []
        if tail:
            out[i, width - len(tail):] = tail
    return out


@dataclass
class BatchScores:
    """Per-sequence log-probabilities for a batch of (prompt, response) pairs."""

    sums: Tensor  # shape (n,), differentiable when the model is trainable
    lengths: np.ndarray
    per_token: np.ndarray  # flat, sequences back to back
    offsets: np.ndarray

    @property
    def avg(self) -> np.ndarray:
        return self.sums.data / self.lengths

    def avg_tensor(self) -> Tensor:
        return ad.mul(self.sums, 1.0 / self.lengths)


@dataclass
class SeqScore:
    logp: Tensor
    per_token: tuple[float, ...]

    @property
    def sum_logprob(self) -> float:
        return self.logp.item()

    @property
    def length(self) -> int:
        return len(self.per_token)

    @property
    def avg_logprob(self) -> float:
        return self.sum_logprob / self.length

    def avg_tensor(self) -> Tensor:
        return ad.scale(self.logp, 1.0 / self.length)


def score_batch(model: PolicyModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                grad: bool = True) -> BatchScores:
    prefixes, targets, seg = [], [], []
    lengths = np.empty(len(pairs), dtype=np.float64)
    for k, (prompt, response) in enumerate(pairs):
        if len(response) == 0:
            raise ContractError("cannot score an empty response")
        full = list(prompt) + list(response)
        start = len(prompt)
        for i in range(len(response)):
            prefixes.append(full[: start + i])
            targets.append(response[i])
            seg.append(k)
        lengths[k] = len(response)
    contexts = context_matrix(prefixes, model.context_window)
    if grad:
        logp = ad.pick(model.next_logprobs(contexts), targets)
    else:
        frozen = [p.requires_grad for p in model.params]
        for p in model.params:
            p.requires_grad = False
        try:
            logp = ad.pick(model.next_logprobs(contexts), targets)
        finally:
            for p, flag in zip(model.params, frozen):
                p.requires_grad = flag
    sums = segment_sum(logp, np.asarray(seg), len(pairs))
    offsets = np.concatenate([[0], np.cumsum(lengths).astype(np.int64)])
    return BatchScores(sums, lengths, logp.data.copy(), offsets)


def segment_sum(x: Tensor, segments: np.ndarray, n: int) -> Tensor:
    data = np.bincount(segments, weights=x.data, minlength=n)
    return ad._make(data, (x,), lambda g: (g[segments],))


def score_sequence(model: PolicyModel, prompt: Sequence[int], response: Sequence[int],
                   grad: bool = True) -> SeqScore:
    batch = score_batch(model, [(prompt, response)], grad=grad)
    return SeqScore(ad.reshape(batch.sums, ()), tuple(float(v) for v in batch.per_token))


# ---------------------------------------------------------------- sampling


def _draw(logits: np.ndarray, temperature: float, seed: int, position: int) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = _rng.counter_uniform(seed, position) * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def sample_continuations(
    model: PolicyModel,
    contexts: Sequence[Sequence[int]],
    max_new: Sequence[int],
    temperature: float,
    seeds: Sequence[int],
) -> list[tuple[int, ...]]:
    """Batched ``sample_continuation``; row i is identical to the single-row call."""
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    if any(m < 1 for m in max_new):
        raise ContractError("max_new must be >= 1")
    seqs = [list(c) for c in contexts]
    produced: list[list[int]] = [[] for _ in contexts]
    active = list(range(len(seqs)))
    step = 0
    while active:
        ctx = context_matrix([seqs[i] for i in active], model.context_window)
        frozen = [p.requires_grad for p in model.params]
        for p in model.params:
            p.requires_grad = False
        try:
            logits = model.logits(ctx).data
        finally:
            for p, flag in zip(model.params, frozen):
                p.requires_grad = flag
        for row, i in enumerate(active):
            tok = _draw(logits[row], temperature, seeds[i], step)
            seqs[i].append(tok)
            produced[i].append(tok)
        step += 1
        active = [i for i in active if len(produced[i]) < max_new[i]]
    return [tuple(p) for p in produced]


def sample_continuation(model: PolicyModel, context: Sequence[int], max_new: int,
                        temperature: float = 1.0, seed: int = 0) -> tuple[int, ...]:
    return sample_continuations(model, [context], [max_new], temperature, [seed])[0]
