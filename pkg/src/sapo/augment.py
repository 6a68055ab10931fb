"""Segment-level rejected responses: y⁻ = A ⊕ B′ ⊕ C with B′ regenerated."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import PreferenceTuple, TokenSeq
from .errors import ConfigError, ContractError
from .model import PolicyModel, sample_continuations


@dataclass(frozen=True)
class SegmentSplit:
    a: TokenSeq
    b: TokenSeq
    c: TokenSeq
    t: int

    @property
    def segment_len_effective(self) -> int:
        return len(self.b)


@dataclass(frozen=True)
class AugmentConfig:
    n_seg: int = 4
    temperature: float = 1.0
    resample_on_identical: bool = True
    mode: str = "segment"  # segment | full_regen

    def validate(self) -> None:
        if self.n_seg < 1:
            raise ConfigError("n_seg must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.mode not in ("segment", "full_regen"):
            raise ConfigError(f"unknown augment mode {self.mode!r}")


def split_at(chosen: Sequence[int], t: int, n_seg: int) -> SegmentSplit:
    chosen = tuple(chosen)
    if not 0 <= t < len(chosen):
        raise ContractError(f"truncation point {t} outside response of length {len(chosen)}")
    end = t + min(n_seg, len(chosen) - t)
    return SegmentSplit(chosen[:t], chosen[t:end], chosen[end:], t)


def split_response(chosen: Sequence[int], n_seg: int, seed: int) -> SegmentSplit:
    """Uniform truncation point over every token position of ``chosen``."""
    if len(chosen) == 0:
        raise ContractError("cannot split an empty response")
    t = int(np.random.default_rng(seed).integers(len(chosen)))
    return split_at(chosen, t, n_seg)


def _candidates(items, generator, cfg, seeds):
    """One candidate y⁻ per item, generated in a single batched pass."""
    contexts, lengths, splits = [], [], []
    for (prompt, chosen), seed in zip(items, seeds):
        if len(chosen) == 0:
            raise ContractError("chosen response must be non-empty")
        if cfg.mode == "segment":
            sp = split_response(chosen, cfg.n_seg, seed)
            contexts.append(tuple(prompt) + sp.a)
            lengths.append(len(sp.b))
        else:
            sp = None
            contexts.append(tuple(prompt))
            lengths.append(len(chosen))
        splits.append(sp)
    regen = sample_continuations(generator, contexts, lengths, cfg.temperature, seeds)
    out = []
    for sp, new in zip(splits, regen):
        out.append(new if sp is None else sp.a + new + sp.c)
    return out


def synthesize_rejected_batch(
    items: Sequence[tuple[Sequence[int], Sequence[int]]],
    generator: PolicyModel,
    cfg: AugmentConfig,
    seeds: Sequence[int],
) -> list[PreferenceTuple | None]:
    """Rejected responses for many (prompt, chosen) pairs, index-aligned with ``items``.

    Each row depends only on its own seed, so batching does not change results.
    """
    items = [(tuple(p), tuple(c)) for p, c in items]
    result: list[PreferenceTuple | None] = [None] * len(items)
    first = _candidates(items, generator, cfg, seeds)
    retry = []
    for i, rej in enumerate(first):
        if rej != items[i][1]:
            result[i] = PreferenceTuple(items[i][0], items[i][1], rej)
        elif cfg.resample_on_identical:
            retry.append(i)
    if retry:
        second = _candidates([items[i] for i in retry], generator, cfg, [seeds[i] + 1 for i in retry])
        for i, rej in zip(retry, second):
            if rej != items[i][1]:
                result[i] = PreferenceTuple(items[i][0], items[i][1], rej)
    return result


def synthesize_rejected(prompt: Sequence[int], chosen: Sequence[int], generator: PolicyModel,
                        cfg: AugmentConfig, seed: int) -> PreferenceTuple | None:
    return synthesize_rejected_batch([(prompt, chosen)], generator, cfg, [seed])[0]
