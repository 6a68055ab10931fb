"""Token-level data model, JSONL datasets, synthetic tasks and rule-based evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _rng
from .errors import ConfigError, EvaluationError, ParseError, ValidationError

TokenSeq = tuple[int, ...]

PAD = 0  # left-padding / begin-of-context id, never emitted by the tasks
CORRUPTION_RATE = 0.25


@dataclass(frozen=True)
class SftExample:
    id: str
    prompt: TokenSeq
    chosen: TokenSeq
    rejected: TokenSeq | None = None


@dataclass(frozen=True)
class PreferenceTuple:
    prompt: TokenSeq
    chosen: TokenSeq
    rejected: TokenSeq


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    prompt_len: int = 4
    response_len: int = 4
    count: int = 500
    seed: int = 0
    paired: bool = False

    def validate(self) -> None:
        if self.kind not in ("copy", "pattern"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.prompt_len < 1 or self.response_len < 1:
            raise ConfigError("prompt_len and response_len must be >= 1")
        if self.kind == "copy" and self.prompt_len != self.response_len:
            raise ConfigError("copy task needs prompt_len == response_len")


def validate_tokens(tokens: Sequence[int], vocab_size: int, what: str = "sequence") -> TokenSeq:
    out = tuple(int(t) for t in tokens)
    for t in out:
        if t < 0 or t >= vocab_size:
            raise ValidationError(f"{what}: token id {t} outside [0, {vocab_size})")
    return out


def follows_pattern(tokens: Sequence[int]) -> bool:
    """True when ids alternate even/odd starting with an even id."""
    return len(tokens) > 0 and all(t % 2 == i % 2 for i, t in enumerate(tokens))


def corrupt(tokens: Sequence[int], vocab_size: int, rng: np.random.Generator) -> TokenSeq:
    """Replace ceil(25%) of positions (at least one) with a different non-pad token."""
    out = list(tokens)
    k = max(1, math.ceil(CORRUPTION_RATE * len(out)))
    for pos in rng.choice(len(out), size=k, replace=False):
        wrong = [v for v in range(1, vocab_size) if v != out[pos]]
        out[pos] = int(wrong[rng.integers(len(wrong))])
    return tuple(out)


def _content_rng(seed: int, prompt: TokenSeq, chosen: TokenSeq) -> np.random.Generator:
    # keyed by content so the corruption of an example does not depend on its position
    return _rng.rng(seed, len(prompt), *prompt, len(chosen), *chosen)


def generate_dataset(spec: TaskSpec) -> list[SftExample]:
    spec.validate()
    gen = np.random.default_rng(spec.seed)
    V = spec.vocab_size
    evens = np.arange(2, V, 2)
    odds = np.arange(1, V, 2)
    examples = []
    for i in range(spec.count):
        prompt = tuple(int(t) for t in gen.integers(1, V, size=spec.prompt_len))
        if spec.kind == "copy":
            chosen = prompt
        else:
            chosen = tuple(
                int(gen.choice(evens if j % 2 == 0 else odds)) for j in range(spec.response_len)
            )
        rejected = corrupt(chosen, V, _content_rng(spec.seed, prompt, chosen)) if spec.paired else None
        examples.append(SftExample(str(i), prompt, chosen, rejected))
    return examples


def example_to_json(ex: SftExample) -> str:
    row = {"id": ex.id, "prompt": list(ex.prompt), "chosen": list(ex.chosen)}
    if ex.rejected is not None:
        row["rejected"] = list(ex.rejected)
    return json.dumps(row, separators=(",", ":"))


def write_jsonl(examples: Iterable[SftExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(example_to_json(ex) + "\n")


def _int_list(value, key: str, lineno: int) -> list[int]:
    if not isinstance(value, list) or not all(
        isinstance(t, int) and not isinstance(t, bool) for t in value
    ):
        raise ValidationError(f"line {lineno}: {key!r} must be an array of integers")
    return value


def load_jsonl(path: str | Path, vocab_size: int | None = None) -> list[SftExample]:
    """Read a dataset; ids default to the zero-based line index."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), lineno + 1) from None
            if not isinstance(row, dict):
                raise ParseError("expected a JSON object", lineno + 1)
            prompt = _int_list(row.get("prompt"), "prompt", lineno + 1)
            chosen = _int_list(row.get("chosen"), "chosen", lineno + 1)
            if not chosen:
                raise ValidationError(f"line {lineno + 1}: 'chosen' must be non-empty")
            rejected = row.get("rejected")
            if rejected is not None:
                rejected = tuple(_int_list(rejected, "rejected", lineno + 1))
            if vocab_size is not None:
                for seq in (prompt, chosen, rejected or ()):
                    validate_tokens(seq, vocab_size, f"line {lineno + 1}")
            examples.append(
                SftExample(str(row.get("id", lineno)), tuple(prompt), tuple(chosen), rejected)
            )
    return examples


def evaluate_preference_accuracy(model, examples: Sequence[SftExample], corruptor_seed: int) -> float:
    """Fraction of examples whose chosen response out-scores a corrupted copy.

    Scores are length-normalized log-probabilities; ties count as failures.
    """
    from .model import score_batch

    if not examples:
        raise EvaluationError("no examples to evaluate")
    V = model.vocab_size
    pairs = []
    for ex in examples:
        bad = corrupt(ex.chosen, V, _content_rng(corruptor_seed, ex.prompt, ex.chosen))
        pairs.append((ex.prompt, ex.chosen))
        pairs.append((ex.prompt, bad))
    scores = score_batch(model, pairs, grad=False)
    avg = scores.avg
    return float(np.mean(avg[0::2] > avg[1::2]))


def mean_chosen_nll(model, examples: Sequence[SftExample]) -> float:
    from .model import score_batch

    if not examples:
        raise EvaluationError("no examples to evaluate")
    scores = score_batch(model, [(ex.prompt, ex.chosen) for ex in examples], grad=False)
    return float(-np.mean(scores.avg))


