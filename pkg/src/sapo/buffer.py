"""FIFO replay buffer with use counters and inverse-frequency sampling."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import PreferenceTuple
from .errors import BufferEmpty, ContractError


@dataclass
class BufferEntry:
    tuple: PreferenceTuple
    count: int
    insert_index: int


@dataclass(frozen=True)
class BufferStats:
    size: int
    mean_count: float | None = None
    max_count: int | None = None
    oldest_insert_index: int | None = None


class ReplayBuffer:
    def __init__(self, capacity: int = 2000):
        if capacity < 1:
            raise ContractError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[BufferEntry] = deque()
        self._next_index = 0

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, item: PreferenceTuple) -> None:
        self.entries.append(BufferEntry(item, 0, self._next_index))
        self._next_index += 1
        if len(self.entries) > self.capacity:
            self.entries.popleft()

    def sample_batch(self, n: int, seed: int) -> list[PreferenceTuple]:
        """Draw min(n, size) distinct entries, each draw weighted by 1 / (1 + count)."""
        if not self.entries:
            raise BufferEmpty("replay buffer is empty")
        rng = np.random.default_rng(seed)
        pool = list(self.entries)
        weights = np.array([1.0 / (1 + e.count) for e in pool])
        chosen = []
        for _ in range(min(n, len(pool))):
            p = weights / weights.sum()
            k = int(rng.choice(len(pool), p=p))
            chosen.append(pool[k])
            weights[k] = 0.0
        for e in chosen:
            e.count += 1
        return [e.tuple for e in chosen]

    def stats(self) -> BufferStats:
        if not self.entries:
            return BufferStats(0)
        counts = [e.count for e in self.entries]
        return BufferStats(
            size=len(counts),
            mean_count=sum(counts) / len(counts),
            max_count=max(counts),
            oldest_insert_index=self.entries[0].insert_index,
        )

    def snapshot_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries:
                row = {
                    "id": str(e.insert_index),
                    "prompt": list(e.tuple.prompt),
                    "chosen": list(e.tuple.chosen),
                    "rejected": list(e.tuple.rejected),
                    "count": e.count,
                }
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
