import json

import pytest
from hypothesis import given, settings, strategies as st

from sapo.buffer import BufferStats, ReplayBuffer
from sapo.corpus import PreferenceTuple
from sapo.errors import BufferEmpty, ContractError


def tup(i):
    return PreferenceTuple((i,), (i + 1,), (i + 2,))


def test_fifo_eviction():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.push(tup(i))
    assert [e.tuple for e in buf.entries] == [tup(2), tup(3), tup(4)]
    assert buf.stats().oldest_insert_index == 2


def test_capacity_after_many_pushes():
    buf = ReplayBuffer(2000)
    for i in range(10_000):
        buf.push(tup(i))
    assert len(buf) == 2000 and buf.stats().oldest_insert_index == 8000


def test_invalid_capacity():
    with pytest.raises(ContractError):
        ReplayBuffer(0)


def test_empty_buffer():
    with pytest.raises(BufferEmpty):
        ReplayBuffer(4).sample_batch(1, 0)
    assert ReplayBuffer(4).stats() == BufferStats(0)


def test_draws_without_replacement_and_exhaustion():
    buf = ReplayBuffer(10)
    for i in range(3):
        buf.push(tup(i))
    batch = buf.sample_batch(8, seed=1)
    assert set(batch) == {tup(0), tup(1), tup(2)} and len(batch) == 3
    assert all(e.count == 1 for e in buf.entries)


def test_inverse_count_weights():
    hits, trials = 0, 10_000
    for seed in range(trials):
        buf = ReplayBuffer(2)
        buf.push(tup(0))
        buf.push(tup(1))
        buf.entries[1].count = 1
        hits += buf.sample_batch(1, seed)[0] == tup(0)
    assert abs(hits / trials - 2 / 3) < 0.02


def test_stats_values():
    buf = ReplayBuffer(5)
    for i in range(4):
        buf.push(tup(i))
    buf.sample_batch(2, 0)
    buf.sample_batch(1, 1)
    s = buf.stats()
    assert s.size == 4 and s.mean_count == pytest.approx(3 / 4) and s.max_count in (1, 2)


def test_sampling_deterministic():
    def run():
        buf = ReplayBuffer(50)
        for i in range(30):
            buf.push(tup(i))
        return [buf.sample_batch(5, s) for s in range(10)]

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(
    capacity=st.integers(1, 12),
    ops=st.lists(st.tuples(st.booleans(), st.integers(1, 6)), max_size=40),
    seed=st.integers(0, 2**31),
)
def test_replay_log_matches_counters(capacity, ops, seed):
    buf = ReplayBuffer(capacity)
    uses: dict[int, int] = {}
    pushed = 0
    for k, (is_push, n) in enumerate(ops):
        if is_push or not len(buf):
            buf.push(tup(pushed))
            uses[pushed] = 0
            pushed += 1
        else:
            batch = buf.sample_batch(n, seed + k)
            assert len(batch) == min(n, len(buf))
            assert len(set(batch)) == len(batch)
            for t in batch:
                uses[t.prompt[0]] += 1
        assert len(buf) == min(pushed, capacity)
    for e in buf.entries:
        assert e.count == uses[e.insert_index]
        assert e.tuple == tup(e.insert_index)


def test_snapshot(tmp_path):
    buf = ReplayBuffer(3)
    buf.push(tup(7))
    buf.sample_batch(1, 0)
    buf.snapshot_jsonl(tmp_path / "b.jsonl")
    row = json.loads((tmp_path / "b.jsonl").read_text())
    assert row == {"id": "0", "prompt": [7], "chosen": [8], "rejected": [9], "count": 1}
