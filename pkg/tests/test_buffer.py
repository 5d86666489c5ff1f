import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nondiff_rl.buffer import ReplayBuffer, SlotId, SumTree, collate
from nondiff_rl.env import Transition
from nondiff_rl.errors import CheckpointError, EmptyBufferError


def tr(tag, done=False, truncated=False, action=0):
    s = np.array([float(tag)])
    return Transition(s, action, float(tag), s + 1, done, truncated)


def frequencies(slot_ids, n):
    counts = np.bincount([sid.index for sid in slot_ids], minlength=n)
    return counts / counts.sum()


def test_fifo_eviction():
    buf = ReplayBuffer(2)
    for tag in "ABC":
        buf.push(tr(ord(tag)))
    assert [t.reward for t in buf.contents()] == [ord("B"), ord("C")]
    assert len(buf) == 2


def test_new_slot_gets_current_max_priority():
    buf = ReplayBuffer(4, prioritized=True, omega=1.0, floor=1e-3)
    first = buf.push(tr(0))
    assert buf.priorities[first.index] == 1.0
    buf.update_priorities([first], [5.0 - 1e-3])
    new = buf.push(tr(1))
    assert buf.priorities[new.index] == pytest.approx(5.0, abs=1e-12)


def test_uniform_singleton_and_empty_batch():
    buf = ReplayBuffer(3)
    buf.push(tr(7))
    rng = np.random.default_rng(0)
    assert all(t.reward == 7 for _, t in buf.sample_uniform(50, rng))
    assert buf.sample_uniform(0, rng) == []


def test_sampling_empty_buffer_raises():
    rng = np.random.default_rng(0)
    with pytest.raises(EmptyBufferError):
        ReplayBuffer(3).sample_uniform(1, rng)
    with pytest.raises(EmptyBufferError):
        ReplayBuffer(3, prioritized=True).sample_prioritized(1, rng)


def test_uniform_frequencies():
    buf = ReplayBuffer(8)
    for i in range(4):
        buf.push(tr(i))
    freq = frequencies([sid for sid, _ in buf.sample_uniform(100_000, np.random.default_rng(1))], 4)
    np.testing.assert_allclose(freq, 0.25, atol=0.01)


def test_prioritized_frequencies_follow_priority_ratio():
    buf = ReplayBuffer(2, prioritized=True, omega=1.0, floor=1e-3)
    ids = [buf.push(tr(0)), buf.push(tr(1))]
    buf.update_priorities(ids, [3.0 - 1e-3, 1.0 - 1e-3])
    sample = buf.sample_prioritized(100_000, np.random.default_rng(2))
    np.testing.assert_allclose(frequencies([s for s, _, _ in sample], 2), [0.75, 0.25], atol=0.01)
    probs = {s.index: p for s, _, p in sample}
    assert probs[0] == pytest.approx(0.75) and probs[1] == pytest.approx(0.25)


def test_equal_priorities_and_zero_exponent_reduce_to_uniform():
    for omega, losses in ((0.6, [2.0, 2.0, 2.0, 2.0]), (0.0, [0.1, 9.0, 3.0, 0.0])):
        buf = ReplayBuffer(4, prioritized=True, omega=omega)
        ids = [buf.push(tr(i)) for i in range(4)]
        buf.update_priorities(ids, losses)
        sample = buf.sample_prioritized(100_000, np.random.default_rng(3))
        np.testing.assert_allclose(frequencies([s for s, _, _ in sample], 4), 0.25, atol=0.01)


def test_prioritized_frequencies_track_omega_power():
    omega = 0.6
    buf = ReplayBuffer(5, prioritized=True, omega=omega, floor=1e-3)
    ids = [buf.push(tr(i)) for i in range(5)]
    losses = [0.0, 0.5, 1.0, 2.0, 4.0]
    buf.update_priorities(ids, losses)
    p = (np.array(losses) + 1e-3) ** omega
    sample = buf.sample_prioritized(100_000, np.random.default_rng(4))
    np.testing.assert_allclose(frequencies([s for s, _, _ in sample], 5), p / p.sum(), atol=0.01)


def test_zero_loss_priority_is_floor():
    buf = ReplayBuffer(2, prioritized=True, floor=1e-3)
    sid = buf.push(tr(0))
    buf.update_priorities([sid], [0.0])
    assert buf.priorities[sid.index] == 1e-3


def test_stale_update_is_skipped_and_counted():
    buf = ReplayBuffer(2, prioritized=True)
    old = buf.push(tr(0))
    buf.push(tr(1))
    buf.push(tr(2))  # overwrites slot of `old`
    before = buf.priorities.copy()
    buf.update_priorities([old], [7.0])
    np.testing.assert_array_equal(buf.priorities, before)
    assert buf.stale_updates == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.lists(st.integers(0, 200), min_size=1, max_size=100))
def test_fifo_multiset_equals_last_pushed(capacity, tags):
    buf = ReplayBuffer(capacity)
    for t in tags:
        buf.push(tr(t))
    assert [t.reward for t in buf.contents()] == [float(t) for t in tags[-capacity:]]
    assert len(buf.storage) == capacity and len(buf) == min(len(tags), capacity)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 33), st.integers(0, 2**32 - 1))
def test_sum_tree_stays_consistent_under_fuzzing(capacity, seed):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(capacity, prioritized=True, omega=float(rng.uniform(0, 1)))
    live = []
    for _ in range(300):
        if rng.random() < 0.5 or not live:
            live.append(buf.push(tr(0)))
            live = live[-capacity:]
        else:
            k = int(rng.integers(1, len(live) + 1))
            chosen = [live[int(i)] for i in rng.integers(len(live), size=k)]
            buf.update_priorities(chosen, rng.exponential(3.0, size=k))
        leaves = [buf.tree.leaf(i) for i in range(capacity)]
        assert abs(buf.tree.total - math.fsum(leaves)) <= 1e-9
        assert buf.tree.check(1e-9)
        occupied = buf.priorities[: len(buf)]
        assert np.all(occupied >= buf.floor)


@pytest.mark.parametrize("capacity", [1, 2, 5, 8, 13])
def test_sum_tree_find_partitions_mass_exactly(capacity):
    rng = np.random.default_rng(capacity)
    tree = SumTree(capacity)
    masses = rng.uniform(0, 3, size=capacity)
    masses[rng.integers(capacity)] = 0.0 if capacity > 1 else 1.0
    for i, v in enumerate(masses):
        tree.set(i, v)
    n = 200_000
    u = (np.arange(n) + 0.5) / n * tree.total
    counts = np.bincount(tree.find(u), minlength=capacity)
    np.testing.assert_allclose(counts / n, masses / masses.sum(), atol=2 / n * capacity)
    assert counts[masses == 0].sum() == 0


def test_importance_weights_normalised():
    buf = ReplayBuffer(4, prioritized=True)
    for i in range(4):
        buf.push(tr(i))
    w = buf.importance_weights([0.1, 0.4, 0.25], beta=1.0)
    np.testing.assert_allclose(w, [1.0, 0.25, 0.4])


def test_dump_restore_roundtrip():
    buf = ReplayBuffer(3, prioritized=True, omega=0.7)
    ids = [buf.push(tr(i, done=i == 3)) for i in range(4)]
    buf.update_priorities(ids[1:], [0.5, 2.0, 1.0])
    back = ReplayBuffer.restore(buf.dump())
    assert [t.reward for t in back.contents()] == [t.reward for t in buf.contents()]
    assert [t.done for t in back.contents()] == [t.done for t in buf.contents()]
    np.testing.assert_array_equal(back.priorities, buf.priorities)
    assert back.tree.total == pytest.approx(buf.tree.total)
    assert back.push(tr(9)).generation == buf.push(tr(9)).generation
    with pytest.raises(CheckpointError):
        ReplayBuffer(2).dump()


def test_collate_marks_terminals_by_truncation_policy():
    rows = [tr(0), tr(1, done=True), tr(2, done=True, truncated=True)]
    b = collate(rows)
    assert b.terminal.tolist() == [False, True, False]
    assert collate(rows, bootstrap_on_truncation=False).terminal.tolist() == [False, True, True]
    assert b.states.shape == (3, 1) and b.actions.tolist() == [0, 0, 0]
    cont = collate([Transition(np.zeros(2), np.array([0.3]), 0.0, np.zeros(2), False)])
    assert cont.actions.shape == (1, 1)
    sampled = collate([(SlotId(0, 1), rows[1], 0.5)])
    assert sampled.rewards.tolist() == [1.0]
    with pytest.raises(EmptyBufferError):
        collate([])


@pytest.mark.parametrize("discrete", [True, False])
def test_sample_batch_matches_collated_uniform_sample(discrete):
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(7)
    for k in range(12):
        action = int(rng.integers(3)) if discrete else rng.uniform(-1, 1, size=2)
        done = bool(rng.random() < 0.4)
        buf.push(Transition(rng.normal(size=3), action, float(rng.normal()), rng.normal(size=3), done,
                            done and bool(rng.random() < 0.5), int(rng.integers(1, 4))))
    for flag in (True, False):
        fast = buf.sample_batch(50, np.random.default_rng(9), flag)
        slow = collate(buf.sample_uniform(50, np.random.default_rng(9)), flag)
        for a, b in zip(fast, slow):
            assert a.dtype == b.dtype
            np.testing.assert_array_equal(a, b)
    restored = ReplayBuffer.restore(buf.dump())
    for a, b in zip(restored.sample_batch(20, np.random.default_rng(1)), buf.sample_batch(20, np.random.default_rng(1))):
        np.testing.assert_array_equal(a, b)
