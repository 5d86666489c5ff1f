"""Fixed-capacity FIFO replay memory with uniform or prioritized sampling.

Prioritized mode samples slot ``i`` with probability ``p_i**omega / sum_j
p_j**omega`` where ``p_i`` is the last loss reported for that slot plus a
small floor. Priorities live in a sum-tree so both sampling and updates cost
O(log capacity).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .env import Transition
from .errors import CheckpointError, EmptyBufferError
from .ndmath import decode_checkpoint, encode_checkpoint


class SlotId(NamedTuple):
    index: int
    generation: int


class SumTree:
    """Binary sum-tree over ``capacity`` leaves (leaf ``i`` at node ``capacity + i``)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.nodes = np.zeros(2 * capacity)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaf(self, i: int) -> float:
        return float(self.nodes[self.capacity + i])

    def set(self, i: int, value: float) -> None:
        node = self.capacity + i
        self.nodes[node] = value
        node //= 2
        while node >= 1:
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1]
            node //= 2

    def find(self, u: np.ndarray) -> np.ndarray:
        """Vectorised prefix-sum descent: leaf index for each mass ``u``."""
        u = np.array(u, dtype=np.float64)
        idx = np.ones(u.shape, dtype=np.int64)
        if self.capacity == 1:
            return np.zeros(u.shape, dtype=np.int64)
        active = idx < self.capacity
        while np.any(active):
            left = 2 * idx[active]
            lmass = self.nodes[left]
            ua = u[active]
            go_left = ua < lmass
            # a right child holding no mass can only be reached through rounding
            go_left |= self.nodes[left + 1] <= 0.0
            idx[active] = np.where(go_left, left, left + 1)
            u[active] = np.where(go_left, ua, ua - lmass)
            active = idx < self.capacity
        return idx - self.capacity

    def check(self, tol: float = 1e-9) -> bool:
        for node in range(self.capacity - 1, 0, -1):
            if abs(self.nodes[node] - self.nodes[2 * node] - self.nodes[2 * node + 1]) > tol:
                return False
        return True


class ReplayBuffer:
    """Ring buffer of :class:`Transition`; oldest entries are evicted first.

    With ``prioritized=True`` every slot carries a priority. New slots get
    the largest priority seen so far, so each transition is replayed at least
    once with high probability.
    """

    def __init__(self, capacity: int, prioritized: bool = False, omega: float = 0.6, floor: float = 1e-3):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if omega < 0 or floor <= 0:
            raise ValueError("need omega >= 0 and floor > 0")
        self.capacity = int(capacity)
        self.prioritized = prioritized
        self.omega = float(omega)
        self.floor = float(floor)
        self.storage: list[Transition | None] = [None] * self.capacity
        self.generations = np.zeros(self.capacity, dtype=np.int64)
        self.priorities = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0
        self.pushed = 0
        self.max_priority = 1.0
        self.stale_updates = 0
        self.tree = SumTree(self.capacity) if prioritized else None
        self.columns: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.size

    def _write_columns(self, i: int, t: Transition) -> None:
        """Mirror slot ``i`` into preallocated arrays so minibatches need no Python loop."""
        if self.columns is None:
            action = np.asarray(t.action)
            self.columns = {
                "state": np.zeros((self.capacity, *np.shape(t.state))),
                "action": np.zeros((self.capacity, *action.shape),
                                   dtype=np.int64 if action.dtype.kind in "iub" else np.float64),
                "reward": np.zeros(self.capacity),
                "next_state": np.zeros((self.capacity, *np.shape(t.next_state))),
                "done": np.zeros(self.capacity, dtype=bool),
                "truncated": np.zeros(self.capacity, dtype=bool),
                "steps": np.ones(self.capacity, dtype=np.int64),
            }
        c = self.columns
        c["state"][i] = t.state
        c["action"][i] = t.action
        c["reward"][i] = t.reward
        c["next_state"][i] = t.next_state
        c["done"][i] = t.done
        c["truncated"][i] = t.truncated
        c["steps"][i] = t.steps

    def push(self, t: Transition) -> SlotId:
        i = self.cursor
        self.storage[i] = t
        self._write_columns(i, t)
        self.pushed += 1
        self.generations[i] = self.pushed
        if self.prioritized:
            self._set_priority(i, self.max_priority)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return SlotId(i, int(self.generations[i]))

    def _set_priority(self, i: int, p: float) -> None:
        self.priorities[i] = p
        self.tree.set(i, p**self.omega)

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        return [self.storage[(start + k) % self.capacity] for k in range(self.size)]

    def sample_uniform(self, batch: int, rng: np.random.Generator) -> list[tuple[SlotId, Transition]]:
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch)
        return [(SlotId(int(i), int(self.generations[i])), self.storage[i]) for i in idx]

    def sample_batch(self, batch: int, rng: np.random.Generator, bootstrap_on_truncation: bool = True) -> "Batch":
        """Uniform minibatch already collated; draws the same indices as :meth:`sample_uniform`."""
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch)
        c = self.columns
        actions = c["action"][idx]
        if actions.dtype.kind == "f" and actions.ndim == 1:
            actions = actions[:, None]
        done, trunc = c["done"][idx], c["truncated"][idx]
        terminal = done & ~trunc if bootstrap_on_truncation else done
        return Batch(c["state"][idx], actions, c["reward"][idx], c["next_state"][idx], terminal, c["steps"][idx])

    def sample_prioritized(
        self, batch: int, rng: np.random.Generator
    ) -> list[tuple[SlotId, Transition, float]]:
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        if not self.prioritized:
            raise ValueError("buffer was built without prioritization")
        total = self.tree.total
        u = rng.random(batch) * total
        idx = self.tree.find(u)
        return [
            (SlotId(int(i), int(self.generations[i])), self.storage[i], self.tree.leaf(i) / total)
            for i in idx
        ]

    def sample(self, batch: int, rng: np.random.Generator):
        """Prioritized sample if enabled, else uniform (probability ``1/size``)."""
        if self.prioritized:
            return self.sample_prioritized(batch, rng)
        return [(sid, t, 1.0 / self.size) for sid, t in self.sample_uniform(batch, rng)]

    def update_priorities(self, slot_ids, losses) -> None:
        if not self.prioritized:
            raise ValueError("buffer was built without prioritization")
        for sid, loss in zip(slot_ids, losses):
            loss = float(loss)
            if loss < 0 or not np.isfinite(loss):
                raise ValueError(f"priority loss must be finite and >= 0, got {loss}")
            if sid.generation != self.generations[sid.index] or self.storage[sid.index] is None:
                self.stale_updates += 1
                continue
            p = loss + self.floor
            self.max_priority = max(self.max_priority, p)
            self._set_priority(sid.index, p)

    def importance_weights(self, probs, beta: float = 0.4) -> np.ndarray:
        """Opt-in correction ``(size * P(i))**-beta`` normalised by its max."""
        w = (self.size * np.asarray(probs, dtype=np.float64)) ** (-beta)
        return w / w.max()

    def dump(self) -> bytes:
        """Serialise into the NDRL container (transition table + metadata)."""
        if self.size == 0:
            raise CheckpointError("refusing to dump an empty buffer")
        rows = [self.storage[i] for i in range(self.size)]
        t0 = rows[0]
        tensors = {
            "buffer.meta": np.array(
                [self.capacity, self.cursor, self.size, self.pushed, float(self.prioritized),
                 self.omega, self.floor, self.max_priority, self.stale_updates]
            ),
            "buffer.state": np.array([r.state for r in rows], dtype=np.float64),
            "buffer.action": np.array([np.atleast_1d(r.action) for r in rows], dtype=np.float64),
            "buffer.reward": np.array([r.reward for r in rows]),
            "buffer.next_state": np.array([r.next_state for r in rows], dtype=np.float64),
            "buffer.flags": np.array([[r.done, r.truncated, r.steps] for r in rows], dtype=np.float64),
            "buffer.generation": self.generations[: self.size].astype(np.float64),
            "buffer.priority": self.priorities[: self.size].copy(),
            "buffer.discrete_action": np.array(float(np.ndim(t0.action) == 0)),
        }
        return encode_checkpoint(tensors)

    @classmethod
    def restore(cls, blob: bytes) -> "ReplayBuffer":
        t = decode_checkpoint(blob)
        try:
            cap, cursor, size, pushed, prio, omega, floor, maxp, stale = t["buffer.meta"]
        except KeyError as exc:
            raise CheckpointError("not a replay-buffer dump") from exc
        buf = cls(int(cap), bool(prio), omega, floor)
        discrete = bool(t["buffer.discrete_action"])
        for i in range(int(size)):
            done, trunc, steps = t["buffer.flags"][i]
            action = int(t["buffer.action"][i][0]) if discrete else t["buffer.action"][i].copy()
            buf.storage[i] = Transition(
                t["buffer.state"][i].copy(), action, float(t["buffer.reward"][i]),
                t["buffer.next_state"][i].copy(), bool(done), bool(trunc), int(steps),
            )
            buf._write_columns(i, buf.storage[i])
            buf.generations[i] = int(t["buffer.generation"][i])
            if buf.prioritized:
                buf._set_priority(i, float(t["buffer.priority"][i]))
        buf.cursor, buf.size, buf.pushed = int(cursor), int(size), int(pushed)
        buf.max_priority, buf.stale_updates = float(maxp), int(stale)
        return buf


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    steps: np.ndarray


def collate(transitions, bootstrap_on_truncation: bool = True) -> Batch:
    """Stack transitions (or sampled ``(id, transition, ...)`` tuples) into arrays.

    ``terminal`` marks rows whose bootstrap term must be zeroed.
    """
    rows = [t[1] if isinstance(t, tuple) else t for t in transitions]
    if not rows:
        raise EmptyBufferError("cannot collate an empty minibatch")
    actions = np.array([r.action for r in rows])
    if actions.dtype.kind == "f" and actions.ndim == 1:
        actions = actions[:, None]
    return Batch(
        np.array([r.state for r in rows], dtype=np.float64),
        actions,
        np.array([r.reward for r in rows], dtype=np.float64),
        np.array([r.next_state for r in rows], dtype=np.float64),
        np.array([r.terminal(bootstrap_on_truncation) for r in rows]),
        np.array([r.steps for r in rows], dtype=np.int64),
    )
