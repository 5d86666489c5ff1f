"""Episodic environments with a reset/step interface.

Four toy environments live here, each aimed at one theme: ``ChainWorld``
(sparse reward), ``GridWorld`` (discrete TD learning), ``PointMass``
(continuous control) and ``DatasetBandit`` (classification as a one-step
decision problem). The finite ones expose an exact tabular model so tests
can compute ground truth by dynamic programming.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ActionError, ConfigError, EpisodeStateError


@dataclass(frozen=True)
class Discrete:
    n: int


@dataclass(frozen=True)
class Box:
    dim: int
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or not self.low < self.high:
            raise ConfigError(f"invalid box: dim={self.dim} low={self.low} high={self.high}")


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_space: Discrete | Box
    max_episode_steps: int | None = None
    reward_range: tuple[float, float] = (-np.inf, np.inf)

    @property
    def discrete(self) -> bool:
        return isinstance(self.action_space, Discrete)


@dataclass
class Transition:
    """One interaction record; ``steps`` > 1 marks an n-step aggregate."""

    state: np.ndarray
    action: int | np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    truncated: bool = False
    steps: int = 1

    def terminal(self, bootstrap_on_truncation: bool = True) -> bool:
        """True when the bootstrap term must be zeroed."""
        return bool(self.done and not (self.truncated and bootstrap_on_truncation))


class StepResult(NamedTuple):
    state: np.ndarray
    reward: float
    done: bool
    truncated: bool


@dataclass
class ExactModel:
    """Deterministic tabular model: ``next_state[s, a]``, ``reward[s, a]``.

    ``done[s, a]`` flags transitions that end the episode. Terminal states
    self-loop with zero reward.
    """

    next_state: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    terminal_states: frozenset
    start_states: tuple[int, ...]
    observations: np.ndarray

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    def transition(self, s: int, a: int) -> int:
        return int(self.next_state[s, a])

    def reward_of(self, s: int, a: int) -> float:
        return float(self.reward[s, a])

    def is_terminal(self, s: int) -> bool:
        return s in self.terminal_states

    def state_index(self, observation) -> int:
        obs = np.asarray(observation, dtype=np.float64)[: self.observations.shape[1]]
        return int(np.argmax(obs))


class Env:
    spec: EnvSpec

    def __init__(self):
        self.rng = np.random.default_rng()
        self._steps = 0
        self._done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._steps = 0
        self._done = False
        return self._reset()

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeStateError("step called after the episode ended; call reset first")
        action = self._check_action(action)
        state, reward, done, truncated = self._step(action)
        self._steps += 1
        self._done = done
        return StepResult(state, float(reward), bool(done), bool(truncated))

    def _check_action(self, action):
        space = self.spec.action_space
        if isinstance(space, Discrete):
            a = int(np.asarray(action).reshape(-1)[0]) if np.ndim(action) else int(action)
            if not 0 <= a < space.n:
                raise ActionError(f"action {a} outside 0..{space.n - 1}")
            return a
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape[0] != space.dim:
            raise ActionError(f"action dim {a.shape[0]} != {space.dim}")
        if not np.all(np.isfinite(a)) or np.any(a < space.low - 1e-9) or np.any(a > space.high + 1e-9):
            raise ActionError(f"action {a} outside [{space.low}, {space.high}]")
        return np.clip(a, space.low, space.high)

    @property
    def elapsed_steps(self) -> int:
        return self._steps

    def exact_model(self) -> ExactModel | None:
        return None

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


def _one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


class ChainWorld(Env):
    """Positions 0..L-1, start at 0, +1 on entering L-1 (terminal)."""

    LEFT, RIGHT = 0, 1

    def __init__(self, length: int = 5, step_penalty: float = 0.0):
        super().__init__()
        if length < 2:
            raise ConfigError(f"ChainWorld length must be >= 2, got {length}")
        self.length = length
        self.step_penalty = float(step_penalty)
        self.spec = EnvSpec(length, Discrete(2), None, (min(-self.step_penalty, 0.0), 1.0))
        self.pos = 0

    def _reset(self):
        self.pos = 0
        return _one_hot(0, self.length)

    def _move(self, pos: int, a: int) -> int:
        return max(pos - 1, 0) if a == self.LEFT else min(pos + 1, self.length - 1)

    def _step(self, a):
        self.pos = self._move(self.pos, a)
        done = self.pos == self.length - 1
        reward = 1.0 if done else -self.step_penalty
        return _one_hot(self.pos, self.length), reward, done, False

    def exact_model(self) -> ExactModel:
        n = self.length
        nxt = np.zeros((n, 2), dtype=np.int64)
        rew = np.zeros((n, 2))
        done = np.zeros((n, 2), dtype=bool)
        for s in range(n):
            for a in range(2):
                if s == n - 1:
                    nxt[s, a], done[s, a] = s, True
                    continue
                s2 = self._move(s, a)
                nxt[s, a] = s2
                done[s, a] = s2 == n - 1
                rew[s, a] = 1.0 if done[s, a] else -self.step_penalty
        return ExactModel(nxt, rew, done, frozenset({n - 1}), (0,), np.eye(n))


class GridWorld(Env):
    """W x H grid; actions up/down/left/right; walls and obstacles block.

    Each step costs ``step_penalty``; entering the goal pays +1 and ends the
    episode. Without a fixed ``start`` the episode starts on a uniformly
    drawn free cell.
    """

    UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
    MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))

    def __init__(
        self,
        width: int = 4,
        height: int = 4,
        obstacles: Sequence[tuple[int, int]] = (),
        goal: tuple[int, int] | None = None,
        step_penalty: float = 0.01,
        start: tuple[int, int] | None = None,
    ):
        super().__init__()
        if width < 1 or height < 1 or width * height < 2:
            raise ConfigError(f"grid must have at least 2 cells, got {width}x{height}")
        self.width, self.height = width, height
        self.obstacles = frozenset((int(x), int(y)) for x, y in obstacles)
        self.goal = tuple(goal) if goal is not None else (width - 1, height - 1)
        self.step_penalty = float(step_penalty)
        for cell in [self.goal, *self.obstacles] + ([tuple(start)] if start is not None else []):
            if not (0 <= cell[0] < width and 0 <= cell[1] < height):
                raise ConfigError(f"cell {cell} outside the {width}x{height} grid")
        if self.goal in self.obstacles:
            raise ConfigError("goal cell is an obstacle")
        self.start = tuple(start) if start is not None else None
        if self.start is not None and (self.start in self.obstacles or self.start == self.goal):
            raise ConfigError(f"start {self.start} must be a free non-goal cell")
        self.free_cells = [
            (x, y)
            for y in range(height)
            for x in range(width)
            if (x, y) not in self.obstacles and (x, y) != self.goal
        ]
        if not self.free_cells:
            raise ConfigError("no free start cell")
        self.spec = EnvSpec(width * height, Discrete(4), None, (min(-self.step_penalty, 0.0), 1.0))
        self.pos = self.free_cells[0]

    def index(self, cell: tuple[int, int]) -> int:
        return cell[1] * self.width + cell[0]

    def cell(self, index: int) -> tuple[int, int]:
        return index % self.width, index // self.width

    def observe(self, cell) -> np.ndarray:
        return _one_hot(self.index(cell), self.width * self.height)

    def _move(self, cell, a):
        dx, dy = self.MOVES[a]
        nxt = (cell[0] + dx, cell[1] + dy)
        if not (0 <= nxt[0] < self.width and 0 <= nxt[1] < self.height) or nxt in self.obstacles:
            return cell
        return nxt

    def _reset(self):
        if self.start is not None:
            self.pos = self.start
        else:
            self.pos = self.free_cells[int(self.rng.integers(len(self.free_cells)))]
        return self.observe(self.pos)

    def set_position(self, cell) -> np.ndarray:
        cell = tuple(cell)
        if cell not in self.free_cells:
            raise ConfigError(f"{cell} is not a free cell")
        self.pos = cell
        return self.observe(cell)

    def _step(self, a):
        self.pos = self._move(self.pos, a)
        done = self.pos == self.goal
        reward = 1.0 if done else -self.step_penalty
        return self.observe(self.pos), reward, done, False

    def exact_model(self) -> ExactModel:
        n = self.width * self.height
        nxt = np.zeros((n, 4), dtype=np.int64)
        rew = np.zeros((n, 4))
        done = np.zeros((n, 4), dtype=bool)
        goal = self.index(self.goal)
        for s in range(n):
            cell = self.cell(s)
            for a in range(4):
                if s == goal or cell in self.obstacles:
                    nxt[s, a], done[s, a] = s, s == goal
                    continue
                c2 = self._move(cell, a)
                nxt[s, a] = self.index(c2)
                done[s, a] = c2 == self.goal
                rew[s, a] = 1.0 if done[s, a] else -self.step_penalty
        starts = tuple(self.index(c) for c in ([self.start] if self.start else self.free_cells))
        return ExactModel(nxt, rew, done, frozenset({goal}), starts, np.eye(n))


class PointMass(Env):
    """1-D point mass pushed by a force in [-1, 1].

    ``v' = 0.9 v + 0.1 a``, ``x' = x + v'``, reward ``-(x^2 + 0.1 a^2)``
    evaluated at the pre-step position. The track is ``[-bound, bound]``;
    hitting an end clamps the position and zeroes the velocity. Episodes are
    truncated after ``horizon`` steps.
    """

    def __init__(self, horizon: int = 100, bound: float = 1.0, start_range: float = 1.0):
        super().__init__()
        if horizon < 1:
            raise ConfigError("PointMass horizon must be >= 1")
        self.horizon = horizon
        self.bound = float(bound)
        self.start_range = float(start_range)
        self.spec = EnvSpec(2, Box(1, -1.0, 1.0), horizon, (-(self.bound**2) - 0.1, 0.0))
        self.x = 0.0
        self.v = 0.0

    def _reset(self):
        self.x = float(self.rng.uniform(-self.start_range, self.start_range))
        self.v = 0.0
        return np.array([self.x, self.v])

    def set_state(self, x: float, v: float) -> np.ndarray:
        self.x, self.v = float(x), float(v)
        return np.array([self.x, self.v])

    def _step(self, a):
        force = float(a[0])
        reward = -(self.x**2 + 0.1 * force**2)
        self.v = 0.9 * self.v + 0.1 * force
        self.x = self.x + self.v
        if abs(self.x) > self.bound:
            self.x = float(np.clip(self.x, -self.bound, self.bound))
            self.v = 0.0
        truncated = self._steps + 1 >= self.horizon
        return np.array([self.x, self.v]), reward, truncated, truncated


class DatasetBandit(Env):
    """Classification as a length-one episode: reward 1 for the right class."""

    def __init__(self, features, labels, n_classes: int | None = None):
        super().__init__()
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.labels) == 0:
            raise ConfigError("features must be (n, d) with n matching labels, n >= 1")
        self.n_classes = int(n_classes if n_classes is not None else self.labels.max() + 1)
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ConfigError("labels outside 0..n_classes-1")
        self.spec = EnvSpec(self.features.shape[1], Discrete(self.n_classes), 1, (0.0, 1.0))
        self.order = np.arange(len(self.labels))
        self.cursor = len(self.order)
        self.current = 0

    @classmethod
    def from_csv(cls, path, n_classes: int | None = None) -> "DatasetBandit":
        rows = [r for r in csv.reader(Path(path).read_text().splitlines()) if r]
        data = np.array([[float(v) for v in r] for r in rows])
        return cls(data[:, :-1], data[:, -1].astype(np.int64), n_classes)

    def label_of(self, state) -> int:
        """The labelling function h(s) for states from the dataset."""
        hits = np.flatnonzero(np.all(self.features == np.asarray(state), axis=1))
        if hits.size == 0:
            raise KeyError("state not in dataset")
        return int(self.labels[hits[0]])

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Serve the next sample of a shuffled pass; a seed restarts the pass."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
            self.cursor = len(self.order)
        self._steps = 0
        self._done = False
        if self.cursor + 1 >= len(self.order):
            self.order = self.rng.permutation(len(self.labels))
            self.cursor = -1
        self.cursor += 1
        self.current = int(self.order[self.cursor])
        return self.features[self.current].copy()

    def _step(self, a):
        reward = 1.0 if a == self.labels[self.current] else 0.0
        return self.features[self.current].copy(), reward, True, False


class TimeLimit(Env):
    """Cuts episodes at ``limit`` steps and appends ``remaining / limit``."""

    def __init__(self, env: Env, limit: int):
        super().__init__()
        if limit < 1:
            raise ConfigError(f"time limit must be >= 1, got {limit}")
        self.env = env
        self.limit = int(limit)
        inner = env.spec
        steps = limit if inner.max_episode_steps is None else min(limit, inner.max_episode_steps)
        self.spec = EnvSpec(inner.state_dim + 1, inner.action_space, steps, inner.reward_range)

    def _augment(self, state) -> np.ndarray:
        return np.append(state, (self.limit - self._steps) / self.limit)

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._steps = 0
        self._done = False
        return self._augment(self.env.reset(seed))

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeStateError("step called after the episode ended; call reset first")
        state, reward, done, truncated = self.env.step(action)
        self._steps += 1
        if self._steps >= self.limit and not done:
            done, truncated = True, True
        self._done = done
        return StepResult(self._augment(state), reward, done, truncated)

    @property
    def rng(self):
        return self.env.rng

    @rng.setter
    def rng(self, value):
        if hasattr(self, "env"):
            self.env.rng = value


def with_time_limit(env: Env, limit: int) -> TimeLimit:
    return TimeLimit(env, limit)


def exact_model(env: Env) -> ExactModel | None:
    return env.exact_model()


def value_iteration(model: ExactModel, gamma: float, tol: float = 1e-12, max_iter: int = 100_000):
    """Synchronous value iteration. Returns ``(V, Q, iterations)``."""
    q = np.zeros((model.n_states, model.n_actions))
    cont = (~model.done).astype(np.float64)
    for it in range(1, max_iter + 1):
        v = q.max(axis=1)
        q_new = model.reward + gamma * cont * v[model.next_state]
        delta = np.max(np.abs(q_new - q))
        q = q_new
        if delta < tol:
            return q.max(axis=1), q, it
    return q.max(axis=1), q, max_iter


def make_blobs(
    n_samples: int,
    n_classes: int,
    dim: int = 2,
    separation: float = 4.0,
    noise: float = 1.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian blobs with centres spaced ``separation`` apart on a circle."""
    rng = rng if rng is not None else np.random.default_rng(0)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    radius = separation / (2 * np.sin(np.pi / n_classes)) if n_classes > 1 else 0.0
    centres = np.zeros((n_classes, dim))
    centres[:, 0] = radius * np.cos(angles)
    if dim > 1:
        centres[:, 1] = radius * np.sin(angles)
    labels = rng.integers(n_classes, size=n_samples)
    feats = centres[labels] + noise * rng.standard_normal((n_samples, dim))
    return feats, labels


ENV_NAMES = ("chain", "gridworld", "pointmass", "bandit")


def parse_cells(text: str) -> tuple[tuple[int, int], ...]:
    """Parse ``"x,y;x,y"`` into cell tuples."""
    cells = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        try:
            x, y = (int(v) for v in part.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad cell {part!r}; expected 'x,y'") from exc
        cells.append((x, y))
    return tuple(cells)


def make_env(name: str, time_limit: int | None = None, rng: np.random.Generator | None = None, **params) -> Env:
    """Build an environment by name; ``bandit`` accepts ``csv`` or blob params."""
    if name == "chain":
        env: Env = ChainWorld(int(params.get("length", 5)), float(params.get("step_penalty", 0.0)))
    elif name == "gridworld":
        obstacles = params.get("obstacles", ())
        if isinstance(obstacles, str):
            obstacles = parse_cells(obstacles)
        env = GridWorld(
            int(params.get("width", 4)),
            int(params.get("height", 4)),
            obstacles,
            step_penalty=float(params.get("step_penalty", 0.01)),
        )
    elif name == "pointmass":
        env = PointMass(int(params.get("horizon", 100)))
    elif name == "bandit":
        if params.get("csv"):
            env = DatasetBandit.from_csv(params["csv"])
        else:
            feats, labels = make_blobs(
                int(params.get("n_samples", 600)),
                int(params.get("n_classes", 3)),
                int(params.get("dim", 2)),
                float(params.get("separation", 4.0)),
                float(params.get("noise", 1.0)),
                rng,
            )
            env = DatasetBandit(feats, labels, int(params.get("n_classes", 3)))
    else:
        raise ConfigError(f"unknown env {name!r}; expected one of {', '.join(ENV_NAMES)}")
    if time_limit:
        env = with_time_limit(env, time_limit)
    return env


@dataclass
class EvalReport:
    returns: np.ndarray
    terminated: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))

    @property
    def success_rate(self) -> float:
        """Fraction of episodes that ended in a true terminal, not a cutoff."""
        return float(np.mean(self.terminated))


def evaluate(env: Env, act, episodes: int = 20, seed: int = 0, max_steps: int = 10_000) -> EvalReport:
    """Run ``act(state)`` for ``episodes`` episodes seeded ``seed, seed+1, ...``."""
    returns = np.zeros(episodes)
    terminated = np.zeros(episodes, dtype=bool)
    for ep in range(episodes):
        s = env.reset(seed=seed + ep)
        for _ in range(max_steps):
            s, r, done, truncated = env.step(act(s))
            returns[ep] += r
            if done:
                terminated[ep] = not truncated
                break
    return EvalReport(returns, terminated)
