"""Deep Q-learning with replay, a target network and optional n-step targets."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .buffer import ReplayBuffer, collate
from .env import Discrete, Transition, evaluate
from .errors import ConfigError
from .ndmath import Adam, Mlp
from .policy import EpsilonGreedy, explore
from .value import (
    HardCopy,
    Polyak,
    QFunction,
    StateToAllActions,
    TargetNetwork,
    greedy_bootstrap,
    td_loss,
    update_target,
)


@dataclass
class QLearnConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    buffer_capacity: int = 50_000
    batch_size: int = 64
    warmup_steps: int = 500
    train_every: int = 1
    target: str = "hard"
    target_period: int = 1000
    tau: float = 0.995
    double: bool = True
    nstep: int = 1
    prioritized: bool = False
    omega: float = 0.6
    priority_floor: float = 1e-3
    importance_beta: float = 0.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: int = 10_000
    eps_shape: str = "linear"
    eval_every: int = 5000
    eval_episodes: int = 20

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"qlearn.gamma must lie in [0, 1], got {self.gamma}")
        if self.target not in ("hard", "polyak"):
            raise ConfigError(f"qlearn.target must be hard or polyak, got {self.target!r}")
        if self.nstep < 1:
            raise ConfigError(f"qlearn.nstep must be >= 1, got {self.nstep}")
        if self.batch_size < 1 or self.train_every < 1 or self.buffer_capacity < 1:
            raise ConfigError("qlearn.batch_size, train_every and buffer_capacity must be >= 1")


class NStepAccumulator:
    """Turns a stream of one-step transitions into ``n``-step aggregates.

    The aggregate from ``s_t`` carries ``sum_i gamma^i r_{t+i}``, the state
    ``k <= n`` steps later, and ``steps = k``. At episode end every pending
    window is flushed with the terminal flags of the last step.
    """

    def __init__(self, n: int, gamma: float):
        self.n = n
        self.gamma = gamma
        self.window: deque = deque()

    def _emit(self, last: Transition) -> Transition:
        ret = 0.0
        for i, t in enumerate(self.window):
            ret += self.gamma**i * t.reward
        first = self.window[0]
        return Transition(first.state, first.action, ret, last.next_state, last.done, last.truncated,
                          len(self.window))

    def push(self, t: Transition) -> list[Transition]:
        self.window.append(t)
        out = []
        if t.done:
            while self.window:
                out.append(self._emit(t))
                self.window.popleft()
        elif len(self.window) == self.n:
            out.append(self._emit(t))
            self.window.popleft()
        return out


class DqnAgent:
    def __init__(self, state_dim: int, n_actions: int, config: QLearnConfig, rng: np.random.Generator):
        self.config = config
        net = Mlp([state_dim, *config.hidden, n_actions], rng=rng)
        self.q = QFunction(net, StateToAllActions(n_actions))
        mode = HardCopy(config.target_period) if config.target == "hard" else Polyak(config.tau)
        self.target = TargetNetwork(self.q, mode)
        self.opt = Adam(self.q.net, lr=config.lr)
        self.buffer = ReplayBuffer(config.buffer_capacity, config.prioritized, config.omega, config.priority_floor)
        self.schedule = EpsilonGreedy(config.eps_start, config.eps_end, config.eps_decay, config.eps_shape)
        self.action_space = Discrete(n_actions)

    def act_greedy(self, state) -> int:
        return int(np.argmax(self.q.all_values(state)))

    def act(self, state, rng: np.random.Generator) -> int:
        return explore(self.schedule, self.act_greedy(state), self.action_space, rng)

    def targets(self, batch) -> np.ndarray:
        select = self.q if self.config.double else None
        boot, _ = greedy_bootstrap(select, self.target, batch.next_states)
        disc = self.config.gamma ** batch.steps.astype(np.float64)
        return np.where(batch.terminal, batch.rewards, batch.rewards + disc * boot)

    def update(self, rng: np.random.Generator) -> float:
        sample = self.buffer.sample(self.config.batch_size, rng)
        batch = collate(sample)
        weights = None
        if self.config.prioritized and self.config.importance_beta > 0:
            weights = self.buffer.importance_weights([p for _, _, p in sample], self.config.importance_beta)
        y = self.targets(batch)
        self.q.net.zero_grad()
        loss, err = td_loss(self.q, batch.states, batch.actions, y, weights)
        self.opt.step()
        if self.config.prioritized:
            self.buffer.update_priorities([sid for sid, _, _ in sample], err)
        update_target(self.target, self.q)
        return loss

    def state_dict(self) -> dict:
        out = self.q.net.state_dict("q.")
        out.update(self.target.q.net.state_dict("q_tgt."))
        return out


@dataclass
class QLearnResult:
    agent: DqnAgent
    history: list = field(default_factory=list)
    env_steps: int = 0
    updates: int = 0


def qlearn_train(
    env,
    config: QLearnConfig,
    total_steps: int,
    rng: np.random.Generator,
    log_row: Callable | None = None,
    eval_env=None,
    eval_seed: int = 10_000,
    agent: DqnAgent | None = None,
) -> QLearnResult:
    if not isinstance(env.spec.action_space, Discrete):
        raise ConfigError("Q-learning needs a discrete action space")
    if agent is None:
        agent = DqnAgent(env.spec.state_dim, env.spec.action_space.n, config, rng)
    res = QLearnResult(agent)
    acc = NStepAccumulator(config.nstep, config.gamma)

    def emit(row):
        res.history.append(row)
        if log_row is not None:
            log_row(row)

    s = env.reset(seed=int(rng.integers(2**31)))
    ep_return, loss = 0.0, None
    while res.env_steps < total_steps:
        a = agent.act(s, rng)
        s2, r, done, truncated = env.step(a)
        for t in acc.push(Transition(s, a, r, s2, done, truncated)):
            agent.buffer.push(t)
        res.env_steps += 1
        ep_return += r
        s = s2
        if res.env_steps > config.warmup_steps and res.env_steps % config.train_every == 0:
            loss = agent.update(rng)
            res.updates += 1
        if done:
            row = {"env_steps": res.env_steps, "updates": res.updates, "train_return": ep_return,
                   "epsilon": agent.schedule.epsilon()}
            if loss is not None:
                row["td_loss"] = loss
            emit(row)
            ep_return = 0.0
            s = env.reset(seed=int(rng.integers(2**31)))
        if eval_env is not None and config.eval_every > 0 and res.env_steps % config.eval_every == 0:
            report = evaluate(eval_env, agent.act_greedy, config.eval_episodes, eval_seed)
            emit({"env_steps": res.env_steps, "updates": res.updates, "eval_return": report.mean,
                  "eval_return_std": report.std, "eval_success": report.success_rate})
    return res
