"""Soft actor-critic: twin critics, tanh-Gaussian actor, learned temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .buffer import Batch, ReplayBuffer, collate
from .env import Box, Transition, evaluate
from .errors import ConfigError
from .ndmath import Adam, Mlp, ParamSet, as_tensor
from .policy import PolicyHead, TanhGaussian
from .value import (
    Polyak,
    QFunction,
    StateActionToScalar,
    TargetNetwork,
    action_path,
    q_action_gradient,
    td_loss,
    update_target,
)


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.995
    lr: float = 3e-4
    batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    hidden: tuple = (32, 32)
    init_alpha: float = 1.0
    target_entropy: float | None = None
    schedule: str = "per_step"
    eval_every: int = 5000
    eval_episodes: int = 20

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"sac.gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"sac.tau must lie in [0, 1], got {self.tau}")
        if self.schedule not in ("per_step", "per_episode"):
            raise ConfigError(f"sac.schedule must be per_step or per_episode, got {self.schedule!r}")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.init_alpha <= 0:
            raise ConfigError("sac.batch_size, sac.buffer_capacity and sac.init_alpha must be positive")


class SacAgent:
    def __init__(self, state_dim: int, action_dim: int, config: SacConfig | None = None, rng=None):
        self.config = config or SacConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config
        self.action_dim = action_dim
        actor_rng, q1_rng, q2_rng = (np.random.default_rng(s) for s in rng.integers(2**31, size=3))
        trunk = Mlp([state_dim, *c.hidden, 2 * action_dim], rng=actor_rng)
        self.actor = PolicyHead(TanhGaussian(action_dim), trunk)
        mode = StateActionToScalar(action_dim)
        self.q1 = QFunction(Mlp([state_dim + action_dim, *c.hidden, 1], rng=q1_rng), mode)
        self.q2 = QFunction(Mlp([state_dim + action_dim, *c.hidden, 1], rng=q2_rng), mode)
        self.q1_tgt = TargetNetwork(self.q1, Polyak(c.tau))
        self.q2_tgt = TargetNetwork(self.q2, Polyak(c.tau))
        self.temperature = ParamSet({"log_alpha": np.array([math.log(c.init_alpha)])})
        self.target_entropy = float(-action_dim if c.target_entropy is None else c.target_entropy)
        self.gamma = c.gamma
        self.buffer = ReplayBuffer(c.buffer_capacity)
        self.actor_opt = Adam(self.actor.trunk, lr=c.lr)
        self.q1_opt = Adam(self.q1.net, lr=c.lr)
        self.q2_opt = Adam(self.q2.net, lr=c.lr)
        self.alpha_opt = Adam(self.temperature, lr=c.lr)

    @property
    def log_alpha(self) -> float:
        return float(self.temperature.params["log_alpha"][0])

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def act(self, state, rng: np.random.Generator):
        return self.actor.sample(state, rng)[0]

    def act_greedy(self, state):
        return self.actor.act_greedy(state)

    def state_dict(self) -> dict:
        out = {}
        out.update(self.actor.trunk.state_dict("actor."))
        out.update(self.q1.net.state_dict("q1."))
        out.update(self.q2.net.state_dict("q2."))
        out.update(self.q1_tgt.q.net.state_dict("q1_tgt."))
        out.update(self.q2_tgt.q.net.state_dict("q2_tgt."))
        out.update(self.temperature.state_dict("temp."))
        return out

    def load_state_dict(self, tensors: dict) -> None:
        self.actor.trunk.load_state_dict(tensors, "actor.")
        self.q1.net.load_state_dict(tensors, "q1.")
        self.q2.net.load_state_dict(tensors, "q2.")
        self.q1_tgt.q.net.load_state_dict(tensors, "q1_tgt.")
        self.q2_tgt.q.net.load_state_dict(tensors, "q2_tgt.")
        self.temperature.load_state_dict(tensors, "temp.")


def _as_batch(minibatch) -> Batch:
    if isinstance(minibatch, Batch):
        return minibatch
    if len(minibatch) == 0:
        raise ConfigError("SAC update needs a non-empty minibatch")
    return collate(minibatch)


def sac_target(agent: SacAgent, batch: Batch, noise) -> np.ndarray:
    """``r + gamma * (min_i Q'_i(s', a') - alpha log pi(a'|s'))`` with ``a' = a'(noise)``."""
    s2 = batch.next_states
    z = agent.actor.trunk.forward(s2)
    rep = agent.actor.kind.rsample(z, noise)
    q_next = np.minimum(agent.q1_tgt.value(s2, rep.action), agent.q2_tgt.value(s2, rep.action))
    soft = q_next - agent.alpha * rep.log_prob
    return np.where(batch.terminal, batch.rewards, batch.rewards + agent.gamma * soft)


def sac_critic_loss(agent: SacAgent, minibatch, noise) -> tuple[float, float]:
    """Accumulate both critics' gradients for one minibatch; returns their losses."""
    batch = _as_batch(minibatch)
    y = sac_target(agent, batch, noise)
    l1, _ = td_loss(agent.q1, batch.states, batch.actions, y)
    l2, _ = td_loss(agent.q2, batch.states, batch.actions, y)
    return l1, l2


def sac_critic_update(agent: SacAgent, minibatch, rng: np.random.Generator) -> tuple[float, float]:
    batch = _as_batch(minibatch)
    noise = rng.standard_normal((len(batch.rewards), agent.action_dim))
    agent.q1.net.zero_grad()
    agent.q2.net.zero_grad()
    losses = sac_critic_loss(agent, batch, noise)
    agent.q1_opt.step()
    agent.q2_opt.step()
    return losses


def sac_actor_loss(agent: SacAgent, states, noise) -> tuple[float, np.ndarray]:
    """``mean(alpha log pi(a|s) - min_i Q_i(s, a))`` along the reparametrised path.

    Gradients go into the actor only. Returns the loss and the log-probs.
    """
    s = np.atleast_2d(as_tensor(states))
    a, logp, backprop = action_path(agent.actor, s, noise=noise)
    q1v, dq1 = q_action_gradient(agent.q1, s, a)
    q2v, dq2 = q_action_gradient(agent.q2, s, a)
    first = (q1v <= q2v)[:, None]
    qmin = np.minimum(q1v, q2v)
    dqmin = np.where(first, dq1, dq2)
    alpha = agent.alpha
    n = len(s)
    backprop(-dqmin / n, np.full(n, alpha / n))
    return float(np.mean(alpha * logp - qmin)), logp


def sac_actor_update(agent: SacAgent, minibatch, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    batch = _as_batch(minibatch)
    noise = rng.standard_normal((len(batch.states), agent.action_dim))
    agent.actor.trunk.zero_grad()
    loss, logp = sac_actor_loss(agent, batch.states, noise)
    agent.actor_opt.step()
    return loss, logp


def sac_temperature_loss(agent: SacAgent, log_probs) -> float:
    """``mean(-alpha (log pi + H_target))`` with ``log pi`` held constant."""
    lp = as_tensor(log_probs).reshape(-1)
    alpha = agent.alpha
    inner = float(np.mean(lp + agent.target_entropy))
    agent.temperature.grads["log_alpha"][0] += -alpha * inner
    return -alpha * inner


def sac_temperature_update(agent: SacAgent, minibatch=None, rng=None, log_probs=None) -> float:
    """One step on ``log_alpha``; samples fresh actions unless ``log_probs`` is given."""
    if log_probs is None:
        batch = _as_batch(minibatch)
        log_probs = agent.actor.sample(batch.states, rng)[1]
    agent.temperature.zero_grad()
    sac_temperature_loss(agent, log_probs)
    agent.alpha_opt.step()
    return agent.alpha


def sac_update(agent: SacAgent, rng: np.random.Generator) -> dict:
    """Critic, actor, temperature and Polyak steps on one replay minibatch."""
    batch = agent.buffer.sample_batch(agent.config.batch_size, rng)
    l1, l2 = sac_critic_update(agent, batch, rng)
    actor_loss, logp = sac_actor_update(agent, batch, rng)
    alpha = sac_temperature_update(agent, log_probs=logp)
    update_target(agent.q1_tgt, agent.q1)
    update_target(agent.q2_tgt, agent.q2)
    return {
        "q1_loss": l1,
        "q2_loss": l2,
        "actor_loss": actor_loss,
        "alpha": alpha,
        "entropy": float(-np.mean(logp)),
    }


@dataclass
class SacLog:
    rows: list = field(default_factory=list)
    env_steps: int = 0
    updates: int = 0


def sac_train(
    agent: SacAgent,
    env,
    total_steps: int,
    rng: np.random.Generator,
    log_row: Callable | None = None,
    eval_env=None,
    eval_seed: int = 10_000,
) -> SacLog:
    """Collect with the stochastic actor and update per the configured schedule.

    ``per_step`` runs one update per environment step after a uniform-random
    warmup. ``per_episode`` runs a single update after each collected
    episode.
    """
    space = env.spec.action_space
    if not isinstance(space, Box):
        raise ConfigError("SAC supports continuous (box) action spaces only")
    c = agent.config
    out = SacLog()

    def emit(row):
        out.rows.append(row)
        if log_row is not None:
            log_row(row)

    s = env.reset(seed=int(rng.integers(2**31)))
    ep_return = 0.0
    last: dict = {}
    next_eval = c.eval_every
    while out.env_steps < total_steps:
        if out.env_steps < c.warmup_steps:
            a = rng.uniform(space.low, space.high, size=space.dim)
        else:
            a = agent.act(s, rng)
        s2, r, done, truncated = env.step(a)
        agent.buffer.push(Transition(s, np.array(a, dtype=np.float64), r, s2, done, truncated))
        out.env_steps += 1
        ep_return += r
        s = s2
        if c.schedule == "per_step" and out.env_steps > c.warmup_steps:
            last = sac_update(agent, rng)
            out.updates += 1
        if done:
            if c.schedule == "per_episode" and out.env_steps > c.warmup_steps:
                last = sac_update(agent, rng)
                out.updates += 1
            emit({"env_steps": out.env_steps, "updates": out.updates, "train_return": ep_return, **last})
            ep_return = 0.0
            s = env.reset(seed=int(rng.integers(2**31)))
        if c.eval_every > 0 and out.env_steps >= next_eval:
            next_eval += c.eval_every
            report = evaluate(eval_env or env, agent.act_greedy, c.eval_episodes, eval_seed)
            emit({"env_steps": out.env_steps, "updates": out.updates, "eval_return": report.mean,
                  "eval_return_std": report.std})
            if eval_env is None:
                s = env.reset(seed=int(rng.integers(2**31)))
                ep_return = 0.0
    return out


def policy_entropy(agent: SacAgent, states, rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of ``-E[log pi(a|s)]`` over the given states."""
    return float(-np.mean(agent.actor.sample(np.atleast_2d(states), rng)[1]))
