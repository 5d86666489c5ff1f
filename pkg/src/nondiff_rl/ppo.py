"""Proximal policy optimisation with a clipped surrogate and GAE targets.

``M`` actors each own an environment that persists across iterations. Every
iteration collects exactly ``M * T`` rows, computes advantages once with the
pre-update value head, then runs ``K`` epochs of shuffled minibatch updates
on ``L_pi + c1 L_V + c2 L_H``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import Box, Discrete, Env, evaluate
from .errors import ConfigError, RolloutError, TrainingDivergenceError
from .ndmath import Adam, Mlp, as_tensor
from .onpolicy import EpisodeTrace, gae, normalize
from .policy import Categorical, TanhGaussian
from .seeding import int_seed, stream


@dataclass
class PpoConfig:
    clip: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    actors: int = 8
    steps: int = 128
    epochs: int = 4
    minibatch: int = 256
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 3e-4
    lr_decay: bool = True
    normalize_advantages: bool = True
    hidden: tuple = (64, 64)
    max_grad_norm: float = 10.0
    workers: int = 1

    def __post_init__(self):
        if self.clip <= 0:
            raise ConfigError(f"ppo.clip must be > 0, got {self.clip}")
        for name in ("actors", "steps", "epochs", "minibatch", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ppo.{name} must be >= 1, got {getattr(self, name)}")
        if (self.actors * self.steps) % self.minibatch:
            raise ConfigError(
                f"ppo.minibatch={self.minibatch} must divide actors*steps={self.actors * self.steps}"
            )
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"ppo.{name} must lie in [0, 1], got {getattr(self, name)}")

    @property
    def batch_size(self) -> int:
        return self.actors * self.steps


class ActorCriticNet:
    """One MLP whose last layer emits the policy parameters plus one value unit."""

    def __init__(self, state_dim: int, kind, hidden=(64, 64), rng=None, net: Mlp | None = None):
        self.kind = kind
        self.net = net if net is not None else Mlp(
            [state_dim, *hidden, kind.param_dim + 1], rng=rng, hidden_activation="tanh"
        )

    @classmethod
    def for_space(cls, state_dim: int, space, hidden=(64, 64), rng=None) -> "ActorCriticNet":
        if isinstance(space, Discrete):
            return cls(state_dim, Categorical(space.n), hidden, rng)
        if isinstance(space, Box):
            return cls(state_dim, TanhGaussian(space.dim), hidden, rng)
        raise ConfigError(f"unsupported action space {space!r}")

    @property
    def param_dim(self) -> int:
        return self.kind.param_dim

    def split(self, out):
        out = as_tensor(out)
        return out[..., : self.param_dim], out[..., self.param_dim]

    def policy_params(self, states):
        return self.split(self.net.forward(states))[0]

    def value(self, states):
        return self.split(self.net.forward(states))[1]

    def act_greedy(self, state):
        return self.kind.greedy(self.policy_params(state))

    def clone(self) -> "ActorCriticNet":
        return ActorCriticNet(0, self.kind, net=self.net.clone())


def ppo_clip_loss(ratio, advantage, clip: float):
    """``-min(r A, clip(r, 1-clip, 1+clip) A)`` and its derivative in ``r``."""
    r = as_tensor(ratio)
    a = as_tensor(advantage)
    unclipped = r * a
    clipped = np.clip(r, 1.0 - clip, 1.0 + clip) * a
    loss = -np.minimum(unclipped, clipped)
    grad = np.where(unclipped <= clipped, -a, 0.0)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def entropy_bonus(model, states, rng=None) -> float:
    """``mean_s sum_a pi log pi``, i.e. the negated mean entropy (to be minimised)."""
    z = model.policy_params(states) if hasattr(model, "policy_params") else model.trunk.forward(states)
    h, _ = model.kind.entropy(np.atleast_2d(z), rng)
    return float(-np.mean(h))


# ------------------------------------------------------------------ rollout


@dataclass
class Actor:
    index: int
    env: Env
    rng: np.random.Generator
    state: np.ndarray | None = None
    ep_return: float = 0.0
    ep_len: int = 0
    finished: list = field(default_factory=list)


def make_actors(env_factory: Callable[[int], Env], count: int, seed: int) -> list[Actor]:
    return [Actor(i, env_factory(i), stream(seed, "ppo.actor", i)) for i in range(count)]


@dataclass
class RolloutBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    actors: int
    steps: int
    episodes: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


def _collect(net: ActorCriticNet, actor: Actor, steps: int) -> dict:
    states, actions, rewards, done, trunc = [], [], [], [], []
    boot_rows, boot_states = [], []
    actor.finished = []
    for t in range(steps):
        if actor.state is None:
            actor.state = actor.env.reset(seed=int(actor.rng.integers(2**31)))
        s = actor.state
        a, _ = net.kind.sample(net.policy_params(s), actor.rng)
        s2, r, d, tr = actor.env.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        done.append(d)
        trunc.append(tr)
        actor.ep_return += r
        actor.ep_len += 1
        if d:
            actor.finished.append({"actor": actor.index, "return": actor.ep_return, "length": actor.ep_len,
                                   "success": not tr})
            actor.ep_return, actor.ep_len = 0.0, 0
            if tr:
                boot_rows.append(t)
                boot_states.append(s2)
            actor.state = actor.env.reset(seed=int(actor.rng.integers(2**31)))
        else:
            actor.state = s2
            if t == steps - 1:
                boot_rows.append(t)
                boot_states.append(s2)
    return dict(states=states, actions=actions, rewards=rewards, done=done, trunc=trunc,
                boot_rows=boot_rows, boot_states=boot_states, finished=list(actor.finished))


def rollout(net: ActorCriticNet, actors: list[Actor], steps: int, workers: int = 1) -> RolloutBatch:
    """Collect ``steps`` rows from every actor, merged in actor order.

    Workers only change scheduling: each actor owns its environment and
    generator, so results are identical for any worker count.
    """
    cap = int(os.environ.get("NONDIFF_RL_THREADS", workers) or workers)
    workers = max(1, min(workers, cap, len(actors)))

    def run(actor):
        try:
            return _collect(net, actor, steps)
        except Exception as exc:
            raise RolloutError(actor.index, exc) from exc

    if workers == 1:
        parts = [run(a) for a in actors]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, actors))
    states = np.array([s for p in parts for s in p["states"]], dtype=np.float64)
    acts = np.array([a for p in parts for a in p["actions"]])
    # Log-probs and values come from one batched pass of the snapshot so that
    # later minibatch passes reproduce them bit for bit.
    params, values = net.split(net.net.forward(states))
    log_probs, _ = net.kind.log_prob(params, acts)
    next_values = np.zeros(len(states))
    rows = [m * steps + r for m, p in enumerate(parts) for r in p["boot_rows"]]
    if rows:
        boot = np.array([s for p in parts for s in p["boot_states"]], dtype=np.float64)
        next_values[rows] = net.value(boot)
    return RolloutBatch(
        states=states,
        actions=acts,
        rewards=np.array([r for p in parts for r in p["rewards"]], dtype=np.float64),
        done=np.array([d for p in parts for d in p["done"]], dtype=bool),
        truncated=np.array([d for p in parts for d in p["trunc"]], dtype=bool),
        log_probs=np.asarray(log_probs),
        values=np.asarray(values),
        next_values=next_values,
        actors=len(actors),
        steps=steps,
        episodes=[e for p in parts for e in p["finished"]],
    )


def segments(batch: RolloutBatch):
    """Yield ``(start, stop, terminal, bootstrap_value)`` per episode piece."""
    for m in range(batch.actors):
        start = m * batch.steps
        end = start + batch.steps
        for row in range(start, end):
            if batch.done[row] or row == end - 1:
                terminal = bool(batch.done[row] and not batch.truncated[row])
                yield start, row + 1, terminal, 0.0 if terminal else float(batch.next_values[row])
                start = row + 1


def compute_targets(batch: RolloutBatch, gamma: float, lam: float, normalize_advantages: bool = False) -> RolloutBatch:
    """Fill the ``advantages`` (GAE) and ``returns`` (``A + V``) columns."""
    adv = np.zeros(len(batch))
    for start, stop, terminal, boot in segments(batch):
        trace = EpisodeTrace(
            batch.states[start:stop],
            list(batch.actions[start:stop]),
            batch.rewards[start:stop],
            batch.log_probs[start:stop],
            np.append(batch.values[start:stop], boot),
            terminal,
        )
        adv[start:stop] = gae(trace, lam, None, gamma)
    batch.returns = adv + batch.values
    batch.advantages = normalize(adv) if normalize_advantages else adv
    return batch


# ------------------------------------------------------------------- update


def ppo_joint_loss(net: ActorCriticNet, states, actions, old_log_probs, advantages, returns,
                   config: PpoConfig, rng=None) -> dict:
    """Evaluate ``L_pi + c1 L_V + c2 L_H`` and accumulate its gradient into ``net.net``."""
    s = np.atleast_2d(as_tensor(states))
    n = len(s)
    out, cache = net.net.forward_train(s)
    z, v = net.split(out)
    lp, dlp = net.kind.log_prob(z, actions)
    ratio = np.exp(lp - as_tensor(old_log_probs))
    adv = as_tensor(advantages)
    per_row, dratio = ppo_clip_loss(ratio, adv, config.clip)
    policy_loss = float(np.mean(per_row))
    diff = v - as_tensor(returns)
    value_loss = float(np.mean(diff * diff))
    h, dh = net.kind.entropy(z, rng)
    entropy_loss = float(-np.mean(h))
    loss = policy_loss + config.c1 * value_loss + config.c2 * entropy_loss
    grad = np.zeros_like(out)
    grad[:, : net.param_dim] = (dratio * ratio / n)[:, None] * dlp - config.c2 * dh / n
    grad[:, net.param_dim] = config.c1 * 2.0 * diff / n
    net.net.backward(cache, grad)
    lo, hi = 1.0 - config.clip, 1.0 + config.clip
    return {
        "loss": loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy_loss": entropy_loss,
        "clip_fraction": float(np.mean((ratio < lo) | (ratio > hi))),
        "ratio_mean": float(np.mean(ratio)),
        "ratio_max": float(np.max(ratio)),
    }


def ppo_update(net: ActorCriticNet, batch: RolloutBatch, config: PpoConfig, opt: Adam,
               seed: int = 0, iteration: int = 0) -> list[dict]:
    """``K`` epochs of shuffled minibatch steps; returns mean stats per epoch."""
    if batch.advantages is None:
        raise ConfigError("compute_targets must run before ppo_update")
    n = len(batch)
    epochs = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, iteration, epoch])
        perm = rng.permutation(n)
        stats = []
        for start in range(0, n, config.minibatch):
            idx = perm[start : start + config.minibatch]
            net.net.zero_grad()
            row = ppo_joint_loss(net, batch.states[idx], batch.actions[idx], batch.log_probs[idx],
                                 batch.advantages[idx], batch.returns[idx], config, rng)
            if not np.isfinite(row["loss"]):
                raise TrainingDivergenceError("ppo.loss")
            opt.step()
            stats.append(row)
        epochs.append({k: float(np.mean([r[k] for r in stats])) for k in stats[0]})
        epochs[-1]["ratio_max"] = float(max(r["ratio_max"] for r in stats))
    return epochs


@dataclass
class PpoResult:
    net: ActorCriticNet
    history: list
    env_steps: int
    iterations: int
    last_eval: dict | None = None


def ppo_train(
    env_factory: Callable[[int], Env],
    config: PpoConfig,
    total_steps: int,
    seed: int = 0,
    log_row: Callable | None = None,
    eval_env: Env | None = None,
    eval_every: int = 10,
    eval_episodes: int = 100,
    target_success: float | None = None,
    net: ActorCriticNet | None = None,
) -> PpoResult:
    """Train from scratch; stops early once greedy success reaches ``target_success``."""
    if net is None:
        probe = env_factory(0)
        net = ActorCriticNet.for_space(probe.spec.state_dim, probe.spec.action_space, config.hidden,
                                       stream(seed, "ppo.init"))
    actors = make_actors(env_factory, config.actors, seed)
    opt = Adam(net.net, lr=config.lr, max_grad_norm=config.max_grad_norm)
    iterations = max(1, total_steps // config.batch_size)
    shuffle_seed = int_seed(seed, "ppo.shuffle")
    history: list[dict] = []
    result = PpoResult(net, history, 0, 0)

    def emit(row):
        history.append(row)
        if log_row is not None:
            log_row(row)

    for it in range(iterations):
        if config.lr_decay:
            opt.lr = config.lr * (1.0 - it / iterations)
        batch = rollout(net, actors, config.steps, config.workers)
        compute_targets(batch, config.gamma, config.lam, config.normalize_advantages)
        epochs = ppo_update(net, batch, config, opt, shuffle_seed, it)
        result.env_steps += len(batch)
        result.iterations = it + 1
        row = {"iteration": it + 1, "env_steps": result.env_steps, "lr": opt.lr, **epochs[-1]}
        if batch.episodes:
            row["train_return"] = float(np.mean([e["return"] for e in batch.episodes]))
            row["train_success"] = float(np.mean([e["success"] for e in batch.episodes]))
        emit(row)
        last = it == iterations - 1
        if eval_env is not None and eval_every > 0 and ((it + 1) % eval_every == 0 or last):
            report = evaluate(eval_env, net.act_greedy, eval_episodes, int_seed(seed, "ppo.eval"))
            result.last_eval = {"env_steps": result.env_steps, "eval_return": report.mean,
                                "eval_return_std": report.std, "eval_success": report.success_rate}
            emit(dict(result.last_eval))
            if target_success is not None and report.success_rate >= target_success:
                break
    return result
