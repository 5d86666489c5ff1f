"""On-policy return estimators, advantages and the REINFORCE learner.

Value estimates for a trace are an array of length ``N + 1``: entry ``N``
is the bootstrap value of the state after the last step, used only when the
episode was truncated. True terminals bootstrap with zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError
from .ndmath import Adam, Mlp, as_tensor, mse_loss
from .policy import Categorical, PolicyHead

log = logging.getLogger(__name__)

RATIO_HIGH, RATIO_LOW = 1e6, 1e-6


@dataclass
class EpisodeTrace:
    """One episode (or an episode segment) as parallel arrays.

    ``states`` has ``N`` or ``N + 1`` rows; the extra row is the state after
    the final step. ``terminal`` is False for truncated segments.
    """

    states: np.ndarray
    actions: list
    rewards: np.ndarray
    log_probs: np.ndarray | None = None
    values: np.ndarray | None = None
    terminal: bool = True

    def __post_init__(self):
        self.rewards = as_tensor(self.rewards).reshape(-1)
        if len(self.rewards) == 0:
            raise DimensionError("an episode trace needs at least one step")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("trace rewards must be finite")
        self.states = as_tensor(self.states)
        if len(self.states) not in (len(self.rewards), len(self.rewards) + 1):
            raise DimensionError(f"{len(self.states)} states for {len(self.rewards)} rewards")
        if self.values is not None:
            self.values = as_tensor(self.values).reshape(-1)
            if len(self.values) != len(self.rewards) + 1:
                raise DimensionError("values need one entry per state plus the bootstrap state")

    def __len__(self) -> int:
        return len(self.rewards)


class ValueFunction:
    """State-value network ``V(s)`` with a single output."""

    def __init__(self, net: Mlp):
        if net.out_dim != 1:
            raise DimensionError(f"value net must have one output, has {net.out_dim}")
        self.net = net

    def __call__(self, states) -> np.ndarray:
        out = self.net.forward(states)
        return out[..., 0]


class TableValue:
    """``V`` as a lookup table over one-hot states."""

    def __init__(self, table):
        self.table = as_tensor(table)

    def __call__(self, states) -> np.ndarray:
        s = as_tensor(states)
        idx = np.argmax(s[..., : len(self.table)], axis=-1)
        return self.table[idx]


def trace_values(trace: EpisodeTrace, v=None) -> np.ndarray:
    """``V(s_0..s_N)`` with the last entry zeroed on true terminals."""
    if v is None:
        if trace.values is None:
            raise ConfigError("trace has no stored values; pass a value function")
        vals = trace.values.copy()
    else:
        if len(trace.states) != len(trace) + 1:
            raise DimensionError("evaluating V needs the final state as well")
        vals = as_tensor(v(trace.states)).reshape(-1).copy()
    if trace.terminal:
        vals[-1] = 0.0
    return vals


def _check_t(trace: EpisodeTrace, t: int) -> None:
    if not 0 <= t < len(trace):
        raise IndexError(f"time index {t} outside 0..{len(trace) - 1}")


def _check_unit(name: str, x: float) -> None:
    if not 0.0 <= x <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {x}")


def mc_return(trace: EpisodeTrace, t: int) -> float:
    _check_t(trace, t)
    return float(np.sum(trace.rewards[t:]))


def discounted_return(trace: EpisodeTrace, t: int, gamma: float) -> float:
    _check_t(trace, t)
    _check_unit("gamma", gamma)
    g = 0.0
    for r in trace.rewards[t:][::-1]:
        g = r + gamma * g
    return float(g)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Reward-to-go ``G_t`` for every ``t`` of one episode."""
    rewards = as_tensor(rewards)
    out = np.zeros_like(rewards)
    g = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        g = rewards[i] + gamma * g
        out[i] = g
    return out


def nstep_return_v(trace: EpisodeTrace, t: int, n: int, v, gamma: float) -> float:
    """``sum_{i<n} gamma^i r_{t+i} + gamma^n V(s_{t+n})``, clipped at the episode end."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    _check_t(trace, t)
    _check_unit("gamma", gamma)
    vals = trace_values(trace, v)
    end = min(t + n, len(trace))
    g = 0.0
    for i in range(end - 1, t - 1, -1):
        g = trace.rewards[i] + gamma * g
    return float(g + gamma ** (end - t) * vals[end])


def lambda_returns(trace: EpisodeTrace, lam: float, v, gamma: float) -> np.ndarray:
    """All ``G^lambda_t`` by the backward recursion

    ``G_t = r_t + gamma * ((1 - lam) V(s_{t+1}) + lam * G_{t+1})`` with
    ``G_N = V(s_N)`` (zero on terminals).
    """
    _check_unit("lambda", lam)
    _check_unit("gamma", gamma)
    vals = trace_values(trace, v)
    n = len(trace)
    out = np.zeros(n)
    g = vals[n]
    for t in range(n - 1, -1, -1):
        nxt = vals[t + 1] if t + 1 < n else g
        g = trace.rewards[t] + gamma * ((1.0 - lam) * nxt + lam * g)
        out[t] = g
    return out


def lambda_return(trace: EpisodeTrace, t: int, lam: float, v, gamma: float) -> float:
    _check_t(trace, t)
    return float(lambda_returns(trace, lam, v, gamma)[t])


def advantage_td0(trace: EpisodeTrace, t: int, v, gamma: float) -> float:
    _check_t(trace, t)
    vals = trace_values(trace, v)
    return float(trace.rewards[t] + gamma * vals[t + 1] - vals[t])


def gae(trace: EpisodeTrace, lam: float, v, gamma: float) -> np.ndarray:
    """Generalized advantages via ``A_t = delta_t + gamma * lam * A_{t+1}``."""
    _check_unit("lambda", lam)
    _check_unit("gamma", gamma)
    vals = trace_values(trace, v)
    deltas = trace.rewards + gamma * vals[1:] - vals[:-1]
    adv = np.zeros(len(trace))
    a = 0.0
    for t in range(len(trace) - 1, -1, -1):
        a = deltas[t] + gamma * lam * a
        adv[t] = a
    return adv


def normalize(x) -> np.ndarray:
    x = as_tensor(x)
    if x.size < 2:
        return x - x.mean()
    return (x - x.mean()) / (x.std() + 1e-8)


def value_loss(vf: ValueFunction, states, targets):
    """MSE of ``V(s)`` onto constant targets; gradients go into ``vf.net``."""
    pred, cache = vf.net.forward_train(np.atleast_2d(as_tensor(states)))
    loss, g = mse_loss(pred[:, 0], as_tensor(targets).reshape(-1))
    vf.net.backward(cache, g[:, None])
    return loss, vf.net.grads


def reinforce_loss(head: PolicyHead, states, actions, returns, baseline=None):
    """``-mean(log pi(a|s) * (G - b))``; gradients go into ``head.trunk``."""
    s = np.atleast_2d(as_tensor(states))
    weight = as_tensor(returns).reshape(-1)
    if baseline is not None:
        weight = weight - as_tensor(baseline).reshape(-1)
    if len(weight) != len(s):
        raise DimensionError(f"{len(weight)} returns for {len(s)} states")
    z, cache = head.trunk.forward_train(s)
    acts = np.asarray(actions)
    if not isinstance(head.kind, Categorical):
        acts = acts.reshape(len(s), -1)
    lp, dlp = head.kind.log_prob(z, acts)
    loss = float(-np.mean(lp * weight))
    head.trunk.backward(cache, -(weight / len(s))[:, None] * dlp)
    return loss, head.trunk.grads


def importance_weight(log_prob_now, log_prob_behavior, metrics: dict | None = None):
    """``exp(log_prob_now - log_prob_behavior)``; extreme ratios are counted.

    When ``metrics`` is given, ``metrics["ratio_explosions"]`` is increased
    by the number of ratios outside ``[1e-6, 1e6]``.
    """
    lp_now = as_tensor(log_prob_now)
    lp_beh = as_tensor(log_prob_behavior)
    if not (np.all(np.isfinite(lp_now)) and np.all(np.isfinite(lp_beh))):
        raise ValueError("log-probabilities must be finite")
    ratio = np.exp(lp_now - lp_beh)
    extreme = int(np.sum((ratio > RATIO_HIGH) | (ratio < RATIO_LOW)))
    if extreme:
        log.warning("importance ratio outside [%g, %g] for %d rows", RATIO_LOW, RATIO_HIGH, extreme)
        if metrics is not None:
            metrics["ratio_explosions"] = metrics.get("ratio_explosions", 0) + extreme
    return float(ratio) if ratio.ndim == 0 else ratio


def bandit_gradient_samples(logits, reward_fn: Callable, n: int, rng: np.random.Generator, baseline: float = 0.0):
    """Per-sample score-function gradients ``(r - b) * d log pi(a) / d logits``.

    Returns an ``(n, k)`` array; ``reward_fn(actions, rng)`` draws rewards.
    """
    z = as_tensor(logits)
    p = np.exp(z - z.max())
    p /= p.sum()
    actions = np.minimum((np.cumsum(p)[None, :] <= rng.random(n)[:, None]).sum(axis=1), len(p) - 1)
    rewards = as_tensor(reward_fn(actions, rng))
    score = -np.tile(p, (n, 1))
    score[np.arange(n), actions] += 1.0
    return (rewards - baseline)[:, None] * score


@dataclass
class ReinforceConfig:
    gamma: float = 0.99
    lr: float = 1e-2
    episodes_per_update: int = 8
    baseline: str = "value"
    value_lr: float = 1e-2
    normalize_advantages: bool = False
    hidden: tuple = (64, 64)
    max_episode_steps: int = 1000

    def __post_init__(self):
        _check_unit("gamma", self.gamma)
        if self.baseline not in ("none", "mean", "value"):
            raise ConfigError(f"reinforce.baseline must be none, mean or value, got {self.baseline!r}")
        if self.episodes_per_update < 1:
            raise ConfigError("reinforce.episodes_per_update must be >= 1")


@dataclass
class ReinforceState:
    head: PolicyHead
    value: ValueFunction | None
    env_steps: int = 0
    updates: int = 0
    history: list = field(default_factory=list)


def collect_episode(env, head: PolicyHead, rng: np.random.Generator, max_steps: int) -> EpisodeTrace:
    s = env.reset(seed=int(rng.integers(2**31)))
    states, actions, rewards, lps = [s], [], [], []
    terminal = False
    for _ in range(max_steps):
        a, lp = head.sample(s, rng)
        s, r, done, truncated = env.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        lps.append(lp)
        if done:
            terminal = not truncated
            break
    return EpisodeTrace(np.array(states), actions, np.array(rewards), np.array(lps), None, terminal)


def reinforce_train(
    env,
    head: PolicyHead,
    config: ReinforceConfig,
    total_steps: int,
    rng: np.random.Generator,
    value: ValueFunction | None = None,
    log_row: Callable | None = None,
) -> ReinforceState:
    """Monte-Carlo policy gradient with an optional baseline."""
    if config.baseline == "value" and value is None:
        raise ConfigError("value baseline needs a ValueFunction")
    opt = Adam(head.trunk, lr=config.lr)
    vopt = Adam(value.net, lr=config.value_lr) if config.baseline == "value" else None
    state = ReinforceState(head, value)
    while state.env_steps < total_steps:
        traces = [collect_episode(env, head, rng, config.max_episode_steps) for _ in range(config.episodes_per_update)]
        states = np.concatenate([t.states[:-1] for t in traces])
        actions = [a for t in traces for a in t.actions]
        returns = np.concatenate([discounted_returns(t.rewards, config.gamma) for t in traces])
        if config.baseline == "value":
            baseline = value(states)
        elif config.baseline == "mean":
            baseline = np.full(len(returns), returns.mean())
        else:
            baseline = np.zeros(len(returns))
        weight = returns - baseline
        if config.normalize_advantages:
            weight = normalize(weight)
        head.trunk.zero_grad()
        loss, _ = reinforce_loss(head, states, np.asarray(actions), weight)
        opt.step()
        row = {"policy_loss": loss}
        if vopt is not None:
            value.net.zero_grad()
            row["value_loss"], _ = value_loss(value, states, returns)
            vopt.step()
        state.env_steps += len(returns)
        state.updates += 1
        row.update(
            env_steps=state.env_steps,
            updates=state.updates,
            train_return=float(np.mean([t.rewards.sum() for t in traces])),
        )
        state.history.append(row)
        if log_row is not None:
            log_row(row)
    return state
