"""Action-value functions, bootstrap targets and target networks.

Every target function returns exactly ``r`` (or the discounted reward sum)
on terminal rows and is computed from frozen networks only: nothing here
writes into a target network's gradient buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError
from .ndmath import Mlp, ParamSet, as_tensor, mse_loss
from .policy import Categorical, Deterministic, PolicyHead


@dataclass(frozen=True)
class StateToAllActions:
    n: int


@dataclass(frozen=True)
class StateActionToScalar:
    action_dim: int


def _batch(x) -> tuple[np.ndarray, bool]:
    x = as_tensor(x)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


class QFunction:
    """An :class:`Mlp` read as Q(s, .) (vector mode) or Q(s, a) (scalar mode)."""

    def __init__(self, net: Mlp, mode):
        if isinstance(mode, StateToAllActions):
            if net.out_dim != mode.n:
                raise DimensionError(f"vector-mode Q needs {mode.n} outputs, net has {net.out_dim}")
        elif isinstance(mode, StateActionToScalar):
            if net.out_dim != 1 or net.in_dim <= mode.action_dim:
                raise DimensionError("scalar-mode Q needs one output and a (state, action) input")
        else:
            raise ConfigError(f"unknown Q mode {mode!r}")
        self.net = net
        self.mode = mode

    @property
    def discrete(self) -> bool:
        return isinstance(self.mode, StateToAllActions)

    @property
    def state_dim(self) -> int:
        return self.net.in_dim if self.discrete else self.net.in_dim - self.mode.action_dim

    def clone(self) -> "QFunction":
        return QFunction(self.net.clone(), self.mode)

    def params(self) -> ParamSet:
        return self.net

    def joint_input(self, states, actions) -> np.ndarray:
        s, _ = _batch(states)
        a = as_tensor(actions).reshape(len(s), -1)
        if a.shape[1] != self.mode.action_dim:
            raise DimensionError(f"action width {a.shape[1]} != {self.mode.action_dim}")
        return np.concatenate([s, a], axis=1)

    def all_values(self, states) -> np.ndarray:
        if not self.discrete:
            raise DimensionError("all_values needs a state-to-all-actions Q-function")
        return self.net.forward(states)

    def value(self, states, actions):
        if self.discrete:
            s, single = _batch(states)
            q = self.net.forward(s)
            a = np.atleast_1d(np.asarray(actions)).astype(np.int64)
            out = q[np.arange(len(s)), a]
        else:
            single = as_tensor(states).ndim == 1
            out = self.net.forward(self.joint_input(states, actions))[:, 0]
        return float(out[0]) if single else out


class TabularQ:
    """Lookup-table Q over one-hot observations (vector mode)."""

    def __init__(self, n_states: int, n_actions: int):
        self.table = np.zeros((n_states, n_actions))
        self.mode = StateToAllActions(n_actions)

    discrete = True

    def index(self, states) -> np.ndarray:
        s, _ = _batch(states)
        return np.argmax(s[:, : self.table.shape[0]], axis=1)

    def all_values(self, states) -> np.ndarray:
        s = as_tensor(states)
        vals = self.table[self.index(s)]
        return vals[0] if s.ndim == 1 else vals

    def clone(self) -> "TabularQ":
        other = TabularQ(*self.table.shape)
        other.table[...] = self.table
        return other


# ---------------------------------------------------------------- targets


def _finish(ret, gamma_n, boot, done, single):
    ret = as_tensor(ret)
    done = np.asarray(done, dtype=bool).reshape(ret.shape)
    out = np.where(done, ret, ret + gamma_n * boot)
    return float(out.reshape(-1)[0]) if single else out


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")


def greedy_bootstrap(q_select, q_eval, s_next) -> tuple[np.ndarray, bool]:
    s, single = _batch(s_next)
    eval_vals = np.atleast_2d(q_eval.all_values(s))
    if q_select is None or q_select is q_eval:
        return eval_vals.max(axis=1), single
    sel = np.argmax(np.atleast_2d(q_select.all_values(s)), axis=1)
    return eval_vals[np.arange(len(s)), sel], single


def td0_target(q_tgt, r, s_next, done, gamma: float):
    """``r + gamma * max_a' q_tgt(s')[a']``, or ``r`` on terminal rows."""
    _check_gamma(gamma)
    boot, single = greedy_bootstrap(None, q_tgt, s_next)
    return _finish(np.atleast_1d(as_tensor(r)), gamma, boot, np.atleast_1d(done), single)


def double_q_target(q_online, q_tgt, r, s_next, done, gamma: float):
    """Select with ``q_online``, evaluate with ``q_tgt``."""
    _check_gamma(gamma)
    boot, single = greedy_bootstrap(q_online, q_tgt, s_next)
    return _finish(np.atleast_1d(as_tensor(r)), gamma, boot, np.atleast_1d(done), single)


def next_actions(pi: PolicyHead, s_next, rng: np.random.Generator | None = None):
    """Bootstrap actions: a sample when ``rng`` is given and the head is stochastic."""
    if rng is not None and pi.stochastic:
        return pi.sample(s_next, rng)[0]
    return pi.act_greedy(s_next)


def twin_q_target(q1_tgt, q2_tgt, pi: PolicyHead, r, s_next, done, gamma: float, rng=None):
    _check_gamma(gamma)
    s, single = _batch(s_next)
    a = next_actions(pi, s, rng)
    boot = np.minimum(q1_tgt.value(s, a), q2_tgt.value(s, a))
    return _finish(np.atleast_1d(as_tensor(r)), gamma, boot, np.atleast_1d(done), single)


def discounted_sum(rewards, gamma: float) -> np.ndarray:
    """Row-wise ``sum_i gamma**i r_i`` for a (rows x k) reward block."""
    rw = np.atleast_2d(as_tensor(rewards))
    acc = np.zeros(rw.shape[0])
    for i in range(rw.shape[1]):
        acc = acc + gamma**i * rw[:, i]
    return acc


def nstep_q_target(q_tgt, q_online, rewards, s_n, done_within, gamma: float, n: int):
    """n-step target with double-Q style bootstrap at ``s_{t+n}``.

    ``rewards`` holds up to ``n`` rewards per row; rows whose episode ended
    inside the window pass fewer (zero-padded) rewards and ``done_within``.
    """
    if n < 1:
        raise ConfigError(f"n-step horizon must be >= 1, got {n}")
    _check_gamma(gamma)
    rw = np.atleast_2d(as_tensor(rewards))
    if rw.shape[1] > n:
        raise DimensionError(f"{rw.shape[1]} rewards for an {n}-step window")
    boot, single = greedy_bootstrap(q_online, q_tgt, s_n)
    return _finish(discounted_sum(rw, gamma), gamma**n, boot, np.atleast_1d(done_within), single)


# ----------------------------------------------------------------- losses


def one_step_q_loss(q: QFunction, states, actions, rewards):
    """Regress Q onto immediate rewards of length-1 episodes.

    Scalar mode regresses ``Q(s, a)`` onto ``r``. Vector mode regresses all
    outputs onto a full per-action reward vector (``rewards`` is rows x n).
    Gradients are added into ``q.net.grads``.
    """
    s, _ = _batch(states)
    r = as_tensor(rewards)
    if q.discrete:
        if r.ndim != 2 or r.shape != (len(s), q.mode.n):
            raise DimensionError(f"vector-mode Q needs a ({len(s)}, {q.mode.n}) reward block, got {r.shape}")
        pred, cache = q.net.forward_train(s)
        loss, g = mse_loss(pred, r)
    else:
        r = r.reshape(-1)
        if len(r) != len(s):
            raise DimensionError("scalar-mode Q needs one reward per row")
        pred, cache = q.net.forward_train(q.joint_input(s, actions))
        loss, g = mse_loss(pred[:, 0], r)
        g = g[:, None]
    q.net.backward(cache, g)
    return loss, q.net.grads


def one_hot_rewards(labels, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def td_loss(q: QFunction, states, actions, targets, weights=None):
    """Weighted MSE between ``Q(s, a)`` and constant targets.

    Returns ``(loss, per_row_abs_error)``; gradients go into ``q.net.grads``.
    """
    s, _ = _batch(states)
    y = as_tensor(targets).reshape(-1)
    w = np.ones(len(s)) if weights is None else as_tensor(weights).reshape(-1)
    if q.discrete:
        out, cache = q.net.forward_train(s)
        a = np.asarray(actions).astype(np.int64).reshape(-1)
        rows = np.arange(len(s))
        diff = out[rows, a] - y
        g = np.zeros_like(out)
        g[rows, a] = 2.0 * w * diff / len(s)
    else:
        out, cache = q.net.forward_train(q.joint_input(s, actions))
        diff = out[:, 0] - y
        g = (2.0 * w * diff / len(s))[:, None]
    q.net.backward(cache, g)
    return float(np.mean(w * diff * diff)), np.abs(diff)


def action_path(pi: PolicyHead, states, rng=None, noise=None):
    """Differentiable actions for the states: ``(actions, log_probs, backprop)``.

    ``backprop(grad_a, grad_logp)`` pushes gradients into ``pi.trunk``.
    Reparametrised heads draw ``xi`` from ``rng`` unless ``noise`` is given.
    """
    kind = pi.kind
    if isinstance(kind, Categorical):
        raise ConfigError("categorical heads have no differentiable action path")
    s, _ = _batch(states)
    z, cache = pi.trunk.forward_train(s)
    if isinstance(kind, Deterministic):
        def backprop(grad_a, grad_logp=None):
            pi.trunk.backward(cache, as_tensor(grad_a).reshape(z.shape))

        return z, np.zeros(len(s)), backprop
    if noise is None:
        if rng is None:
            raise ConfigError("a reparametrised head needs rng or frozen noise")
        noise = rng.standard_normal((len(s), kind.dim))
    rep = kind.rsample(z, noise)

    def backprop(grad_a, grad_logp=None):
        gl = np.zeros(len(s)) if grad_logp is None else grad_logp
        pi.trunk.backward(cache, rep.grad(grad_a, gl))

    return rep.action, rep.log_prob, backprop


def q_action_gradient(q: QFunction, states, actions) -> tuple[np.ndarray, np.ndarray]:
    """``Q(s, a)`` and ``dQ/da`` without touching ``q``'s parameter gradients."""
    x = q.joint_input(states, actions)
    out, cache = q.net.forward_train(x)
    gin = q.net.backward(cache, np.ones_like(out), accumulate=False)
    return out[:, 0], gin[:, q.state_dim :]


def deterministic_pg_loss(q: QFunction, pi: PolicyHead, states, rng=None, noise=None):
    """``-mean Q(s, pi(s))``; gradients reach ``pi.trunk`` only."""
    if q.discrete:
        raise ConfigError("deterministic policy gradient needs a state-action Q-function")
    s, _ = _batch(states)
    a, _, backprop = action_path(pi, s, rng, noise)
    qv, dq_da = q_action_gradient(q, s, a)
    backprop(-dq_da / len(s))
    return float(-np.mean(qv)), pi.trunk.grads


# -------------------------------------------------------- target networks


@dataclass(frozen=True)
class HardCopy:
    every_k_steps: int = 1000

    def __post_init__(self):
        if self.every_k_steps < 1:
            raise ConfigError("hard-copy period must be >= 1")


@dataclass(frozen=True)
class Polyak:
    tau: float = 0.995

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"Polyak tau must lie in [0, 1], got {self.tau}")


def _paramset(x) -> ParamSet:
    return x.net if isinstance(x, QFunction) else x


class TargetNetwork:
    """Frozen copy of a Q-function, moved only by :func:`update_target`."""

    def __init__(self, online, mode=None):
        self.q = online.clone()
        self.mode = mode if mode is not None else HardCopy()
        self.steps = 0

    @property
    def params(self) -> dict:
        return _paramset(self.q).params

    def all_values(self, states):
        return self.q.all_values(states)

    def value(self, states, actions):
        return self.q.value(states, actions)


def update_target(tgt: TargetNetwork, online) -> None:
    src = _paramset(online).params
    dst = tgt.params
    if src.keys() != dst.keys() or any(src[k].shape != dst[k].shape for k in src):
        raise CheckpointError("target and online networks have different shapes")
    tgt.steps += 1
    if isinstance(tgt.mode, HardCopy):
        if tgt.steps % tgt.mode.every_k_steps == 0:
            for k in dst:
                dst[k][...] = src[k]
    else:
        tau = tgt.mode.tau
        for k in dst:
            dst[k][...] = tau * dst[k] + (1.0 - tau) * src[k]


# ------------------------------------------------------------- tabular


def tabular_q_learning(
    env,
    gamma: float = 0.99,
    steps: int = 100_000,
    lr: float = 0.5,
    rng: np.random.Generator | None = None,
    q: TabularQ | None = None,
) -> TabularQ:
    """Q-learning with a lookup table and a uniform-random behaviour policy.

    Uses :func:`td0_target` against the table itself, so on a deterministic
    environment with full state-action coverage the table approaches the
    Bellman fixed point geometrically.
    """
    _check_gamma(gamma)
    rng = rng if rng is not None else np.random.default_rng(0)
    n_actions = env.spec.action_space.n
    q = q if q is not None else TabularQ(env.spec.state_dim, n_actions)
    s = env.reset(seed=int(rng.integers(2**31)))
    for _ in range(steps):
        a = int(rng.integers(n_actions))
        s2, r, done, truncated = env.step(a)
        i = int(np.argmax(s))
        y = td0_target(q, r, s2, done and not truncated, gamma)
        q.table[i, a] += lr * (y - q.table[i, a])
        s = env.reset() if done else s2
    return q
