"""Policy heads over an :class:`~nondiff_rl.ndmath.Mlp` trunk, plus exploration.

A head turns the trunk output ``z`` into an action distribution. The
distribution classes work on ``z`` directly and return gradients with
respect to it, so training code can call ``trunk.backward`` with them. This
also lets the PPO actor-critic reuse the same distributions on a slice of
its shared network output.

Layouts of ``z`` per kind:

* ``Categorical(n)``: ``n`` logits.
* ``DiagonalGaussian(d)`` / ``TanhGaussian(d)``: ``d`` means then ``d``
  raw log-stds, clamped to ``[-5, 2]`` (zero gradient outside the band).
* ``Deterministic(d)``: the action itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import Box, Discrete
from .errors import ConfigError, DimensionError, DomainError, UnsupportedOperationError
from .ndmath import Mlp, as_tensor, log_softmax

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
TANH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _rows(z) -> tuple[np.ndarray, bool]:
    z = as_tensor(z)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


class Categorical:
    stochastic = True

    def __init__(self, n: int):
        self.n = n
        self.param_dim = n

    def probs(self, z) -> np.ndarray:
        return np.exp(log_softmax(z))

    def log_prob(self, z, actions) -> tuple[np.ndarray, np.ndarray]:
        """Per-row ``log p[a]`` and its gradient w.r.t. the logits."""
        z2, single = _rows(z)
        a = np.atleast_1d(np.asarray(actions)).astype(np.int64)
        if np.any(a < 0) or np.any(a >= self.n):
            raise DomainError(f"action outside 0..{self.n - 1}")
        lsm = log_softmax(z2)
        rows = np.arange(len(a))
        lp = lsm[rows, a]
        grad = -np.exp(lsm)
        grad[rows, a] += 1.0
        return (lp[0], grad[0]) if single else (lp, grad)

    def entropy(self, z, rng=None) -> tuple[np.ndarray, np.ndarray]:
        z2, single = _rows(z)
        lsm = log_softmax(z2)
        p = np.exp(lsm)
        safe = np.where(p > 0, lsm, 0.0)
        h = -np.sum(p * safe, axis=1)
        grad = -p * (safe + h[:, None])
        return (h[0], grad[0]) if single else (h, grad)

    def sample(self, z, rng: np.random.Generator, noise=None):
        """Inverse-CDF draw; ``noise`` overrides the uniform variates."""
        z2, single = _rows(z)
        lsm = log_softmax(z2)
        p = np.exp(lsm)
        u = rng.random(len(z2)) if noise is None else np.atleast_1d(as_tensor(noise))
        cdf = np.cumsum(p, axis=1)
        a = np.minimum((cdf <= u[:, None]).sum(axis=1), self.n - 1)
        # never land on a zero-probability class through cdf rounding
        for r in np.flatnonzero(p[np.arange(len(a)), a] == 0.0):
            a[r] = int(np.argmax(p[r]))
        lp = lsm[np.arange(len(a)), a]
        return (int(a[0]), float(lp[0])) if single else (a, lp)

    def greedy(self, z):
        z2, single = _rows(z)
        a = np.argmax(z2, axis=1)  # argmax returns the first maximum: ties go low
        return int(a[0]) if single else a


class DiagonalGaussian:
    stochastic = True
    squashed = False

    def __init__(self, dim: int):
        self.dim = dim
        self.param_dim = 2 * dim

    def split(self, z):
        z2, single = _rows(z)
        if z2.shape[1] != self.param_dim:
            raise DimensionError(f"expected {self.param_dim} outputs, got {z2.shape[1]}")
        mu = z2[:, : self.dim]
        raw = z2[:, self.dim :]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        mask = ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)).astype(np.float64)
        return mu, log_std, mask, single

    def _normal_log_prob(self, z, u):
        mu, log_std, mask, single = self.split(z)
        u = as_tensor(u).reshape(mu.shape)
        std = np.exp(log_std)
        eps = (u - mu) / std
        lp = np.sum(-0.5 * eps * eps - log_std - HALF_LOG_2PI, axis=1)
        grad = np.concatenate([eps / std, (eps * eps - 1.0) * mask], axis=1)
        return lp, grad, single

    def log_prob(self, z, actions):
        lp, grad, single = self._normal_log_prob(z, actions)
        return (lp[0], grad[0]) if single else (lp, grad)

    def entropy(self, z, rng=None):
        mu, log_std, mask, single = self.split(z)
        h = np.sum(0.5 * math.log(2 * math.pi * math.e) + log_std, axis=1)
        grad = np.concatenate([np.zeros_like(mu), mask], axis=1)
        return (h[0], grad[0]) if single else (h, grad)

    def rsample(self, z, xi) -> "Reparam":
        mu, log_std, mask, single = self.split(z)
        xi = as_tensor(xi).reshape(mu.shape)
        std = np.exp(log_std)
        a = mu + std * xi
        lp = np.sum(-0.5 * xi * xi - log_std - HALF_LOG_2PI, axis=1)
        return Reparam(
            action=a,
            log_prob=lp,
            da_dmu=np.ones_like(mu),
            da_dlogstd=std * xi * mask,
            dlp_dmu=np.zeros_like(mu),
            dlp_dlogstd=-mask,
            single=single,
        )

    def sample(self, z, rng: np.random.Generator, noise=None):
        mu, _, _, single = self.split(z)
        xi = rng.standard_normal(mu.shape) if noise is None else noise
        r = self.rsample(z, xi)
        return (r.action[0], float(r.log_prob[0])) if single else (r.action, r.log_prob)

    def greedy(self, z):
        mu, _, _, single = self.split(z)
        return mu[0].copy() if single else mu.copy()


class TanhGaussian(DiagonalGaussian):
    """Gaussian squashed through tanh; actions live in (-1, 1)."""

    squashed = True

    def log_prob(self, z, actions):
        a = as_tensor(actions)
        if np.any(np.abs(a) >= 1.0):
            raise DomainError("tanh-squashed action must satisfy |a| < 1")
        u = np.arctanh(a)
        lp, grad, single = self._normal_log_prob(z, u)
        lp = lp - np.sum(np.log(1.0 - a.reshape(len(lp), -1) ** 2 + TANH_EPS), axis=1)
        return (lp[0], grad[0]) if single else (lp, grad)

    def rsample(self, z, xi) -> "Reparam":
        base = super().rsample(z, xi)
        u = base.action
        t = np.tanh(u)
        sech2 = 1.0 - t * t
        # d/du of -log(1 - tanh(u)^2 + eps)
        dcorr = 2.0 * t * sech2 / (sech2 + TANH_EPS)
        lp = base.log_prob - np.sum(np.log(sech2 + TANH_EPS), axis=1)
        a = np.clip(t, -np.nextafter(1.0, 0.0), np.nextafter(1.0, 0.0))
        return Reparam(
            action=a,
            log_prob=lp,
            da_dmu=sech2 * base.da_dmu,
            da_dlogstd=sech2 * base.da_dlogstd,
            dlp_dmu=base.dlp_dmu + dcorr * base.da_dmu,
            dlp_dlogstd=base.dlp_dlogstd + dcorr * base.da_dlogstd,
            single=base.single,
        )

    def entropy(self, z, rng=None):
        """Single-sample estimate ``-log pi(a|s)``; stochastic by construction."""
        if rng is None:
            raise UnsupportedOperationError("tanh-Gaussian entropy is a sampled estimate; pass rng")
        mu, _, _, single = self.split(z)
        r = self.rsample(z, rng.standard_normal(mu.shape))
        h = -r.log_prob
        grad = -r.grad(np.zeros_like(r.action), np.ones_like(r.log_prob))
        return (h[0], grad[0]) if single else (h, grad)

    def greedy(self, z):
        return np.tanh(super().greedy(z))


@dataclass
class Reparam:
    """A reparametrised sample ``a(mu, log_std; xi)`` with its local Jacobians."""

    action: np.ndarray
    log_prob: np.ndarray
    da_dmu: np.ndarray
    da_dlogstd: np.ndarray
    dlp_dmu: np.ndarray
    dlp_dlogstd: np.ndarray
    single: bool = False

    def grad(self, grad_action, grad_log_prob) -> np.ndarray:
        """Chain ``dL/da`` (rows x dim) and ``dL/dlogp`` (rows) back onto ``z``."""
        ga = as_tensor(grad_action).reshape(self.action.shape)
        gl = as_tensor(grad_log_prob).reshape(-1, 1)
        dmu = ga * self.da_dmu + gl * self.dlp_dmu
        dls = ga * self.da_dlogstd + gl * self.dlp_dlogstd
        return np.concatenate([dmu, dls], axis=1)


class Deterministic:
    stochastic = False

    def __init__(self, dim: int):
        self.dim = dim
        self.param_dim = dim

    def greedy(self, z):
        return as_tensor(z).copy()

    def _unsupported(self, *args, **kwargs):
        raise UnsupportedOperationError("deterministic head has no density; use act_greedy")

    sample = log_prob = entropy = _unsupported


class PolicyHead:
    """A distribution kind bound to the trunk that produces its parameters."""

    def __init__(self, kind, trunk: Mlp):
        if trunk.out_dim != kind.param_dim:
            raise DimensionError(f"trunk outputs {trunk.out_dim}, head needs {kind.param_dim}")
        self.kind = kind
        self.trunk = trunk

    @property
    def stochastic(self) -> bool:
        return self.kind.stochastic

    def _z(self, state):
        return self.trunk.forward(state)

    def sample(self, state, rng: np.random.Generator, noise=None):
        if not self.kind.stochastic:
            raise UnsupportedOperationError("deterministic head cannot sample; use act_greedy")
        return self.kind.sample(self._z(state), rng, noise)

    def log_prob(self, state, action):
        return self.kind.log_prob(self._z(state), action)[0]

    def entropy(self, state, rng: np.random.Generator | None = None):
        if not self.kind.stochastic:
            raise UnsupportedOperationError("deterministic head has no entropy")
        return self.kind.entropy(self._z(state), rng)[0]

    def act_greedy(self, state):
        return self.kind.greedy(self._z(state))


def make_head(kind: str, state_dim: int, action_dim: int, hidden=(64, 64), rng=None) -> PolicyHead:
    kinds = {
        "categorical": Categorical,
        "gaussian": DiagonalGaussian,
        "tanh_gaussian": TanhGaussian,
        "deterministic": Deterministic,
    }
    if kind not in kinds:
        raise ConfigError(f"unknown head {kind!r}; expected one of {sorted(kinds)}")
    dist = kinds[kind](action_dim)
    trunk = Mlp([state_dim, *hidden, dist.param_dim], rng=rng)
    return PolicyHead(dist, trunk)


@dataclass
class EpsilonGreedy:
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 10_000
    shape: str = "linear"
    step: int = 0

    def __post_init__(self):
        if not (0 <= self.end <= 1 and 0 <= self.start <= 1):
            raise ConfigError("epsilon endpoints must lie in [0, 1]")
        if self.shape not in ("linear", "exponential"):
            raise ConfigError(f"unknown decay shape {self.shape!r}")

    def epsilon(self, step: int | None = None) -> float:
        k = self.step if step is None else step
        if self.decay_steps <= 0:
            return self.end
        if self.shape == "linear":
            frac = min(k / self.decay_steps, 1.0)
            return self.start + (self.end - self.start) * frac
        return self.end + (self.start - self.end) * math.exp(-k / self.decay_steps)


@dataclass
class GaussianNoise:
    sigma: float = 0.1
    step: int = field(default=0)

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("noise sigma must be >= 0")


def explore(schedule, greedy_action, action_space, rng: np.random.Generator):
    """Perturb a greedy action per the schedule and advance its step counter."""
    if isinstance(schedule, EpsilonGreedy):
        if not isinstance(action_space, Discrete):
            raise ConfigError("epsilon-greedy needs a discrete action space")
        eps = schedule.epsilon()
        schedule.step += 1
        if rng.random() < eps:
            return int(rng.integers(action_space.n))
        return int(greedy_action)
    if isinstance(schedule, GaussianNoise):
        if not isinstance(action_space, Box):
            raise ConfigError("Gaussian action noise needs a continuous action space")
        schedule.step += 1
        a = as_tensor(greedy_action) + schedule.sigma * rng.standard_normal(np.shape(greedy_action))
        return np.clip(a, action_space.low, action_space.high)
    raise ConfigError(f"unknown exploration schedule {type(schedule).__name__}")
