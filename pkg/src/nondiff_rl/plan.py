"""Planning with a known deterministic model, and reward-conditioned policies.

* :func:`exhaustive_search` enumerates every action sequence up to a horizon.
* :class:`Mcts` runs UCT tree search with random rollouts.
* :func:`upside_down_loss` trains a policy that takes the desired return
  (and optionally the remaining horizon) as an extra input.

Both planners score a path by its discounted return with ``gamma``
(default 0.9). Undiscounted returns tie every path that eventually reaches
the goal, which would make the first action arbitrary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import Env, ExactModel
from .errors import BudgetError, ConfigError, UnsupportedEnvError
from .ndmath import Adam, Mlp, as_tensor, cross_entropy_loss, mse_loss

ROLLOUT_CAP = 200


def _model_of(env_or_model) -> ExactModel:
    if isinstance(env_or_model, ExactModel):
        return env_or_model
    model = env_or_model.exact_model() if isinstance(env_or_model, Env) else None
    if model is None:
        raise UnsupportedEnvError(f"{type(env_or_model).__name__} exposes no exact model")
    return model


def _state_id(model: ExactModel, state) -> int:
    if isinstance(state, (int, np.integer)):
        s = int(state)
        if not 0 <= s < model.n_states:
            raise ConfigError(f"state {s} outside 0..{model.n_states - 1}")
        return s
    return model.state_index(state)


def exhaustive_search(env_or_model, state, horizon: int, gamma: float = 0.9, node_budget: int = 2_000_000,
                      tie_tol: float = 1e-12) -> tuple[int, float]:
    """Best first action and its discounted return over all paths of length <= ``horizon``.

    Paths stop at terminal transitions. Ties within ``tie_tol`` go to the
    lowest action index.
    """
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    model = _model_of(env_or_model)
    s0 = _state_id(model, state)
    if model.is_terminal(s0):
        raise ConfigError(f"state {s0} is terminal; nothing to search")
    nxt, rew, done = model.next_state.tolist(), model.reward.tolist(), model.done.tolist()
    n_actions = model.n_actions
    nodes = 0

    def best(s: int, h: int) -> float:
        nonlocal nodes
        value = -math.inf
        for a in range(n_actions):
            nodes += 1
            if nodes > node_budget:
                raise BudgetError(f"search tree exceeds node budget {node_budget}; use a shorter horizon")
            q = rew[s][a]
            if not done[s][a] and h > 1:
                q += gamma * best(nxt[s][a], h - 1)
            value = max(value, q)
        return value

    returns = []
    for a in range(n_actions):
        nodes += 1
        q = rew[s0][a]
        if not done[s0][a] and horizon > 1:
            q += gamma * best(nxt[s0][a], horizon - 1)
        returns.append(q)
    top = max(returns)
    first = next(a for a, q in enumerate(returns) if q >= top - tie_tol)
    return first, float(returns[first])


def exhaustive_returns(env_or_model, state, horizon: int, gamma: float = 0.9, node_budget: int = 2_000_000):
    """Per-first-action optimal returns (used to score planner agreement)."""
    model = _model_of(env_or_model)
    s0 = _state_id(model, state)
    out = np.zeros(model.n_actions)
    for a in range(model.n_actions):
        q = model.reward_of(s0, a)
        if not model.done[s0, a] and horizon > 1:
            q += gamma * exhaustive_search(model, model.transition(s0, a), horizon - 1, gamma, node_budget)[1]
        out[a] = q
    return out


@dataclass
class SearchNode:
    state: int
    parent: "SearchNode | None" = None
    action: int | None = None
    reward: float = 0.0
    terminal: bool = False
    depth: int = 0
    visits: int = 0
    total_return: float = 0.0
    children: dict = field(default_factory=dict)
    unexpanded: list = field(default_factory=list)

    @property
    def mean_return(self) -> float:
        return self.total_return / self.visits if self.visits else 0.0


def uct_score(child: SearchNode, parent_visits: int, c: float) -> float:
    return child.mean_return + c * math.sqrt(math.log(parent_visits) / child.visits)


class Mcts:
    """UCT search over an exact model.

    Every simulation backs up its full discounted return from the root, so
    each node's ``total_return`` is the sum of root returns of the
    simulations that passed through it.
    """

    def __init__(self, env_or_model, gamma: float = 0.9, c: float = math.sqrt(2.0),
                 rollout_cap: int = ROLLOUT_CAP, root_rule: str = "visits"):
        if root_rule not in ("visits", "mean"):
            raise ConfigError(f"root_rule must be 'visits' or 'mean', got {root_rule!r}")
        self.model = _model_of(env_or_model)
        self.gamma = gamma
        self.c = c
        self.rollout_cap = rollout_cap
        self.root_rule = root_rule
        self._nxt = self.model.next_state.tolist()
        self._rew = self.model.reward.tolist()
        self._done = self.model.done.tolist()
        self.root: SearchNode | None = None

    def _new_node(self, state, parent=None, action=None, reward=0.0, terminal=False, rng=None) -> SearchNode:
        node = SearchNode(state, parent, action, reward, terminal, 0 if parent is None else parent.depth + 1)
        if not terminal:
            acts = list(range(self.model.n_actions))
            if rng is not None:
                rng.shuffle(acts)
            node.unexpanded = acts
        return node

    def set_root(self, state, rng=None) -> SearchNode:
        s = _state_id(self.model, state)
        self.root = self._new_node(s, terminal=self.model.is_terminal(s), rng=rng)
        return self.root

    def _select_child(self, node: SearchNode) -> SearchNode:
        best, best_score = None, -math.inf
        for a in sorted(node.children):
            child = node.children[a]
            score = uct_score(child, node.visits, self.c)
            if score > best_score:
                best, best_score = child, score
        return best

    def _rollout(self, state: int, rng: np.random.Generator) -> float:
        """Discounted return of a uniform-random continuation from ``state``."""
        if self.model.is_terminal(state):
            return 0.0
        acts = rng.integers(self.model.n_actions, size=self.rollout_cap).tolist()
        g, disc, s = 0.0, 1.0, state
        for a in acts:
            g += disc * self._rew[s][a]
            if self._done[s][a]:
                break
            s = self._nxt[s][a]
            disc *= self.gamma
        return g

    def simulate(self, rng: np.random.Generator) -> tuple[list[SearchNode], float]:
        """One selection/expansion/simulation/backup pass; returns the path and its return."""
        node = self.root
        path = [node]
        prefix, disc = 0.0, 1.0
        while not node.terminal:
            if node.unexpanded:
                a = node.unexpanded.pop()
                s = node.state
                child = self._new_node(self._nxt[s][a], node, a, self._rew[s][a], self._done[s][a], rng)
                node.children[a] = child
                node = child
                path.append(node)
                prefix += disc * node.reward
                disc *= self.gamma
                break
            node = self._select_child(node)
            path.append(node)
            prefix += disc * node.reward
            disc *= self.gamma
        g = prefix + (0.0 if node.terminal else disc * self._rollout(node.state, rng))
        for n in path:
            n.visits += 1
            n.total_return += g
        return path, g

    def search(self, budget: int, rng: np.random.Generator, state=None) -> int:
        if budget < 1:
            raise ConfigError(f"MCTS budget must be >= 1, got {budget}")
        if state is not None or self.root is None:
            self.set_root(self.root.state if state is None else state, rng)
        if self.root.terminal:
            raise ConfigError("root state is terminal")
        for _ in range(budget):
            self.simulate(rng)
        return self.best_action()

    def best_action(self) -> int:
        kids = self.root.children
        key = (lambda a: kids[a].visits) if self.root_rule == "visits" else (lambda a: kids[a].mean_return)
        return max(sorted(kids), key=key)

    def advance(self, action: int) -> SearchNode:
        """Reuse the subtree under ``action`` as the next root."""
        child = self.root.children.get(action)
        if child is None:
            s = self.root.state
            child = self._new_node(self._nxt[s][action], terminal=self._done[s][action])
        child.parent = None
        self.root = child
        return child


def mcts(env_or_model, state, budget: int, rng: np.random.Generator, gamma: float = 0.9,
         c: float = math.sqrt(2.0), root_rule: str = "visits") -> int:
    return Mcts(env_or_model, gamma, c, root_rule=root_rule).search(budget, rng, state)


# ------------------------------------------------------- upside-down RL


def updown_input(states, commands, horizons=None) -> np.ndarray:
    s = np.atleast_2d(as_tensor(states))
    cols = [s, as_tensor(commands).reshape(-1, 1)]
    if horizons is not None:
        cols.append(as_tensor(horizons).reshape(-1, 1))
    return np.concatenate(cols, axis=1)


def upside_down_loss(net: Mlp, states, commands, actions, horizons=None, discrete: bool = True):
    """Supervised loss for predicting the action that achieved ``commands``.

    Cross-entropy on logits for discrete actions, squared error otherwise.
    Gradients go into ``net``.
    """
    x = updown_input(states, commands, horizons)
    if x.shape[1] != net.in_dim:
        raise ConfigError(
            f"policy input is {net.in_dim} wide but state+command"
            f"{'+horizon' if horizons is not None else ''} is {x.shape[1]}"
        )
    out, cache = net.forward_train(x)
    if discrete:
        loss, g = cross_entropy_loss(out, np.asarray(actions).reshape(-1).astype(np.int64))
    else:
        loss, g = mse_loss(out, as_tensor(actions).reshape(out.shape))
    net.backward(cache, g)
    return loss, net.grads


@dataclass
class UpsideDownConfig:
    hidden: tuple = (32, 32)
    lr: float = 1e-2
    epochs: int = 300
    batch_size: int = 64
    use_horizon: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("updown.epochs and updown.batch_size must be >= 1")


class UpsideDownPolicy:
    """Reward-conditioned policy; acts with the largest return seen in training."""

    def __init__(self, state_dim: int, n_actions: int, config: UpsideDownConfig, rng=None):
        self.config = config
        extra = 2 if config.use_horizon else 1
        self.net = Mlp([state_dim + extra, *config.hidden, n_actions], rng=rng)
        self.max_command = 0.0
        self.max_horizon = 1.0

    def fit(self, states, commands, actions, rng: np.random.Generator, horizons=None) -> list[float]:
        commands = as_tensor(commands).reshape(-1)
        self.max_command = float(np.max(commands))
        if horizons is not None:
            self.max_horizon = float(np.max(horizons))
        opt = Adam(self.net, lr=self.config.lr)
        states = np.atleast_2d(as_tensor(states))
        actions = np.asarray(actions)
        losses = []
        n = len(states)
        for _ in range(self.config.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.config.batch_size):
                idx = perm[start : start + self.config.batch_size]
                self.net.zero_grad()
                h = None if horizons is None else as_tensor(horizons)[idx]
                loss, _ = upside_down_loss(self.net, states[idx], commands[idx], actions[idx], h)
                opt.step()
                total += loss * len(idx)
            losses.append(total / n)
        return losses

    def act(self, state, command=None, horizon=None) -> int:
        cmd = self.max_command if command is None else command
        h = None
        if self.config.use_horizon:
            h = self.max_horizon if horizon is None else horizon
        return int(np.argmax(self.net.forward(updown_input(state, [cmd], None if h is None else [h]))[0]))
