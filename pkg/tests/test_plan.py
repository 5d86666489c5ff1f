import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import param_rel_error
from nondiff_rl.env import ChainWorld, ExactModel, GridWorld, PointMass, value_iteration
from nondiff_rl.errors import BudgetError, ConfigError, UnsupportedEnvError
from nondiff_rl.ndmath import Mlp
from nondiff_rl.plan import (
    Mcts,
    SearchNode,
    UpsideDownConfig,
    UpsideDownPolicy,
    exhaustive_returns,
    exhaustive_search,
    mcts,
    upside_down_loss,
)


def one_action_model():
    nxt = np.array([[1], [2], [2]])
    rew = np.array([[0.5], [1.0], [0.0]])
    done = np.array([[False], [True], [True]])
    return ExactModel(nxt, rew, done, frozenset({2}), (0,), np.eye(3))


# ------------------------------------------------------------- exhaustive

def test_exhaustive_chain_goes_right():
    a, g = exhaustive_search(ChainWorld(4, step_penalty=0.1), 0, horizon=6, gamma=0.9)
    assert a == ChainWorld.RIGHT
    assert g == pytest.approx(-0.1 - 0.9 * 0.1 + 0.81 * 1.0, abs=1e-12)


def test_exhaustive_undiscounted_chain_return():
    _, g = exhaustive_search(ChainWorld(4, step_penalty=0.1), 0, horizon=3, gamma=1.0)
    assert g == pytest.approx(1.0 - 0.2, abs=1e-12)


@pytest.mark.parametrize("h", [0, -1])
def test_exhaustive_horizon_must_be_positive(h):
    with pytest.raises(ConfigError):
        exhaustive_search(ChainWorld(4), 0, h)


def test_exhaustive_agrees_with_value_iteration_on_gridworld():
    model = GridWorld(4, 4).exact_model()
    _, q, _ = value_iteration(model, 0.9)
    for s in range(model.n_states):
        if model.is_terminal(s):
            continue
        a, g = exhaustive_search(model, s, horizon=8, gamma=0.9)
        assert q[s, a] >= q[s].max() - 1e-9
        assert g == pytest.approx(q[s].max(), abs=1e-9)


def test_exhaustive_ties_go_to_lowest_index():
    # from (0,0) on an open grid, DOWN and RIGHT are equally good
    model = GridWorld(3, 3).exact_model()
    q = exhaustive_returns(model, 0, 6)
    assert q[GridWorld.DOWN] == pytest.approx(q[GridWorld.RIGHT], abs=1e-12)
    assert exhaustive_search(model, 0, 6)[0] == GridWorld.DOWN


def test_exhaustive_budget_and_model_errors():
    with pytest.raises(BudgetError):
        exhaustive_search(GridWorld(4, 4), 0, horizon=10, node_budget=1000)
    with pytest.raises(UnsupportedEnvError):
        exhaustive_search(PointMass(), np.zeros(3), 3)
    with pytest.raises(ConfigError):
        exhaustive_search(ChainWorld(4), 3, 3)  # terminal start


def test_exhaustive_accepts_observations():
    env = ChainWorld(5)
    assert exhaustive_search(env, env.reset(0), 6)[0] == ChainWorld.RIGHT


# ------------------------------------------------------------------- mcts

def test_single_legal_action():
    for budget in (1, 2, 50):
        assert mcts(one_action_model(), 0, budget, np.random.default_rng(budget)) == 0


def test_budget_must_be_positive():
    with pytest.raises(ConfigError):
        mcts(ChainWorld(4), 0, 0, np.random.default_rng(0))


def test_backup_adds_return_to_every_node_on_path():
    planner = Mcts(GridWorld(4, 4), 0.9)
    planner.set_root(0)
    rng = np.random.default_rng(0)
    for _ in range(30):
        planner.simulate(rng)
    before = {}
    stack = [planner.root]
    while stack:
        n = stack.pop()
        before[id(n)] = (n.visits, n.total_return)
        stack.extend(n.children.values())
    path, g = planner.simulate(rng)
    for n in path:
        v, tot = before.get(id(n), (0, 0.0))
        assert n.visits == v + 1
        assert n.total_return == pytest.approx(tot + g, abs=1e-12)


def test_visit_conservation():
    planner = Mcts(GridWorld(4, 4), 0.9)
    planner.search(777, np.random.default_rng(1), 0)
    root = planner.root
    assert root.visits == 777
    assert sum(c.visits for c in root.children.values()) == 777

    def check(node):
        # a node's own visits are the pass that created it plus its children's visits
        if node.children:
            assert node.visits == sum(c.visits for c in node.children.values()) + 1
            for c in node.children.values():
                check(c)

    for c in root.children.values():
        check(c)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 50), st.floats(-10, 10)), min_size=2, max_size=5),
       st.floats(-100, 100))
def test_uct_selection_invariant_to_constant_shift(stats, shift):
    def pick(offset):
        parent = SearchNode(0, visits=sum(v for v, _ in stats))
        for a, (v, mean) in enumerate(stats):
            parent.children[a] = SearchNode(a, parent, a, visits=v, total_return=(mean + offset) * v)
        return Mcts(ChainWorld(4))._select_child(parent).action

    a, b = pick(0.0), pick(shift)
    if a != b:
        # only floating-point near-ties may flip
        scores = sorted(m + math.sqrt(2) * math.sqrt(math.log(sum(v for v, _ in stats)) / v) for v, m in stats)
        assert scores[-1] - scores[-2] < 1e-9 * max(1.0, abs(shift))


def test_subtree_reuse_keeps_statistics():
    planner = Mcts(ChainWorld(6), 0.9)
    a = planner.search(500, np.random.default_rng(0), 0)
    child = planner.root.children[a]
    visits = child.visits
    root = planner.advance(a)
    assert root is child and root.parent is None and root.visits == visits
    planner.search(100, np.random.default_rng(1))
    assert planner.root.visits == visits + 100


def test_root_rule_mean_and_validation():
    assert mcts(ChainWorld(6), 0, 2000, np.random.default_rng(0), root_rule="mean") == ChainWorld.RIGHT
    with pytest.raises(ConfigError):
        Mcts(ChainWorld(6), root_rule="best")


def test_mcts_matches_exhaustive_on_chain():
    model = ChainWorld(6).exact_model()
    q = exhaustive_returns(model, 0, 12)
    hits = sum(q[mcts(model, 0, 2000, np.random.default_rng(t))] >= q.max() - 1e-9 for t in range(10))
    assert hits == 10


def test_mcts_unsupported_env():
    with pytest.raises(UnsupportedEnvError):
        Mcts(PointMass())


# ------------------------------------------------------------ upside-down

def test_updown_loss_zero_when_output_matches():
    net = Mlp([3, 2], ["identity"])
    net.params["w0"][...] = 0.0
    net.params["b0"][...] = [0.3, -0.4]
    loss, _ = upside_down_loss(net, np.ones((4, 2)), np.ones(4), np.tile([0.3, -0.4], (4, 1)), discrete=False)
    assert loss == 0.0


def test_updown_dimension_mismatch():
    with pytest.raises(ConfigError):
        upside_down_loss(Mlp([3, 2]), np.ones((4, 2)), np.ones(4), np.zeros(4), horizons=np.ones(4))


@pytest.mark.parametrize("discrete", [True, False])
def test_updown_gradient_matches_finite_differences(discrete):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = Mlp([4, 6, 3], rng=rng, hidden_activation="tanh")
        s, cmd, hor = rng.normal(size=(5, 2)), rng.normal(size=5), rng.integers(1, 9, size=5)
        acts = rng.integers(3, size=5) if discrete else rng.normal(size=(5, 3))
        net.zero_grad()
        upside_down_loss(net, s, cmd, acts, hor, discrete)
        analytic = {k: v.copy() for k, v in net.grads.items()}

        def f():
            saved = {k: v.copy() for k, v in net.grads.items()}
            loss, _ = upside_down_loss(net, s, cmd, acts, hor, discrete)
            for k in saved:
                net.grads[k][...] = saved[k]
            return loss

        worst = max(worst, param_rel_error(net, f, analytic))
    assert worst < 1e-4


def test_reward_conditioned_policy_recovers_action_map():
    # the reward identifies the action: action k always earns reward k
    rng = np.random.default_rng(0)
    n = 600
    states = rng.normal(size=(n, 2))
    actions = rng.integers(3, size=n)
    commands = actions.astype(float)
    policy = UpsideDownPolicy(2, 3, UpsideDownConfig(epochs=60), np.random.default_rng(1))
    policy.fit(states, commands, actions, rng)
    test_states = rng.normal(size=(200, 2))
    for k in range(3):
        assert all(policy.act(s, k) == k for s in test_states)
    assert all(policy.act(s) == 2 for s in test_states)  # maximum command


def test_horizon_conditioning_widens_input():
    policy = UpsideDownPolicy(2, 3, UpsideDownConfig(use_horizon=True, epochs=1), np.random.default_rng(0))
    assert policy.net.in_dim == 4
    policy.fit(np.zeros((4, 2)), np.arange(4.0), np.arange(4) % 3, np.random.default_rng(0), horizons=np.ones(4))
    assert policy.act(np.zeros(2)) in range(3)
