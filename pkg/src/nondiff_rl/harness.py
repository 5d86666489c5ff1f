"""Run configuration, seeding, metrics and the experiment drivers behind the CLI.

Config files are flat ``key=value`` lines. Keys without a dot are top-level;
``section.key`` addresses one of the sections below. ``#`` starts a comment.

Seeding: every random stream is derived from the master ``seed`` with
:func:`nondiff_rl.seeding.stream` under a fixed name (``init``, ``train``,
``env``, ``eval``, ``data``, ``ppo.actor``/``ppo.shuffle``/``ppo.eval``).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Box, DatasetBandit, Discrete, ENV_NAMES, evaluate, make_blobs, make_env
from .errors import CheckpointError, ConfigError, TrainingDivergenceError
from .ndmath import Adam, Mlp, cross_entropy_loss, load_checkpoint, save_checkpoint
from .onpolicy import ReinforceConfig, ValueFunction, reinforce_train
from .plan import Mcts, UpsideDownConfig, UpsideDownPolicy, exhaustive_returns
from .policy import make_head
from .ppo import ActorCriticNet, PpoConfig, ppo_train
from .qlearn import DqnAgent, QLearnConfig, qlearn_train
from .sac import SacAgent, SacConfig, sac_train
from .seeding import int_seed, stream
from .value import QFunction, StateToAllActions, one_hot_rewards, one_step_q_loss

ALGORITHMS = ("qlearn", "reinforce", "sac", "ppo", "updown", "plan", "classify")


@dataclass
class EnvConfig:
    name: str = "gridworld"
    width: int = 4
    height: int = 4
    obstacles: str = ""
    step_penalty: float = 0.01
    length: int = 5
    horizon: int = 100
    time_limit: int = 0
    n_samples: int = 600
    n_classes: int = 3
    dim: int = 2
    separation: float = 4.0
    noise: float = 1.0
    csv: str = ""

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ConfigError(f"env.name {self.name!r} is not one of {', '.join(ENV_NAMES)}")
        if self.time_limit < 0:
            raise ConfigError("env.time_limit must be >= 0 (0 disables it)")


@dataclass
class PlanConfig:
    budget: int = 5000
    trials: int = 100
    gamma: float = 0.9
    horizon: int = 12
    c: float = math.sqrt(2.0)
    root_rule: str = "visits"

    def __post_init__(self):
        if self.budget < 1 or self.trials < 1 or self.horizon < 1:
            raise ConfigError("plan.budget, plan.trials and plan.horizon must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"plan.gamma must lie in [0, 1], got {self.gamma}")
        if self.root_rule not in ("visits", "mean"):
            raise ConfigError(f"plan.root_rule must be visits or mean, got {self.root_rule!r}")


@dataclass
class ClassifyConfig:
    seeds: int = 5
    val_fraction: float = 0.3
    epochs: int = 60
    batch_size: int = 32
    hidden: tuple = (32,)
    lr_mse: float = 1e-2
    lr_ce: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("classify.val_fraction must lie in (0, 1)")
        if self.seeds < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("classify.seeds, classify.epochs and classify.batch_size must be >= 1")


SECTIONS = {
    "env": EnvConfig,
    "qlearn": QLearnConfig,
    "reinforce": ReinforceConfig,
    "sac": SacConfig,
    "ppo": PpoConfig,
    "updown": UpsideDownConfig,
    "plan": PlanConfig,
    "classify": ClassifyConfig,
}


@dataclass
class RunConfig:
    algorithm: str = "ppo"
    seed: int = 0
    total_steps: int = 50_000
    eval_episodes: int = 20
    checkpoint_every: int = 0
    gamma: float | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    qlearn: QLearnConfig = field(default_factory=QLearnConfig)
    reinforce: ReinforceConfig = field(default_factory=ReinforceConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    updown: UpsideDownConfig = field(default_factory=UpsideDownConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm {self.algorithm!r} is not one of {', '.join(ALGORITHMS)}")
        if self.total_steps < 1 or self.eval_episodes < 1 or self.checkpoint_every < 0:
            raise ConfigError("total_steps and eval_episodes must be >= 1, checkpoint_every >= 0")
        if self.gamma is not None:
            if not 0.0 <= self.gamma <= 1.0:
                raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
            for name in ("qlearn", "reinforce", "sac", "ppo"):
                setattr(self, name, dataclasses.replace(getattr(self, name), gamma=self.gamma))


# ------------------------------------------------------------ parsing


def _scalar_fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in SECTIONS}


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _convert(key: str, raw: str, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if default is None and text.lower() in ("none", ""):
                return None
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        kind = "bool" if isinstance(default, bool) else type(default).__name__ if default is not None else "float"
        raise ConfigError(f"{key}: expected {kind}, got {raw.strip()!r}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Strict parse: unknown keys, bad types and out-of-range values are errors."""
    top: dict = {}
    sections: dict = {name: {} for name in SECTIONS}
    top_fields = _scalar_fields(RunConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r} in {key!r}; "
                                  f"valid sections: {', '.join(SECTIONS)}")
            fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
            if name not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}; valid keys in [{section}]: "
                                  f"{', '.join(sorted(fields))}")
            sections[section][name] = _convert(key, raw, _default(fields[name]))
        else:
            if key not in top_fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}; valid top-level keys: "
                                  f"{', '.join(sorted(top_fields))}")
            top[key] = _convert(key, raw, _default(top_fields[key]))
    built = {name: cls(**sections[name]) for name, cls in SECTIONS.items()}
    gamma_override = top.pop("gamma", None)
    cfg = RunConfig(**top, **built)
    if gamma_override is not None:
        cfg.gamma = gamma_override
        cfg.__post_init__()
    return cfg


def serialize(config: RunConfig) -> str:
    lines = [f"{f.name}={_format(getattr(config, f.name))}" for f in dataclasses.fields(RunConfig)
             if f.name not in SECTIONS]
    for name in SECTIONS:
        section = getattr(config, name)
        lines += [f"{name}.{f.name}={_format(getattr(section, f.name))}" for f in dataclasses.fields(section)]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------ metrics


class MetricsWriter:
    """JSON-lines sink: sorted keys, one object per line, finite numbers only."""

    def __init__(self, path):
        self.path = Path(path)
        self.handle = self.path.open("w", encoding="utf-8", newline="\n")
        self.last_env_steps = 0
        self.rows = 0

    def __call__(self, row: dict) -> None:
        for key, value in row.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise TrainingDivergenceError(key, f"metric {key!r} is not finite: {value}")
        steps = row.get("env_steps")
        if steps is not None:
            if steps < self.last_env_steps:
                raise ValueError(f"env_steps went backwards: {steps} < {self.last_env_steps}")
            self.last_env_steps = steps
        self.handle.write(json.dumps(row, sort_keys=True) + "\n")
        self.rows += 1

    def close(self) -> None:
        self.handle.close()


# ------------------------------------------------------------ building blocks


def build_env(config: RunConfig, rng: np.random.Generator | None = None):
    e = config.env
    params = dataclasses.asdict(e)
    name = params.pop("name")
    limit = params.pop("time_limit") or None
    if name == "bandit":
        rng = rng if rng is not None else stream(config.seed, "data")
    return make_env(name, time_limit=limit, rng=rng, **params)


def _text_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _tensor_text(t: np.ndarray) -> str:
    return bytes(np.asarray(t, dtype=np.uint8).tolist()).decode("utf-8")


class Model:
    """What a run trained: its weights, a greedy actor and how to rebuild it."""

    def __init__(self, config: RunConfig, env):
        self.config = config
        spec = env.spec
        init = stream(config.seed, "init")
        algo = config.algorithm
        self.obj = None
        if algo == "qlearn":
            self.obj = DqnAgent(spec.state_dim, spec.action_space.n, config.qlearn, init)
            self.act = self.obj.act_greedy
        elif algo == "reinforce":
            kind = "categorical" if isinstance(spec.action_space, Discrete) else "tanh_gaussian"
            dim = spec.action_space.n if kind == "categorical" else spec.action_space.dim
            self.obj = make_head(kind, spec.state_dim, dim, config.reinforce.hidden, init)
            self.value = ValueFunction(Mlp([spec.state_dim, *config.reinforce.hidden, 1], rng=init))
            self.act = self.obj.act_greedy
        elif algo == "sac":
            if not isinstance(spec.action_space, Box):
                raise ConfigError("sac needs a continuous-action env (env.name=pointmass)")
            self.obj = SacAgent(spec.state_dim, spec.action_space.dim, config.sac, init)
            self.act = self.obj.act_greedy
        elif algo == "ppo":
            self.obj = ActorCriticNet.for_space(spec.state_dim, spec.action_space, config.ppo.hidden,
                                                stream(config.seed, "ppo.init"))
            self.act = self.obj.act_greedy
        elif algo == "updown":
            if not isinstance(spec.action_space, Discrete):
                raise ConfigError("updown needs a discrete-action env")
            self.obj = UpsideDownPolicy(spec.state_dim, spec.action_space.n, config.updown, init)
            self.act = self.obj.act
        else:
            raise ConfigError(f"algorithm {algo!r} produces no model")

    def state_dict(self) -> dict:
        algo = self.config.algorithm
        if algo == "qlearn":
            out = self.obj.state_dict()
        elif algo == "reinforce":
            out = self.obj.trunk.state_dict("policy.")
            out.update(self.value.net.state_dict("value."))
        elif algo == "sac":
            out = self.obj.state_dict()
        elif algo == "ppo":
            out = self.obj.net.state_dict("ac.")
        else:
            out = self.obj.net.state_dict("updown.")
            out["updown.max_command"] = np.array(self.obj.max_command)
            out["updown.max_horizon"] = np.array(self.obj.max_horizon)
        out["meta.config"] = _text_tensor(serialize(self.config))
        return out

    def load_state_dict(self, tensors: dict) -> None:
        algo = self.config.algorithm
        if algo == "qlearn":
            self.obj.q.net.load_state_dict(tensors, "q.")
            self.obj.target.q.net.load_state_dict(tensors, "q_tgt.")
        elif algo == "reinforce":
            self.obj.trunk.load_state_dict(tensors, "policy.")
            self.value.net.load_state_dict(tensors, "value.")
        elif algo == "sac":
            self.obj.load_state_dict(tensors)
        elif algo == "ppo":
            self.obj.net.load_state_dict(tensors, "ac.")
        else:
            self.obj.net.load_state_dict(tensors, "updown.")
            self.obj.max_command = float(tensors["updown.max_command"])
            self.obj.max_horizon = float(tensors["updown.max_horizon"])


def _updown_dataset(env, episodes: int, rng: np.random.Generator, max_steps: int = 200):
    """Random-policy episodes turned into (state, return-to-go, steps-to-go, action) rows."""
    n = env.spec.action_space.n
    rows = []
    for _ in range(episodes):
        s = env.reset(seed=int(rng.integers(2**31)))
        ep = []
        for _ in range(max_steps):
            a = int(rng.integers(n))
            s2, r, done, _ = env.step(a)
            ep.append((s, a, r))
            s = s2
            if done:
                break
        g = 0.0
        for k, (st, a, r) in enumerate(reversed(ep)):
            g += r
            rows.append((st, g, k + 1, a))
    states = np.array([r[0] for r in rows])
    return states, np.array([r[1] for r in rows]), np.array([r[2] for r in rows], dtype=np.float64), \
        np.array([r[3] for r in rows])


# ------------------------------------------------------------ drivers


def run_train(config: RunConfig, out_dir) -> int:
    """Train per ``config`` and write artifacts into ``out_dir``.

    Writes ``config.txt``, ``metrics.jsonl``, ``checkpoint.ndrl`` (plus
    ``checkpoint-<steps>.ndrl`` when ``checkpoint_every`` is set) and
    ``eval.json``. Returns 0 on success and 3 when training diverged, in
    which case ``diagnostic.ndrl`` holds the last weights.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize(config), encoding="utf-8")
    if config.algorithm == "plan":
        run_plan(config, out / "plan.csv")
        return 0
    if config.algorithm == "classify":
        (out / "classify.csv").write_text(format_table(run_classify_experiment(config)), encoding="utf-8")
        return 0
    metrics = MetricsWriter(out / "metrics.jsonl")
    env = build_env(config)
    eval_env = build_env(config)
    model = Model(config, env)
    train_rng = stream(config.seed, "train")
    eval_seed = int_seed(config.seed, "eval")
    next_ckpt = config.checkpoint_every

    def log_row(row):
        nonlocal next_ckpt
        metrics(row)
        steps = row.get("env_steps", 0)
        if next_ckpt and steps >= next_ckpt:
            save_checkpoint(out / f"checkpoint-{steps}.ndrl", model.state_dict())
            while next_ckpt <= steps:
                next_ckpt += config.checkpoint_every

    try:
        algo = config.algorithm
        if algo == "qlearn":
            qlearn_train(env, config.qlearn, config.total_steps, train_rng, log_row, eval_env, eval_seed,
                         agent=model.obj)
        elif algo == "reinforce":
            value = model.value if config.reinforce.baseline == "value" else None
            reinforce_train(env, model.obj, config.reinforce, config.total_steps, train_rng, value, log_row)
        elif algo == "sac":
            sac_train(model.obj, env, config.total_steps, train_rng, log_row, eval_env, eval_seed)
        elif algo == "ppo":
            ppo_train(lambda i: build_env(config), config.ppo, config.total_steps, config.seed, log_row,
                      eval_env, eval_every=10, eval_episodes=config.eval_episodes, net=model.obj)
        elif algo == "updown":
            states, commands, horizons, actions = _updown_dataset(env, max(1, config.total_steps // 10), train_rng)
            h = horizons if config.updown.use_horizon else None
            for epoch, loss in enumerate(model.obj.fit(states, commands, actions, train_rng, h), 1):
                log_row({"epoch": epoch, "updown_loss": loss})
    except TrainingDivergenceError as exc:
        save_checkpoint(out / "diagnostic.ndrl", model.state_dict())
        metrics.close()
        (out / "error.txt").write_text(f"training diverged: {exc}\n", encoding="utf-8")
        return 3
    save_checkpoint(out / "checkpoint.ndrl", model.state_dict())
    report = evaluate(eval_env, model.act, config.eval_episodes, eval_seed)
    summary = {"eval_return_mean": report.mean, "eval_return_std": report.std,
               "eval_success": report.success_rate, "episodes": config.eval_episodes}
    metrics({"final_eval_return": report.mean, "final_eval_return_std": report.std,
             "final_eval_success": report.success_rate})
    metrics.close()
    (out / "eval.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return 0


def load_model(path) -> Model:
    tensors = load_checkpoint(path)
    if "meta.config" not in tensors:
        raise CheckpointError(f"{path} carries no run configuration")
    config = parse_config(_tensor_text(tensors["meta.config"]))
    model = Model(config, build_env(config))
    model.load_state_dict(tensors)
    return model


def run_eval(path, episodes: int = 20, seed: int | None = None) -> dict:
    model = load_model(path)
    cfg = model.config
    env = build_env(cfg)
    report = evaluate(env, model.act, episodes, int_seed(cfg.seed if seed is None else seed, "eval"))
    return {"algorithm": cfg.algorithm, "episodes": episodes, "eval_return_mean": report.mean,
            "eval_return_std": report.std, "eval_success": report.success_rate}


def _train_classifier(loss: str, x, y, n_classes: int, cfg: ClassifyConfig, rng: np.random.Generator) -> Mlp:
    net = Mlp([x.shape[1], *cfg.hidden, n_classes], rng=rng)
    opt = Adam(net, lr=cfg.lr_mse if loss == "mse" else cfg.lr_ce)
    q = QFunction(net, StateToAllActions(n_classes))
    targets = one_hot_rewards(y, n_classes)
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            net.zero_grad()
            if loss == "mse":
                one_step_q_loss(q, x[idx], None, targets[idx])
            else:
                logits, cache = net.forward_train(x[idx])
                _, g = cross_entropy_loss(logits, y[idx])
                net.backward(cache, g)
            opt.step()
    return net


def run_classify_experiment(config: RunConfig) -> list[dict]:
    """Vector-Q regression (MSE on one-hot accuracy) vs softmax cross-entropy.

    For each seed: draw a dataset, split off a validation set, train both
    models from the same initial weights, report validation accuracy.
    """
    e, c = config.env, config.classify
    rows = []
    for k in range(c.seeds):
        data_rng = stream(config.seed, "classify.data", k)
        if e.csv:
            bandit = DatasetBandit.from_csv(e.csv)
            x, y, n = bandit.features, bandit.labels, bandit.n_classes
        else:
            x, y = make_blobs(e.n_samples, e.n_classes, e.dim, e.separation, e.noise, data_rng)
            n = e.n_classes
        perm = data_rng.permutation(len(x))
        n_val = max(1, int(round(c.val_fraction * len(x))))
        val, train = perm[:n_val], perm[n_val:]
        row = {"seed": k}
        for loss in ("mse", "ce"):
            net = _train_classifier(loss, x[train], y[train], n, c, stream(config.seed, "classify.init", k))
            pred = np.argmax(net.forward(x[val]), axis=1)
            row[f"{loss}_accuracy"] = float(np.mean(pred == y[val]))
        row["gap"] = row["mse_accuracy"] - row["ce_accuracy"]
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def run_plan(config: RunConfig, out_csv=None) -> dict:
    """Head-to-head MCTS vs exhaustive search vs a random first action.

    A planner agrees with the oracle when its action attains the optimal
    exhaustive return (within 1e-9), so ties count as agreement.
    """
    p = config.plan
    env = build_env(config)
    model = env.exact_model()
    if model is None:
        raise ConfigError(f"env {config.env.name!r} has no exact model to plan with")
    rows = []
    for trial in range(p.trials):
        rng = stream(config.seed, "plan", trial)
        s = int(model.start_states[int(rng.integers(len(model.start_states)))])
        q = exhaustive_returns(model, s, p.horizon, p.gamma)
        best = float(q.max())
        oracle = int(np.flatnonzero(q >= best - 1e-9)[0])
        planner = Mcts(model, p.gamma, p.c, root_rule=p.root_rule)
        a_mcts = planner.search(p.budget, rng, s)
        a_rand = int(rng.integers(model.n_actions))
        rows.append({"trial": trial, "state": s, "exhaustive_action": oracle, "exhaustive_return": best,
                     "mcts_action": a_mcts, "random_action": a_rand,
                     "mcts_agrees": int(q[a_mcts] >= best - 1e-9), "random_agrees": int(q[a_rand] >= best - 1e-9)})
    if out_csv is not None:
        Path(out_csv).write_text(format_table(rows), encoding="utf-8")
    return {
        "trials": p.trials,
        "mcts_agreement": float(np.mean([r["mcts_agrees"] for r in rows])),
        "random_agreement": float(np.mean([r["random_agrees"] for r in rows])),
        "rows": rows,
    }
