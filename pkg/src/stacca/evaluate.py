"""Frozen-policy evaluation, scripted baselines and the ablation grid."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from stacca import autodiff as ad
from stacca.env import (
    NUM_ACTIONS,
    Action,
    ConfigError,
    EnvConfig,
    GlobalState,
    ObservationIndex,
    RewardConfig,
    reset,
    step,
)
from stacca.graph import Graph, GraphSpec, generate
from stacca.models import ModelConfig, ObsLayout, sample_actions
from stacca.train import TrainConfig, load_policy, train

ERADICATION_NEVER = -1

ABLATION_VARIANTS = ("stacca", "mlp_actor", "mlp_critic", "gat_only_critic", "gae_shared")


class ArtifactError(RuntimeError):
    pass


@dataclass(frozen=True)
class Injection:
    time: int
    num_seeds: int


@dataclass(frozen=True)
class EvalScenario:
    graph_spec: GraphSpec
    env_overrides: dict = field(default_factory=dict)
    episodes: int = 100
    horizon: int = 100
    policy_checkpoint: str | None = None
    deterministic: bool = False
    injection: Injection | None = None
    init_control: float | None = None
    kind: str | None = None  # None: taken from the checkpoint, else epidemic
    seed: int = 0
    name: str = ""

    def validate(self) -> None:
        if self.horizon < 1:
            raise ConfigError("scenario horizon must be >= 1")
        if self.episodes < 1:
            raise ConfigError("scenario needs at least one episode")
        if self.injection is not None and not 0 <= self.injection.time < self.horizon:
            raise ConfigError(
                f"injection time {self.injection.time} outside [0, {self.horizon})"
            )
        if self.init_control is not None and not 0.0 <= self.init_control <= 1.0:
            raise ConfigError("init_control must lie in [0, 1]")

    @property
    def label(self) -> str:
        return self.name or self.graph_spec.label()


@dataclass
class EvalMetrics:
    mean_frac: np.ndarray  # (T+1,)
    std_frac: np.ndarray
    mean_control: np.ndarray
    episode_rewards: np.ndarray  # (episodes,)
    erad_time: int

    @property
    def final_frac(self) -> float:
        return float(self.mean_frac[-1])

    @property
    def reward_mean(self) -> float:
        return float(self.episode_rewards.mean())

    @property
    def reward_stderr(self) -> float:
        r = self.episode_rewards
        if r.size < 2:
            return 0.0
        return float(r.std(ddof=1) / math.sqrt(r.size))


def separation(a: EvalMetrics, b: EvalMetrics) -> float:
    """Reward difference ``a - b`` in units of the pooled standard error."""
    se = math.hypot(a.reward_stderr, b.reward_stderr)
    diff = a.reward_mean - b.reward_mean
    if se == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / se


# -- policies -----------------------------------------------------------------


class Policy(Protocol):
    name: str

    def actions(self, layout: ObsLayout, h: np.ndarray, c: np.ndarray,
                rng: np.random.Generator) -> np.ndarray: ...


class ConstantPolicy:
    def __init__(self, action: Action, name: str):
        self.action, self.name = int(action), name

    def actions(self, layout, h, c, rng):
        return np.full(h.shape, self.action, dtype=np.int64)


def ZeroControl() -> ConstantPolicy:
    return ConstantPolicy(Action.MAINTAIN, "ZeroControl")


def FullControl() -> ConstantPolicy:
    return ConstantPolicy(Action.INCREASE, "FullControl")


class RandomPolicy:
    name = "RandomPolicy"

    def actions(self, layout, h, c, rng):
        return rng.integers(NUM_ACTIONS, size=h.shape)


class ActorPolicy:
    def __init__(self, actor, deterministic: bool = False, name: str = "policy"):
        self.actor, self.deterministic, self.name = actor, deterministic, name

    def actions(self, layout, h, c, rng):
        with ad.no_grad():
            logp = self.actor.log_probs(layout.batch(h, c)).data
        return sample_actions(logp, rng, self.deterministic)


BASELINES = {"ZeroControl": ZeroControl, "FullControl": FullControl, "RandomPolicy": RandomPolicy}


def baseline(name: str) -> Policy:
    if name not in BASELINES:
        raise ConfigError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}")
    return BASELINES[name]()


def load_actor_policy(path: str | os.PathLike, deterministic: bool = False, name: str = "policy"):
    """``(ActorPolicy, env config)`` from a training checkpoint."""
    if not Path(path).is_file():
        raise ArtifactError(f"checkpoint not found: {path}")
    try:
        actor, _, meta = load_policy(path)
    except (ValueError, KeyError) as err:
        raise ArtifactError(f"{path}: {err}") from err
    return ActorPolicy(actor, deterministic, name), env_from_dict(meta["env"])


def env_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    reward = d.pop("reward", None)
    return EnvConfig(**d, reward=RewardConfig(**reward) if reward is not None else None)


def scenario_env(scenario: EvalScenario, base: EnvConfig | None = None) -> EnvConfig:
    kind = scenario.kind or (base.kind if base is not None else "epidemic")
    if base is None or base.kind != kind:
        base = EnvConfig(kind=kind)
    env = replace(base, horizon=scenario.horizon, **scenario.env_overrides)
    env.validate()
    return env


# -- evaluation ---------------------------------------------------------------


def _eval_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("reset", "noise", "policy", "injection")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def run_episodes(
    env_cfg: EnvConfig,
    graph: Graph,
    policy: Policy,
    episodes: int,
    horizon: int,
    seed: int = 0,
    injection: Injection | None = None,
    init_control: float | None = None,
) -> EvalMetrics:
    """Roll out ``episodes`` lockstep episodes and aggregate per-timestep stats.

    Reset states and transition noise depend only on ``seed``, so policies
    evaluated with the same seed face paired randomness.
    """
    env_cfg.validate(graph.num_nodes)
    streams = _eval_streams(seed)
    n = graph.num_nodes
    layout = ObsLayout(ObservationIndex(env_cfg, graph)) if isinstance(policy, ActorPolicy) else None
    c0 = 0.0 if init_control is None else float(init_control)
    states = [reset(env_cfg, graph, streams["reset"], c0) for _ in range(episodes)]
    frac = np.zeros((episodes, horizon + 1))
    ctrl = np.zeros((episodes, horizon + 1))
    rewards = np.zeros((episodes, horizon))
    for t in range(horizon):
        if injection is not None and t == injection.time:
            for s in states:
                _inject(s, injection.num_seeds, streams["injection"])
        h = np.stack([s.h for s in states])
        c = np.stack([s.c for s in states])
        frac[:, t], ctrl[:, t] = h.mean(1), c.mean(1)
        acts = policy.actions(layout, h, c, streams["policy"])
        noise = streams["noise"].random((episodes, n))
        for e in range(episodes):
            states[e], rewards[e, t] = step(env_cfg, graph, states[e], acts[e], noise[e])
    frac[:, horizon] = [s.h.mean() for s in states]
    ctrl[:, horizon] = [s.c.mean() for s in states]
    mean_frac = frac.mean(0)
    hits = np.flatnonzero(mean_frac == 0.0)
    return EvalMetrics(
        mean_frac=mean_frac,
        std_frac=frac.std(0),
        mean_control=ctrl.mean(0),
        episode_rewards=rewards.sum(1),
        erad_time=int(hits[0]) if hits.size else ERADICATION_NEVER,
    )


def _inject(state: GlobalState, k: int, rng: np.random.Generator) -> None:
    clear = np.flatnonzero(state.h == 0)
    if clear.size:
        state.h[rng.choice(clear, size=min(k, clear.size), replace=False)] = 1


def evaluate(scenario: EvalScenario, policy: Policy | None = None) -> EvalMetrics:
    """Evaluate the scenario's checkpoint (or an explicit ``policy``)."""
    scenario.validate()
    base = None
    if policy is None:
        if scenario.policy_checkpoint is None:
            raise ConfigError("scenario has neither a checkpoint nor an explicit policy")
        policy, base = load_actor_policy(scenario.policy_checkpoint, scenario.deterministic)
    env_cfg = scenario_env(scenario, base)
    graph = generate(scenario.graph_spec)
    return run_episodes(env_cfg, graph, policy, scenario.episodes, scenario.horizon,
                        scenario.seed, scenario.injection, scenario.init_control)


@dataclass
class ComparisonRow:
    scenario: str
    policy: str
    metrics: EvalMetrics


def compare(
    scenarios: Sequence[EvalScenario],
    policies: dict[str, str | os.PathLike | Policy] | None = None,
    baselines: Sequence[str] = ("ZeroControl", "FullControl", "RandomPolicy"),
) -> list[ComparisonRow]:
    """Evaluate every (scenario, policy) pair with paired seeds per scenario.

    A scenario's own ``policy_checkpoint`` is added as policy ``"policy"``.
    """
    policies = dict(policies or {})
    loaded: dict[str, tuple[Policy, EnvConfig | None]] = {}
    for name, p in policies.items():
        if isinstance(p, (str, os.PathLike)):
            pol, env = load_actor_policy(p, name=name)
            loaded[name] = (pol, env)
        else:
            loaded[name] = (p, None)
    kinds = set()
    for sc in scenarios:
        sc.validate()
        if sc.kind is not None:
            kinds.add(sc.kind)
    kinds |= {env.kind for _, env in loaded.values() if env is not None}
    own: dict[int, tuple[Policy, EnvConfig]] = {}
    for k, sc in enumerate(scenarios):
        if sc.policy_checkpoint is not None:
            own[k] = load_actor_policy(sc.policy_checkpoint, sc.deterministic)
            kinds.add(own[k][1].kind)
    if len(kinds) > 1:
        raise ConfigError(f"cannot compare across environment kinds {sorted(kinds)}")
    rows = []
    for k, sc in enumerate(scenarios):
        graph = generate(sc.graph_spec)
        entries = [(name, pol, env) for name, (pol, env) in loaded.items()]
        if k in own:
            entries.append(("policy", *own[k]))
        entries += [(b, baseline(b), None) for b in baselines]
        for name, pol, env in entries:
            if isinstance(pol, ActorPolicy):
                pol.deterministic = sc.deterministic
            env_cfg = scenario_env(sc, env)
            m = run_episodes(env_cfg, graph, pol, sc.episodes, sc.horizon, sc.seed,
                             sc.injection, sc.init_control)
            rows.append(ComparisonRow(sc.label, name, m))
    return rows


# -- CSV output ---------------------------------------------------------------

TIMESERIES_FIELDS = ("scenario", "policy", "t", "mean_frac", "std_frac", "mean_control")
SUMMARY_FIELDS = ("scenario", "policy", "final_frac", "erad_time", "reward_mean", "reward_stderr")


def write_timeseries(path: str | os.PathLike, rows: Sequence[ComparisonRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMESERIES_FIELDS)
        for row in rows:
            m = row.metrics
            for t in range(m.mean_frac.size):
                w.writerow([row.scenario, row.policy, t, repr(float(m.mean_frac[t])),
                            repr(float(m.std_frac[t])), repr(float(m.mean_control[t]))])


def write_summary(path: str | os.PathLike, rows: Sequence[ComparisonRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in rows:
            m = row.metrics
            w.writerow([row.scenario, row.policy, repr(m.final_frac), m.erad_time,
                        repr(m.reward_mean), repr(m.reward_stderr)])


# -- ablation grid ------------------------------------------------------------


def variant_configs(variant: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    if variant == "gae_shared":
        return replace(model_cfg, variant="stacca"), replace(train_cfg, advantage_mode="gae_shared")
    return (replace(model_cfg, variant=variant),
            replace(train_cfg, advantage_mode="counterfactual"))


def ablation_suite(
    graph: Graph,
    env_cfg: EnvConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    runs: int = 3,
    out_dir: str | os.PathLike | None = None,
    variants: Sequence[str] = ABLATION_VARIANTS,
    progress=None,
) -> dict[str, list[list[dict]]]:
    """Train every variant ``runs`` times; run ``r`` uses seed ``train.seed + r``
    for all variants. Returns per-variant lists of metric rows."""
    if runs < 1:
        raise ConfigError("ablation needs at least one run per variant")
    out = Path(out_dir) if out_dir is not None else None
    curves: dict[str, list[list[dict]]] = {}
    for variant in variants:
        m_cfg, t_cfg = variant_configs(variant, model_cfg, train_cfg)
        curves[variant] = []
        for r in range(runs):
            cfg_r = replace(t_cfg, seed=train_cfg.seed + r)
            run_dir = out / variant / f"run{r}" if out is not None else None
            res = train(graph, env_cfg, m_cfg, cfg_r, out_dir=run_dir, progress=progress)
            curves[variant].append(res.metrics)
    return curves
