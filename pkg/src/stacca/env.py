"""Networked control environments: epidemic containment and rumor spreading.

Both share the state layout ``(h_i, c_i)`` per node and the three-way action
``{-dc, 0, +dc}`` on the control level. Stepping is a pure function of
``(config, graph, state, actions, noise)``; the per-node uniform noise is
drawn once per timestep so that counterfactual branches can reuse it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Literal, NamedTuple, Sequence

import numpy as np

from stacca.graph import Graph


class ConfigError(ValueError):
    pass


class Action(IntEnum):
    DECREASE = 0
    MAINTAIN = 1
    INCREASE = 2


NUM_ACTIONS = len(Action)
ACTION_SIGN = np.array([-1.0, 0.0, 1.0])

EnvKind = Literal["epidemic", "rumor"]


@dataclass(frozen=True)
class RewardConfig:
    w_ctrl: float = 2.0
    a_ctrl: float = 2.0
    w_cat: float = 5.0
    cat_threshold: float = 0.3
    cat_steepness: float = 20.0
    w_lin: float = 1.0
    eradication_bonus: float = 3.0

    @classmethod
    def epidemic(cls) -> RewardConfig:
        return cls()

    @classmethod
    def rumor(cls) -> RewardConfig:
        return cls(w_ctrl=1.0, a_ctrl=2.0, w_cat=0.0, w_lin=2.0, eradication_bonus=0.0)

    @classmethod
    def default_for(cls, kind: EnvKind) -> RewardConfig:
        return cls.epidemic() if kind == "epidemic" else cls.rumor()


_DEFAULT_BETA0 = {"epidemic": 0.15, "rumor": 0.25}


@dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind = "epidemic"
    beta0: float | None = None
    eta: float = 0.9
    delta_recovery: float = 0.1
    kappa: float = 3.0
    delta_c: float = 0.1
    num_seeds: int = 3
    horizon: int = 100
    reward: RewardConfig | None = None
    obs_hops: int = 1
    n_train_ref: int = 50

    def __post_init__(self):
        if self.kind not in _DEFAULT_BETA0:
            raise ConfigError(f"unknown environment kind {self.kind!r}")
        if self.beta0 is None:
            object.__setattr__(self, "beta0", _DEFAULT_BETA0[self.kind])
        if self.reward is None:
            object.__setattr__(self, "reward", RewardConfig.default_for(self.kind))

    @classmethod
    def epidemic(cls, **kw) -> EnvConfig:
        return cls(kind="epidemic", **kw)

    @classmethod
    def rumor(cls, **kw) -> EnvConfig:
        return cls(kind="rumor", **kw)

    def with_overrides(self, **kw) -> EnvConfig:
        return replace(self, **kw)

    def validate(self, num_nodes: int | None = None) -> None:
        for name in ("beta0", "eta", "delta_recovery", "delta_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"env.{name}={v} must lie in [0, 1]")
        if self.kappa <= 0:
            raise ConfigError(f"env.kappa={self.kappa} must be > 0")
        if self.horizon < 1:
            raise ConfigError(f"env.horizon={self.horizon} must be >= 1")
        if self.num_seeds < 1:
            raise ConfigError(f"env.num_seeds={self.num_seeds} must be >= 1")
        if num_nodes is not None and self.num_seeds > num_nodes:
            raise ConfigError(
                f"env.num_seeds={self.num_seeds} exceeds graph size {num_nodes}"
            )
        if self.obs_hops < 0:
            raise ConfigError("env.obs_hops must be >= 0")
        if self.n_train_ref < 1:
            raise ConfigError("env.n_train_ref must be >= 1")
        r = self.reward
        for name in ("w_ctrl", "a_ctrl", "w_cat", "cat_steepness", "w_lin", "eradication_bonus"):
            if getattr(r, name) < 0:
                raise ConfigError(f"env.reward.{name} must be >= 0")
        if not 0.0 < r.cat_threshold < 1.0:
            raise ConfigError("env.reward.cat_threshold must lie in (0, 1)")


class NodeState(NamedTuple):
    h: int
    c: float


@dataclass
class GlobalState:
    h: np.ndarray  # int8 status per node
    c: np.ndarray  # float64 control level per node
    t: int = 0

    @property
    def num_nodes(self) -> int:
        return self.h.shape[0]

    def node(self, i: int) -> NodeState:
        return NodeState(int(self.h[i]), float(self.c[i]))

    def copy(self) -> GlobalState:
        return GlobalState(self.h.copy(), self.c.copy(), self.t)

    def fraction(self) -> float:
        return float(self.h.mean())

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, GlobalState)
            and self.t == other.t
            and np.array_equal(self.h, other.h)
            and np.array_equal(self.c, other.c)
        )


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def reset(config: EnvConfig, graph: Graph, seed, init_control: float = 0.0) -> GlobalState:
    """Fresh episode: ``num_seeds`` distinct uniformly chosen nodes start with h=1."""
    n = graph.num_nodes
    if config.num_seeds > n:
        raise ConfigError(f"num_seeds={config.num_seeds} exceeds graph size {n}")
    rng = _rng(seed)
    h = np.zeros(n, dtype=np.int8)
    h[rng.choice(n, size=config.num_seeds, replace=False)] = 1
    c = np.full(n, float(init_control))
    return GlobalState(h, c, 0)


def draw_noise(rng: np.random.Generator, num_nodes: int) -> np.ndarray:
    return rng.random(num_nodes)


# -- dynamics -----------------------------------------------------------------


def infected_neighbor_count(state: GlobalState, graph: Graph, i: int) -> int:
    return int(sum(state.h[j] for j in graph.adjacency[i]))


def infected_neighbor_counts(state: GlobalState, graph: Graph) -> np.ndarray:
    return np.rint(graph.neighbor_sum(state.h)).astype(np.int64)


def transmission_rate(config: EnvConfig, c: np.ndarray | float, frac: float = 0.0):
    """Per-contact transmission probability at control level ``c``.

    ``frac`` is the global aware fraction (rumor saturation; ignored for
    the epidemic).
    """
    if config.kind == "epidemic":
        beta = (1.0 - config.eta * np.asarray(c)) * config.beta0
    else:
        beta = np.asarray(c) * (1.0 - frac) ** config.kappa * config.beta0
    assert np.all(beta >= -1e-12) and np.all(beta <= 1.0 + 1e-12), "beta out of [0, 1]"
    return np.clip(beta, 0.0, 1.0)


def transition_prob_stay_clear(config: EnvConfig, state: GlobalState, i: int, I_i: int) -> float:
    """P(h_i = 0 at t+1 | current state) for a node with ``I_i`` flipped neighbours."""
    if state.h[i] == 1:
        return config.delta_recovery if config.kind == "epidemic" else 0.0
    beta = float(transmission_rate(config, state.c[i], state.fraction()))
    return (1.0 - beta) ** I_i


def stay_clear_probs(config: EnvConfig, graph: Graph, state: GlobalState) -> np.ndarray:
    counts = infected_neighbor_counts(state, graph)
    beta = transmission_rate(config, state.c, state.fraction())
    clear = (1.0 - beta) ** counts
    flipped_stay = config.delta_recovery if config.kind == "epidemic" else 0.0
    return np.where(state.h == 1, flipped_stay, clear)


def apply_actions(config: EnvConfig, c: np.ndarray, joint_action) -> np.ndarray:
    return np.clip(c + ACTION_SIGN[np.asarray(joint_action)] * config.delta_c, 0.0, 1.0)


def step(
    config: EnvConfig,
    graph: Graph,
    state: GlobalState,
    joint_action: Sequence[int] | np.ndarray,
    noise: np.ndarray,
) -> tuple[GlobalState, float]:
    joint_action = np.asarray(joint_action, dtype=np.int64)
    n = graph.num_nodes
    if joint_action.shape != (n,) or np.shape(noise) != (n,) or state.num_nodes != n:
        raise ValueError(
            f"shape mismatch: actions {joint_action.shape}, noise {np.shape(noise)}, "
            f"state {state.num_nodes}, graph {n}"
        )
    p_clear = stay_clear_probs(config, graph, state)
    h_next = np.where(noise < p_clear, 0, 1).astype(np.int8)
    c_next = apply_actions(config, state.c, joint_action)
    nxt = GlobalState(h_next, c_next, state.t + 1)
    return nxt, team_reward(config, nxt)


# -- reward -------------------------------------------------------------------


def control_term(config: EnvConfig, c_mean: float) -> float:
    r = config.reward
    return -r.w_ctrl * (math.exp(r.a_ctrl * c_mean) - 1.0)


def status_term(config: EnvConfig, frac: float) -> float:
    r = config.reward
    if config.kind == "rumor":
        return r.w_lin * frac
    cat = 1.0 / (1.0 + math.exp(-r.cat_steepness * (frac - r.cat_threshold)))
    bonus = r.eradication_bonus if frac == 0.0 else 0.0
    return -r.w_cat * cat - r.w_lin * frac + bonus


def reward_bounds(config: EnvConfig) -> tuple[float, float]:
    r = config.reward
    ctrl_max = r.w_ctrl * (math.exp(r.a_ctrl) - 1.0)
    if config.kind == "epidemic":
        return -(ctrl_max + r.w_cat + r.w_lin), r.eradication_bonus
    return -ctrl_max, r.w_lin


def team_reward(config: EnvConfig, state: GlobalState) -> float:
    n = state.num_nodes
    reward = status_term(config, int(state.h.sum()) / n) + control_term(
        config, float(state.c.sum()) / n
    )
    lo, hi = reward_bounds(config)
    assert lo - 1e-9 <= reward <= hi + 1e-9, f"reward {reward} outside [{lo}, {hi}]"
    return reward


# -- observations -------------------------------------------------------------


@dataclass
class LocalObservation:
    subgraph: Graph
    features: np.ndarray  # (n_sub, 5): is_ego, h, c, deg_feat, dist_feat
    ego_local: int
    node_map: np.ndarray


OBS_FEATURES = 5
CRITIC_FEATURES = 3


def degree_feature(config: EnvConfig, degrees: np.ndarray) -> np.ndarray:
    return np.log1p(np.asarray(degrees, dtype=np.float64)) / math.log1p(config.n_train_ref)


class ObservationIndex:
    """Static per-graph observation structure (subgraphs, degree and distance
    features); only the ``h``/``c`` columns change between timesteps."""

    def __init__(self, config: EnvConfig, graph: Graph):
        self.config = config
        self.graph = graph
        self.deg_feat = degree_feature(config, graph.degrees())
        self.subgraphs: list[Graph] = []
        self.node_maps: list[np.ndarray] = []
        self.dist_feats: list[np.ndarray] = []
        k = config.obs_hops
        for i in range(graph.num_nodes):
            sub, node_map, _ = graph.k_hop_subgraph(i, k)
            dist = sub.bfs_distances(0)
            self.subgraphs.append(sub)
            self.node_maps.append(node_map)
            self.dist_feats.append(dist / max(k, 1))
        self.sizes = np.array([len(m) for m in self.node_maps], dtype=np.int64)

    def static_features(self, i: int) -> np.ndarray:
        nm = self.node_maps[i]
        feats = np.zeros((len(nm), OBS_FEATURES))
        feats[0, 0] = 1.0
        feats[:, 3] = self.deg_feat[nm]
        feats[:, 4] = self.dist_feats[i]
        return feats

    def observe(self, state: GlobalState, i: int) -> LocalObservation:
        nm = self.node_maps[i]
        feats = self.static_features(i)
        feats[:, 1] = state.h[nm]
        feats[:, 2] = state.c[nm]
        return LocalObservation(self.subgraphs[i], feats, 0, nm)


def observe(config: EnvConfig, graph: Graph, state: GlobalState, i: int) -> LocalObservation:
    sub, node_map, ego_local = graph.k_hop_subgraph(i, config.obs_hops)
    dist = sub.bfs_distances(ego_local)
    feats = np.zeros((sub.num_nodes, OBS_FEATURES))
    feats[ego_local, 0] = 1.0
    feats[:, 1] = state.h[node_map]
    feats[:, 2] = state.c[node_map]
    feats[:, 3] = degree_feature(config, graph.degrees()[node_map])
    feats[:, 4] = dist / max(config.obs_hops, 1)
    return LocalObservation(sub, feats, ego_local, node_map)


def critic_features(config: EnvConfig, graph: Graph, state: GlobalState) -> np.ndarray:
    return critic_feature_batch(config, graph, state.h, state.c)


def critic_feature_batch(
    config: EnvConfig, graph: Graph, h: np.ndarray, c: np.ndarray, deg_feat=None
) -> np.ndarray:
    """Stack ``[h, c, deg_feat]`` for arrays with any leading batch shape."""
    h = np.asarray(h, dtype=np.float64)
    if deg_feat is None:
        deg_feat = degree_feature(config, graph.degrees())
    return np.stack([h, np.asarray(c, dtype=np.float64), np.broadcast_to(deg_feat, h.shape)], axis=-1)


# -- counterfactual branching -------------------------------------------------


def counterfactual_branch(
    config: EnvConfig,
    graph: Graph,
    state: GlobalState,
    joint_action,
    noise: np.ndarray,
    i: int,
    a_alt: int,
) -> tuple[GlobalState, float]:
    """Reference branch: re-run ``step`` with agent ``i``'s action replaced,
    reusing the same transition noise."""
    alt = np.array(joint_action, dtype=np.int64, copy=True)
    alt[i] = int(a_alt)
    return step(config, graph, state, alt, noise)


@dataclass
class CounterfactualBranches:
    """All one-step branches ``(i, a')`` of one factual transition.

    Branch ``(i, a')`` equals the factual next state except at ``c_i``;
    only that value and the branch reward are stored (index ``i*A + a'``).
    """

    next_state: GlobalState
    reward: float
    c_alt: np.ndarray  # (N, A)
    reward_alt: np.ndarray  # (N, A)

    def materialize(self, i: int, a_alt: int) -> GlobalState:
        s = self.next_state.copy()
        s.c[i] = self.c_alt[i, a_alt]
        return s

    def control_batch(self) -> np.ndarray:
        """Control vectors of all branches, shape (N, A, N)."""
        n = self.c_alt.shape[0]
        c = np.broadcast_to(self.next_state.c, (n, NUM_ACTIONS, n)).copy()
        idx = np.arange(n)
        c[idx, :, idx] = self.c_alt
        return c


def build_branches(
    config: EnvConfig,
    state: GlobalState,
    next_state: GlobalState,
    reward: float,
    joint_action,
) -> CounterfactualBranches:
    """Construct every ``(i, a')`` branch in O(1) each from the factual step.

    Status transitions do not depend on the current action, so with common
    noise a branch differs from the factual next state only in ``c_i``; the
    reward changes only through the mean-control term, which is updated
    from a running sum.
    """
    n = state.num_nodes
    dc = config.delta_c
    c_prev = state.c.tolist()
    c_next = next_state.c.tolist()
    c_sum = float(next_state.c.sum())
    base = status_term(config, int(next_state.h.sum()) / n)
    r = config.reward
    w, a = r.w_ctrl, r.a_ctrl
    signs = (-dc, 0.0, dc)
    c_alt = np.empty((n, NUM_ACTIONS))
    reward_alt = np.empty((n, NUM_ACTIONS))
    for i in range(n):
        ci, cn = c_prev[i], c_next[i]
        rest = c_sum - cn
        for k in range(NUM_ACTIONS):
            v = min(max(ci + signs[k], 0.0), 1.0)
            c_alt[i, k] = v
            if v == cn:
                reward_alt[i, k] = reward
            else:
                reward_alt[i, k] = base - w * (math.exp(a * (rest + v) / n) - 1.0)
    return CounterfactualBranches(next_state, reward, c_alt, reward_alt)


# -- traces -------------------------------------------------------------------


def trace_record(state: GlobalState, actions, reward: float) -> str:
    """One JSONL line of an episode trace."""
    return json.dumps(
        {
            "t": int(state.t),
            "h": "".join(str(int(x)) for x in state.h),
            "c": [round(float(x), 12) for x in state.c],
            "actions": [int(a) for a in actions],
            "reward": float(reward),
        }
    )
