"""MAPPO training with counterfactual per-agent advantages.

One iteration: collect ``episodes_per_iter`` fixed-horizon episodes together
with every one-step counterfactual branch, evaluate the critic on factual and
branch next states, compute GAE returns and advantages, then run ``k_pi``
full-batch actor epochs and ``k_v`` critic epochs over shuffled minibatches
of states.

Randomness comes from one integer seed split into named streams
(``STREAMS``) so that changing, say, the policy sampler never shifts the
environment noise.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from stacca import autodiff as ad
from stacca.autodiff import NumericError, Tensor
from stacca.env import (
    NUM_ACTIONS,
    EnvConfig,
    GlobalState,
    ObservationIndex,
    build_branches,
    critic_feature_batch,
    degree_feature,
    reset,
    step,
)
from stacca.graph import Graph
from stacca.models import (
    ModelConfig,
    ObsLayout,
    build_models,
    critic_values,
    load_model_arrays,
    model_arrays,
    sample_actions,
)

STREAMS = ("graph", "reset", "noise", "policy", "init")

AdvantageMode = Literal["counterfactual", "gae_shared"]
ValueLoss = Literal["huber", "mse"]

METRIC_FIELDS = (
    "iter",
    "mean_episode_reward",
    "actor_loss",
    "critic_loss",
    "entropy",
    "mean_ratio_clip_fraction",
)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    k_pi: int = 4
    k_v: int = 4
    episodes_per_iter: int = 8
    horizon: int = 50
    iters: int = 60
    advantage_mode: AdvantageMode = "counterfactual"
    value_loss: ValueLoss = "huber"
    huber_delta: float = 1.0
    entropy_coef: float = 0.01
    norm_eps: float = 1e-8
    seed: int = 0
    minibatch: int = 0  # states per actor step; 0 = full batch
    critic_minibatch: int = 50  # states per critic step; 0 = full batch
    checkpoint_every: int = 10

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"train.gamma={self.gamma} must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"train.gae_lambda={self.gae_lambda} must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("train.clip_eps must be > 0")
        for name in ("k_pi", "k_v", "episodes_per_iter", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1")
        if min(self.iters, self.minibatch, self.critic_minibatch, self.checkpoint_every) < 0:
            raise ValueError("train.iters, minibatch sizes and checkpoint_every must be >= 0")
        if self.advantage_mode not in ("counterfactual", "gae_shared"):
            raise ValueError(f"unknown train.advantage_mode {self.advantage_mode!r}")
        if self.value_loss not in ("huber", "mse"):
            raise ValueError(f"unknown train.value_loss {self.value_loss!r}")
        if self.huber_delta <= 0 or self.norm_eps <= 0:
            raise ValueError("train.huber_delta and train.norm_eps must be > 0")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be > 0")
        if self.entropy_coef < 0:
            raise ValueError("train.entropy_coef must be >= 0")


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def derived_graph_seed(seed: int) -> int:
    """Graph-generation seed drawn from the ``graph`` stream of ``seed``."""
    return int(seed_streams(seed)["graph"].integers(2**31 - 1))


# -- rollout batch ------------------------------------------------------------


@dataclass
class RolloutBatch:
    """``E`` episodes of ``T`` steps on ``N`` agents with ``A`` actions."""

    h: np.ndarray  # (E, T+1, N) int8
    c: np.ndarray  # (E, T+1, N)
    actions: np.ndarray  # (E, T, N)
    logp_old: np.ndarray  # (E, T, N, A) behaviour log-probabilities
    rewards: np.ndarray  # (E, T)
    noise: np.ndarray  # (E, T, N)
    cf_c: np.ndarray  # (E, T, N, A) branch control value of agent i
    cf_rewards: np.ndarray  # (E, T, N, A)
    values: np.ndarray | None = None  # (E, T+1)
    cf_values: np.ndarray | None = None  # (E, T, N, A)
    returns: np.ndarray | None = None  # (E, T)
    adv_shared: np.ndarray | None = None  # (E, T) raw GAE
    adv_cf: np.ndarray | None = None  # (E, T, N) normalised counterfactual
    layout: ObsLayout | None = field(default=None, repr=False, compare=False)

    @property
    def num_episodes(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def num_agents(self) -> int:
        return self.actions.shape[2]

    @property
    def probs_old(self) -> np.ndarray:
        return np.exp(self.logp_old)

    def flat_states(self) -> tuple[np.ndarray, np.ndarray]:
        """Pre-action states ``(E*T, N)`` in (episode, time) order."""
        n = self.num_agents
        return self.h[:, :-1].reshape(-1, n), self.c[:, :-1].reshape(-1, n)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("h", "c", "actions", "logp_old", "rewards", "noise", "cf_c", "cf_rewards",
                     "values", "cf_values", "returns", "adv_shared", "adv_cf"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


class ValueNormalizer:
    """Running mean/variance of return targets; the critic regresses the
    standardised return and values are mapped back before use."""

    def __init__(self):
        self.count, self.mean, self.var = 0.0, 0.0, 1.0

    @property
    def std(self) -> float:
        return max(float(np.sqrt(self.var)), 1e-6)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        n, mu, var = float(x.size), float(x.mean()), float(x.var())
        tot = self.count + n
        delta = mu - self.mean
        m2 = self.var * self.count + var * n + delta * delta * self.count * n / tot
        self.mean += delta * n / tot
        self.var, self.count = m2 / tot, tot

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, u):
        return np.asarray(u) * self.std + self.mean

    def state_arrays(self, prefix: str = "value_norm") -> dict[str, np.ndarray]:
        return {f"{prefix}/stats": np.array([self.count, self.mean, self.var])}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "value_norm") -> None:
        self.count, self.mean, self.var = (float(v) for v in arrays[f"{prefix}/stats"])


class Trainer:
    """Models, optimisers and static graph structure for one training graph."""

    def __init__(self, graph: Graph, env_cfg: EnvConfig, model_cfg: ModelConfig,
                 cfg: TrainConfig, rng: np.random.Generator):
        env_cfg.validate(graph.num_nodes)
        cfg.validate()
        self.graph, self.env_cfg, self.model_cfg, self.cfg = graph, env_cfg, model_cfg, cfg
        self.actor, self.critic = build_models(model_cfg, rng)
        self.opt_actor = ad.Adam(self.actor.parameters(), cfg.lr_actor)
        self.opt_critic = ad.Adam(self.critic.parameters(), cfg.lr_critic)
        self.layout = ObsLayout(ObservationIndex(env_cfg, graph))
        self.adj = graph.closed_adjacency_mask()
        self.deg_feat = degree_feature(env_cfg, graph.degrees())
        self.value_norm = ValueNormalizer()

    def critic_features(self, h: np.ndarray, c: np.ndarray) -> np.ndarray:
        return critic_feature_batch(self.env_cfg, self.graph, h, c, self.deg_feat)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            **model_arrays(self.actor, self.critic),
            **self.opt_actor.state_arrays("opt_actor"),
            **self.opt_critic.state_arrays("opt_critic"),
            **self.value_norm.state_arrays(),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        load_model_arrays(self.actor, self.critic, arrays)
        self.opt_actor.load_state_arrays("opt_actor", arrays)
        self.opt_critic.load_state_arrays("opt_critic", arrays)
        self.value_norm.load_state_arrays(arrays)

    def values(self, features: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Critic values in return units for a batch ``(B, N, 3)``."""
        return self.value_norm.denormalize(critic_values(self.critic, self.adj, features, chunk))


# -- collection ---------------------------------------------------------------


def collect_rollouts(trainer: Trainer, streams: dict[str, np.random.Generator]) -> RolloutBatch:
    """Run ``episodes_per_iter`` episodes in lockstep and record all branches."""
    cfg, env_cfg, graph = trainer.cfg, trainer.env_cfg, trainer.graph
    e_n, t_n, n, a_n = cfg.episodes_per_iter, cfg.horizon, graph.num_nodes, NUM_ACTIONS
    h = np.zeros((e_n, t_n + 1, n), dtype=np.int8)
    c = np.zeros((e_n, t_n + 1, n))
    actions = np.zeros((e_n, t_n, n), dtype=np.int64)
    logp_old = np.zeros((e_n, t_n, n, a_n))
    rewards = np.zeros((e_n, t_n))
    noise = np.zeros((e_n, t_n, n))
    cf_c = np.zeros((e_n, t_n, n, a_n))
    cf_rewards = np.zeros((e_n, t_n, n, a_n))
    for e in range(e_n):
        s0 = reset(env_cfg, graph, streams["reset"])
        h[e, 0], c[e, 0] = s0.h, s0.c
    for t in range(t_n):
        with ad.no_grad():
            logp = trainer.actor.log_probs(trainer.layout.batch(h[:, t], c[:, t])).data
        a = sample_actions(logp, streams["policy"])
        u = streams["noise"].random((e_n, n))
        logp_old[:, t], actions[:, t], noise[:, t] = logp, a, u
        for e in range(e_n):
            state = GlobalState(h[e, t], c[e, t], t)
            nxt, r = step(env_cfg, graph, state, a[e], u[e])
            br = build_branches(env_cfg, state, nxt, r, a[e])
            h[e, t + 1], c[e, t + 1], rewards[e, t] = nxt.h, nxt.c, r
            cf_c[e, t], cf_rewards[e, t] = br.c_alt, br.reward_alt
    batch = RolloutBatch(h, c, actions, logp_old, rewards, noise, cf_c, cf_rewards,
                         layout=trainer.layout)
    evaluate_values(trainer, batch)
    return batch


def evaluate_values(trainer: Trainer, batch: RolloutBatch, chunk: int = 128) -> None:
    """Critic values of every factual state and every branch next state.

    A branch whose control value equals the factual one *is* the factual
    next state, so its value is copied instead of recomputed.
    """
    e_n, t_n, n = batch.num_episodes, batch.horizon, batch.num_agents
    feats = trainer.critic_features(batch.h, batch.c)  # (E, T+1, N, 3)
    values = trainer.values(feats.reshape(-1, n, feats.shape[-1]), chunk).reshape(e_n, t_n + 1)
    cf_values = np.broadcast_to(values[:, 1:, None, None], batch.cf_c.shape).copy()
    differs = batch.cf_c != batch.c[:, 1:, :, None]
    idx = np.nonzero(differs)
    for start in range(0, idx[0].size, chunk):
        e, t, i, a = (x[start : start + chunk] for x in idx)
        x = feats[e, t + 1].copy()  # (k, N, 3)
        x[np.arange(e.size), i, 1] = batch.cf_c[e, t, i, a]
        cf_values[e, t, i, a] = trainer.values(x, chunk)
    batch.values, batch.cf_values = values, cf_values


# -- estimators ---------------------------------------------------------------


def gae_returns(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float):
    """GAE over fixed-horizon episodes, bootstrapping through the last step.

    ``rewards``: (E, T), ``values``: (E, T+1). Returns ``(returns, adv)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    t_n = rewards.shape[-1]
    delta = rewards + gamma * values[..., 1:] - values[..., :-1]
    adv = np.zeros_like(delta)
    run = np.zeros(delta.shape[:-1])
    for t in range(t_n - 1, -1, -1):
        run = delta[..., t] + gamma * lam * run
        adv[..., t] = run
    return adv + values[..., :-1], adv


def raw_counterfactual_advantages(rewards, next_values, cf_rewards, cf_values, probs, gamma):
    """Factual one-step return minus the policy-weighted branch average.

    ``rewards``/``next_values``: (..., ); branch arrays and ``probs``:
    (..., N, A). Returns (..., N).
    """
    q_fact = np.asarray(rewards) + gamma * np.asarray(next_values)
    q_alt = np.asarray(cf_rewards) + gamma * np.asarray(cf_values)
    return q_fact[..., None] - (np.asarray(probs) * q_alt).sum(-1)


def normalize_across_agents(adv: np.ndarray, eps: float) -> np.ndarray:
    """Standardise along the last (agent) axis with the population std."""
    mu = adv.mean(-1, keepdims=True)
    sd = adv.std(-1, keepdims=True)
    return (adv - mu) / (sd + eps)


def counterfactual_advantages(batch: RolloutBatch, gamma: float, norm_eps: float) -> np.ndarray:
    if batch.values is None or batch.cf_values is None:
        raise ValueError("rollout batch has no critic values; run evaluate_values first")
    expected = batch.num_episodes * batch.horizon * batch.num_agents * NUM_ACTIONS
    if batch.cf_rewards.size != expected or batch.cf_values.size != expected:
        raise ValueError("rollout batch is missing counterfactual branch records")
    raw = raw_counterfactual_advantages(
        batch.rewards, batch.values[:, 1:], batch.cf_rewards, batch.cf_values,
        batch.probs_old, gamma,
    )
    return normalize_across_agents(raw, norm_eps)


def compute_advantages(batch: RolloutBatch, cfg: TrainConfig) -> None:
    batch.returns, batch.adv_shared = gae_returns(
        batch.rewards, batch.values, cfg.gamma, cfg.gae_lambda
    )
    batch.adv_cf = counterfactual_advantages(batch, cfg.gamma, cfg.norm_eps)


def agent_advantages(batch: RolloutBatch, cfg: TrainConfig) -> np.ndarray:
    """Per-(episode, time, agent) advantage used by the actor update."""
    if cfg.advantage_mode == "counterfactual":
        return batch.adv_cf
    a = batch.adv_shared
    a = (a - a.mean()) / (a.std() + cfg.norm_eps)
    return np.broadcast_to(a[..., None], batch.actions.shape)


# -- losses -------------------------------------------------------------------


def ppo_objective(logp_new: Tensor, actions: np.ndarray, logp_old_taken: np.ndarray,
                  adv: np.ndarray, clip_eps: float, entropy_coef: float):
    """Clipped surrogate loss; ``logp_new``: (..., A), the rest (...).

    Returns ``(loss, entropy, clip_fraction)`` with the latter two as floats.
    """
    onehot = np.eye(NUM_ACTIONS)[actions]
    logp_a = ad.sum_(logp_new * onehot, axis=-1)
    ratio = ad.exp(logp_a - logp_old_taken)
    surr = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    entropy = ad.mean(ad.neg(ad.sum_(ad.exp(logp_new) * logp_new, axis=-1)))
    loss = ad.neg(ad.mean(surr)) - ad.scale(entropy, entropy_coef)
    clipped = float(np.mean(np.abs(ratio.data - 1.0) > clip_eps))
    return loss, float(entropy.data), clipped


def actor_loss(batch: RolloutBatch, policy, clip_eps: float, entropy_coef: float,
               adv: np.ndarray, rows: np.ndarray | None = None):
    """PPO loss of ``policy`` on the batch (optionally a subset of flat states)."""
    n = batch.num_agents
    h, c = batch.flat_states()
    actions = batch.actions.reshape(-1, n)
    logp_old = batch.logp_old.reshape(-1, n, NUM_ACTIONS)
    adv = np.asarray(adv).reshape(-1, n)
    if rows is not None:
        h, c, actions, logp_old, adv = h[rows], c[rows], actions[rows], logp_old[rows], adv[rows]
    logp_new = policy.log_probs(batch.layout.batch(h, c))
    old_taken = np.take_along_axis(logp_old, actions[..., None], -1)[..., 0]
    return ppo_objective(logp_new, actions, old_taken, adv, clip_eps, entropy_coef)


def value_loss(pred: Tensor, target: np.ndarray, kind: ValueLoss = "huber",
               delta: float = 1.0) -> Tensor:
    r = pred - target
    if kind == "mse":
        return ad.mean(r * r)
    # c * (r - c/2) with c = clip(r): quadratic inside [-delta, delta], linear outside
    cl = ad.clip(r, -delta, delta)
    return ad.mean(cl * (r - ad.scale(cl, 0.5)))


def critic_loss(trainer: Trainer, batch: RolloutBatch, rows: np.ndarray | None = None) -> Tensor:
    h, c = batch.flat_states()
    target = trainer.value_norm.normalize(batch.returns.reshape(-1))
    if rows is not None:
        h, c, target = h[rows], c[rows], target[rows]
    pred = trainer.critic(trainer.critic_features(h, c), trainer.adj)
    return value_loss(pred, target, trainer.cfg.value_loss, trainer.cfg.huber_delta)


# -- updates ------------------------------------------------------------------


def _minibatches(num: int, size: int, rng: np.random.Generator):
    if size <= 0 or size >= num:
        yield None
        return
    perm = rng.permutation(num)
    for start in range(0, num, size):
        yield perm[start : start + size]


def update_actor(trainer: Trainer, batch: RolloutBatch, adv: np.ndarray,
                 rng: np.random.Generator) -> dict[str, float]:
    cfg = trainer.cfg
    losses, ents, clips = [], [], []
    num = batch.num_episodes * batch.horizon
    for _ in range(cfg.k_pi):
        for rows in _minibatches(num, cfg.minibatch, rng):
            loss, ent, clipped = actor_loss(batch, trainer.actor, cfg.clip_eps,
                                            cfg.entropy_coef, adv, rows)
            trainer.opt_actor.minimize(loss)
            losses.append(loss.item())
            ents.append(ent)
            clips.append(clipped)
    return {
        "actor_loss": float(np.mean(losses)),
        "entropy": float(np.mean(ents)),
        "mean_ratio_clip_fraction": float(np.mean(clips)),
    }


def update_critic(trainer: Trainer, batch: RolloutBatch, rng: np.random.Generator) -> float:
    losses = []
    num = batch.num_episodes * batch.horizon
    for _ in range(trainer.cfg.k_v):
        for rows in _minibatches(num, trainer.cfg.critic_minibatch, rng):
            loss = critic_loss(trainer, batch, rows)
            trainer.opt_critic.minimize(loss)
            losses.append(loss.item())
    return float(np.mean(losses))


def train_iteration(trainer: Trainer, streams: dict[str, np.random.Generator]):
    """One collect/estimate/update cycle; returns ``(metrics, batch)``."""
    batch = collect_rollouts(trainer, streams)
    return train_on_batch(trainer, batch, streams), batch


def train_on_batch(trainer: Trainer, batch: RolloutBatch,
                   streams: dict[str, np.random.Generator]) -> dict[str, float]:
    compute_advantages(batch, trainer.cfg)
    adv = agent_advantages(batch, trainer.cfg)
    stats = update_actor(trainer, batch, adv, streams["policy"])
    trainer.value_norm.update(batch.returns)
    stats["critic_loss"] = update_critic(trainer, batch, streams["policy"])
    stats["mean_episode_reward"] = float(batch.rewards.sum(axis=1).mean())
    stats["mean_control"] = float(batch.c.mean())
    stats["final_frac"] = float(batch.h[:, -1].mean())
    return stats


# -- driver -------------------------------------------------------------------


@dataclass
class TrainResult:
    trainer: Trainer
    metrics: list[dict]
    best_reward: float | None
    out_dir: Path | None

    @property
    def actor(self):
        return self.trainer.actor

    @property
    def critic(self):
        return self.trainer.critic


def _rng_states(streams: dict[str, np.random.Generator]) -> dict:
    return {k: g.bit_generator.state for k, g in streams.items()}


def _restore_rng(streams: dict[str, np.random.Generator], states: dict) -> None:
    for k, g in streams.items():
        g.bit_generator.state = states[k]


def _format_row(row: dict) -> list[str]:
    return [str(row["iter"])] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]]


class _MetricsWriter:
    def __init__(self, out_dir: Path, append: bool):
        self.csv_path = out_dir / "metrics.csv"
        self.jsonl_path = out_dir / "metrics.jsonl"
        self.timing_path = out_dir / "timing.csv"
        if not append:
            self.csv_path.write_text(",".join(METRIC_FIELDS) + "\n")
            self.jsonl_path.write_text("")
            self.timing_path.write_text("iter,wall_ms\n")

    def write(self, row: dict, wall_ms: float) -> None:
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(_format_row(row))
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps({k: row[k] for k in METRIC_FIELDS}) + "\n")
        with open(self.timing_path, "a") as fh:
            fh.write(f"{row['iter']},{wall_ms:.3f}\n")


def _dump_failure(out_dir: Path | None, batch: RolloutBatch | None, it: int, err: Exception) -> None:
    if out_dir is None:
        return
    arrays = batch.arrays() if batch is not None else {}
    np.savez(out_dir / f"numeric_failure_iter{it}.npz", **arrays)
    (out_dir / f"numeric_failure_iter{it}.txt").write_text(f"{type(err).__name__}: {err}\n")


def checkpoint_meta(trainer: Trainer, it: int, streams, best: float | None) -> dict:
    return {
        "iter": it,
        "model": trainer.model_cfg.to_dict(),
        "env": env_to_dict(trainer.env_cfg),
        "train": asdict(trainer.cfg),
        "graph": trainer.graph.to_edgelist(),
        "best_reward": best,
        "rng": _rng_states(streams),
    }


def env_to_dict(env_cfg: EnvConfig) -> dict:
    return asdict(env_cfg)


def train(
    graph: Graph,
    env_cfg: EnvConfig,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch (or from ``resume``) for ``cfg.iters`` iterations.

    With ``out_dir`` the run writes ``metrics.csv``/``metrics.jsonl`` (one
    row per iteration), ``timing.csv`` (wall time, kept apart so metrics
    are byte-reproducible), ``rng_state.json`` and checkpoints ``init``,
    ``iter_XXXX`` every ``checkpoint_every`` iterations, ``best`` and
    ``final``.
    """
    streams = seed_streams(cfg.seed)
    trainer = Trainer(graph, env_cfg, model_cfg, cfg, streams["init"])
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    start, best = 0, None
    if resume is not None:
        arrays, meta = ad.load_checkpoint(resume)
        trainer.load_state_arrays(arrays)
        _restore_rng(streams, meta["rng"])
        start, best = int(meta["iter"]), meta.get("best_reward")

    def save(name: str, it: int) -> None:
        if ckpt_dir is None:
            return
        meta = checkpoint_meta(trainer, it, streams, best)
        ad.save_checkpoint(ckpt_dir / f"{name}.ckpt", trainer.state_arrays(), meta)
        (out / "rng_state.json").write_text(json.dumps({"iter": it, "rng": meta["rng"]}))

    writer = _MetricsWriter(out, append=resume is not None) if out is not None else None
    if resume is None:
        save("init", 0)

    metrics: list[dict] = []
    for it in range(start + 1, cfg.iters + 1):
        t0 = time.perf_counter()
        batch = None
        try:
            batch = collect_rollouts(trainer, streams)
            stats = train_on_batch(trainer, batch, streams)
        except NumericError as err:
            _dump_failure(out, batch, it, err)
            raise
        row = {"iter": it, **stats}
        metrics.append(row)
        wall_ms = (time.perf_counter() - t0) * 1e3
        if writer is not None:
            writer.write(row, wall_ms)
        if progress is not None:
            progress({**row, "wall_ms": wall_ms})
        if best is None or row["mean_episode_reward"] > best:
            best = row["mean_episode_reward"]
            save("best", it)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save(f"iter_{it:04d}", it)
    save("final", max(cfg.iters, start))
    return TrainResult(trainer, metrics, best, out)


def load_policy(path: str | os.PathLike):
    """Rebuild ``(actor, critic, meta)`` from a training checkpoint."""
    arrays, meta = ad.load_checkpoint(path)
    if "model" not in meta:
        raise ValueError(f"{path}: checkpoint has no model manifest")
    model_cfg = ModelConfig(**meta["model"])
    actor, critic = build_models(model_cfg, np.random.default_rng(0))
    load_model_arrays(actor, critic, arrays)
    return actor, critic, meta
