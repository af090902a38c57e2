"""Graph-transformer actor and critic, plus the MLP ablation variants.

Actor inputs are batched by padding local subgraphs to power-of-two sizes
(buckets). Padding slots are excluded as attention keys and only attend to
themselves in GAT layers, so an agent's output does not depend on how its
observation was padded.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np

from stacca import autodiff as ad
from stacca.autodiff import Tensor
from stacca.env import (
    CRITIC_FEATURES,
    NUM_ACTIONS,
    OBS_FEATURES,
    LocalObservation,
    ObservationIndex,
)
from stacca.graph import Graph
from stacca.layers import MLP, AttentionPool, EncoderLayer, GATLayer, Module

Variant = Literal["stacca", "gat_only_critic", "mlp_critic", "mlp_actor"]
VARIANTS: tuple[str, ...] = ("stacca", "gat_only_critic", "mlp_critic", "mlp_actor")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_gat_layers: int = 2
    n_enc_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    actor_hidden: int = 64
    critic_hidden: int = 64
    variant: Variant = "stacca"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(
                f"model.d_model={self.d_model} must be divisible by model.n_heads={self.n_heads}"
            )
        for name in ("d_model", "d_ff", "actor_hidden", "critic_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if self.n_gat_layers < 0 or self.n_enc_layers < 0:
            raise ValueError("layer counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# -- observation batching -----------------------------------------------------


@dataclass
class ObsBucket:
    features: np.ndarray  # (S, b, M, 5)
    adj: np.ndarray  # (b, M, M) closed adjacency; padding slots self-only
    valid: np.ndarray  # (b, M)
    agents: np.ndarray  # (b,) column of each row in the flat agent axis


@dataclass
class ObsBatch:
    buckets: list[ObsBucket]
    num_states: int
    num_agents: int

    @classmethod
    def from_observations(cls, observations: Sequence[LocalObservation]) -> ObsBatch:
        """Batch arbitrary observations (possibly from different graphs) as
        a single state with ``len(observations)`` agents."""
        groups: dict[int, list[int]] = {}
        for k, obs in enumerate(observations):
            groups.setdefault(_bucket_size(obs.subgraph.num_nodes), []).append(k)
        buckets = []
        for size, members in sorted(groups.items()):
            feats = np.zeros((1, len(members), size, OBS_FEATURES))
            adj = np.zeros((len(members), size, size), dtype=bool)
            valid = np.zeros((len(members), size), dtype=bool)
            for row, k in enumerate(members):
                obs = observations[k]
                order = _ego_first(obs)
                n = len(order)
                feats[0, row, :n] = obs.features[order]
                valid[row, :n] = True
                adj[row] = _padded_adjacency(obs.subgraph, order, size)
            buckets.append(ObsBucket(feats, adj, valid, np.array(members, dtype=np.int64)))
        return cls(buckets, 1, len(observations))


def _bucket_size(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


def _ego_first(obs: LocalObservation) -> np.ndarray:
    n = obs.subgraph.num_nodes
    rest = [k for k in range(n) if k != obs.ego_local]
    return np.array([obs.ego_local] + rest, dtype=np.int64)


def _padded_adjacency(sub: Graph, order: np.ndarray, size: int) -> np.ndarray:
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(len(order))
    adj = np.eye(size, dtype=bool)
    for i, j in sub.edges:
        adj[pos[i], pos[j]] = adj[pos[j], pos[i]] = True
    return adj


class ObsLayout:
    """Pre-bucketed observation structure for every agent of one graph."""

    def __init__(self, index: ObservationIndex):
        self.index = index
        self.num_agents = index.graph.num_nodes
        groups: dict[int, list[int]] = {}
        for i, n in enumerate(index.sizes):
            groups.setdefault(_bucket_size(int(n)), []).append(i)
        self._buckets = []
        for size, members in sorted(groups.items()):
            b = len(members)
            node_map = np.zeros((b, size), dtype=np.int64)
            valid = np.zeros((b, size), dtype=bool)
            static = np.zeros((b, size, OBS_FEATURES))
            adj = np.zeros((b, size, size), dtype=bool)
            for row, i in enumerate(members):
                nm = index.node_maps[i]
                n = len(nm)
                node_map[row, :n] = nm
                valid[row, :n] = True
                static[row, :n] = index.static_features(i)
                adj[row] = _padded_adjacency(index.subgraphs[i], np.arange(n), size)
            self._buckets.append(
                (node_map, valid, static, adj, np.array(members, dtype=np.int64))
            )

    def batch(self, h: np.ndarray, c: np.ndarray) -> ObsBatch:
        """Observations of all agents for ``S`` global states ``h, c: (S, N)``."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        s = h.shape[0]
        buckets = []
        for node_map, valid, static, adj, agents in self._buckets:
            feats = np.broadcast_to(static, (s,) + static.shape).copy()
            feats[..., 1] = h[:, node_map] * valid
            feats[..., 2] = c[:, node_map] * valid
            buckets.append(ObsBucket(feats, adj, valid, agents))
        return ObsBatch(buckets, s, self.num_agents)


# -- trunks -------------------------------------------------------------------


class GraphTransformer(Module):
    """Embedding MLP -> GAT stack -> transformer encoder stack."""

    def __init__(self, in_dim: int, cfg: ModelConfig, rng: np.random.Generator, n_enc: int):
        d = cfg.d_model
        self.embed = MLP([in_dim, d, d], rng)
        self.gat = []
        for k in range(cfg.n_gat_layers):
            last = k == cfg.n_gat_layers - 1
            if last:
                self.gat.append(GATLayer(d, d, cfg.n_heads, rng, merge="average", final=True))
            else:
                self.gat.append(GATLayer(d, d // cfg.n_heads, cfg.n_heads, rng, merge="concat"))
        self.enc = [EncoderLayer(d, cfg.n_heads, cfg.d_ff, rng) for _ in range(n_enc)]

    def encode(self, x, adj: np.ndarray, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.embed(x)
        for layer in self.gat:
            h = layer(h, adj)
        for layer in self.enc:
            h = layer(h, key_mask)
        return h


# -- actor --------------------------------------------------------------------


class PolicyModel(GraphTransformer):
    """Shared decentralised actor: ego row of the trunk output -> 3 logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(OBS_FEATURES, cfg, rng, cfg.n_enc_layers)
        # zero output layer: training starts from the uniform policy
        self.policy_head = MLP([cfg.d_model, cfg.actor_hidden, NUM_ACTIONS], rng, zero_last=True)

    def bucket_logits(self, bucket: ObsBucket) -> Tensor:
        h = self.encode(bucket.features, bucket.adj, bucket.valid)
        ego = ad.index(h, (Ellipsis, 0, slice(None)))  # (S, b, d)
        return self.policy_head(ego)

    def log_probs(self, batch: ObsBatch) -> Tensor:
        """Log-probabilities of shape ``(S, num_agents, 3)``."""
        parts = [self.bucket_logits(b) for b in batch.buckets]
        order = np.concatenate([b.agents for b in batch.buckets])
        logits = ad.concat(parts, axis=1)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        if not np.array_equal(inv, np.arange(len(order))):
            logits = ad.take(logits, inv, axis=1)
        return ad.log_softmax(logits, axis=-1)


class MlpPolicyModel(Module):
    """Ablation actor on the size-invariant summary ``ego || mean(nbrs) || max(nbrs)``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.policy_head = MLP(
            [3 * OBS_FEATURES, cfg.actor_hidden, cfg.actor_hidden, NUM_ACTIONS], rng,
            zero_last=True,
        )

    @staticmethod
    def summary(bucket: ObsBucket) -> np.ndarray:
        f = bucket.features
        nbr = bucket.valid.copy()
        nbr[:, 0] = False
        cnt = nbr.sum(-1)[:, None]  # (b, 1)
        m = nbr[..., None]
        mean = (f * m).sum(-2) / np.maximum(cnt, 1)
        mx = np.where(m, f, -np.inf).max(-2)
        mx = np.where(cnt > 0, mx, 0.0)
        return np.concatenate([f[..., 0, :], mean, mx], axis=-1)

    def log_probs(self, batch: ObsBatch) -> Tensor:
        parts = [self.policy_head(self.summary(b)) for b in batch.buckets]
        order = np.concatenate([b.agents for b in batch.buckets])
        logits = ad.concat(parts, axis=1)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        if not np.array_equal(inv, np.arange(len(order))):
            logits = ad.take(logits, inv, axis=1)
        return ad.log_softmax(logits, axis=-1)


def actor_forward(model, obs: LocalObservation) -> np.ndarray:
    """Action log-probabilities (length 3) for a single observation."""
    with ad.no_grad():
        return model.log_probs(ObsBatch.from_observations([obs])).data[0, 0]


def sample_actions(
    logp: np.ndarray, rng: np.random.Generator, deterministic: bool = False
) -> np.ndarray:
    """Categorical draw per row (inverse CDF); argmax, lowest index on ties,
    when deterministic."""
    if deterministic:
        return np.argmax(logp, axis=-1)
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(logp.shape[:-1])
    return np.minimum((u[..., None] >= cdf).sum(-1), NUM_ACTIONS - 1)


def act(model, obs: LocalObservation, rng: np.random.Generator, deterministic: bool = False):
    logp = actor_forward(model, obs)
    a = int(sample_actions(logp, rng, deterministic))
    return a, float(logp[a])


# -- critic -------------------------------------------------------------------


class ValueModel(GraphTransformer):
    """Centralised critic: trunk over all nodes -> attention pool -> scalar."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        n_enc = 0 if cfg.variant == "gat_only_critic" else cfg.n_enc_layers
        super().__init__(CRITIC_FEATURES, cfg, rng, n_enc)
        self.pool = AttentionPool(cfg.d_model, cfg.critic_hidden, rng)
        self.value_head = MLP([cfg.d_model, cfg.critic_hidden, 1], rng)

    def node_embeddings(self, features, adj: np.ndarray) -> Tensor:
        return self.encode(features, adj)

    def __call__(self, features, adj: np.ndarray) -> Tensor:
        """``features``: (..., N, 3) -> values (...,)."""
        pooled = self.pool(self.encode(features, adj))
        v = self.value_head(pooled)
        return ad.reshape(v, v.shape[:-1])


class MlpValueModel(Module):
    """Ablation critic: mean of embedded node features -> MLP (no structure)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = MLP([CRITIC_FEATURES, cfg.d_model, cfg.d_model], rng)
        self.value_head = MLP([cfg.d_model, cfg.critic_hidden, cfg.critic_hidden, 1], rng)

    def __call__(self, features, adj: np.ndarray | None = None) -> Tensor:
        pooled = ad.mean(self.embed(features), axis=-2)
        v = self.value_head(pooled)
        return ad.reshape(v, v.shape[:-1])


def critic_forward(model, graph: Graph, features: np.ndarray) -> float:
    if features.ndim != 2 or features.shape != (graph.num_nodes, CRITIC_FEATURES):
        raise ValueError(
            f"critic features must be ({graph.num_nodes}, {CRITIC_FEATURES}), got {features.shape}"
        )
    with ad.no_grad():
        return float(model(features[None], graph.closed_adjacency_mask()).data[0])


def critic_values(model, adj: np.ndarray, features: np.ndarray, chunk: int = 128) -> np.ndarray:
    """No-grad critic on a batch ``(B, N, 3)`` in chunks."""
    out = np.empty(features.shape[0])
    with ad.no_grad():
        for start in range(0, features.shape[0], chunk):
            out[start : start + chunk] = model(features[start : start + chunk], adj).data
    return out


def build_models(cfg: ModelConfig, rng: np.random.Generator):
    """Fresh ``(actor, critic)`` for ``cfg.variant``."""
    cfg.validate()
    actor = MlpPolicyModel(cfg, rng) if cfg.variant == "mlp_actor" else PolicyModel(cfg, rng)
    critic = MlpValueModel(cfg, rng) if cfg.variant == "mlp_critic" else ValueModel(cfg, rng)
    return actor, critic


def model_arrays(actor: Module, critic: Module) -> dict[str, np.ndarray]:
    return {**actor.state_dict("actor"), **critic.state_dict("critic")}


def load_model_arrays(actor: Module, critic: Module | None, arrays: dict[str, np.ndarray]) -> None:
    actor.load_state_dict(arrays, "actor")
    if critic is not None:
        critic.load_state_dict(arrays, "critic")
