"""Graph attention, multi-head self-attention, encoder blocks, attentional
pooling and MLPs on top of :mod:`stacca.autodiff`.

All layers accept arbitrary leading batch axes: node/token matrices are
``(..., n, d)`` and masks broadcast against the ``(..., heads, n, n)``
score tensors.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from stacca import autodiff as ad
from stacca.autodiff import Parameter, Tensor

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5


class Module:
    """Container that discovers Parameters and sub-Modules by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}/{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{k}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters(prefix)}

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.named_parameters(prefix):
            if k not in arrays:
                raise KeyError(f"checkpoint is missing parameter {k!r}")
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        w = np.zeros((in_dim, out_dim)) if zero else fan_in_uniform(rng, (in_dim, out_dim), in_dim)
        self.W = Parameter(w)
        self.b = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class MLP(Module):
    """Affine layers with ELU in between; the last layer stays affine."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, zero_last: bool = False):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[k], sizes[k + 1], rng, zero=zero_last and k == n - 1)
            for k in range(n)
        ]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = ad.elu(x)
        return x


def mlp_forward(params: MLP, x) -> Tensor:
    return params(x)


class GATLayer(Module):
    """Graph attention over closed neighbourhoods (self-loops included).

    Head ``k`` owns columns ``k*out_dim:(k+1)*out_dim`` of ``W`` and row
    ``k`` of ``a_src``/``a_dst`` (the two halves of its attention vector).
    ``merge="concat"`` gives ``heads * out_dim`` features, ``"average"``
    gives ``out_dim``. ELU is applied after merging unless ``final``.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, rng: np.random.Generator,
                 merge: str = "concat", final: bool = False):
        if heads < 1:
            raise ValueError("GAT needs at least one head")
        if merge not in ("concat", "average"):
            raise ValueError(f"unknown head merge {merge!r}")
        self.heads, self.out_dim, self.merge, self.final = heads, out_dim, merge, final
        self.W = Parameter(fan_in_uniform(rng, (in_dim, heads * out_dim), in_dim))
        self.a_src = Parameter(fan_in_uniform(rng, (heads, 1, out_dim), 2 * out_dim))
        self.a_dst = Parameter(fan_in_uniform(rng, (heads, 1, out_dim), 2 * out_dim))

    @property
    def output_dim(self) -> int:
        return self.heads * self.out_dim if self.merge == "concat" else self.out_dim

    def __call__(self, h, adj_mask: np.ndarray) -> Tensor:
        """``h``: (..., n, in_dim); ``adj_mask``: boolean (..., n, n) closed adjacency."""
        h = ad.as_tensor(h)
        wh = ad.matmul(h, self.W)  # (..., n, H*out)
        wh = ad.reshape(wh, wh.shape[:-1] + (self.heads, self.out_dim))
        wh = ad.swapaxes(wh, -3, -2)  # (..., H, n, out)
        src = ad.sum_(wh * self.a_src, axis=-1, keepdims=True)  # (..., H, n, 1)
        dst = ad.sum_(wh * self.a_dst, axis=-1, keepdims=True)
        scores = ad.leaky_relu(src + ad.swapaxes(dst, -1, -2), LEAKY_SLOPE)
        alpha = ad.softmax(scores, np.expand_dims(adj_mask, -3))
        out = ad.matmul(alpha, wh)  # (..., H, n, out)
        if self.merge == "concat":
            out = ad.swapaxes(out, -3, -2)  # (..., n, H, out)
            out = ad.reshape(out, out.shape[:-2] + (self.heads * self.out_dim,))
        else:
            out = ad.mean(out, axis=-3)
        return out if self.final else ad.elu(out)


def gat_forward(params: GATLayer, H, graph) -> Tensor:
    return params(H, graph.closed_adjacency_mask())


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention; head ``k`` uses columns
    ``k*d_k:(k+1)*d_k`` of ``W_Q``, ``W_K`` and ``W_V``."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads, self.d_k = heads, d_model // heads
        self.W_Q = Parameter(fan_in_uniform(rng, (d_model, d_model), d_model))
        self.W_K = Parameter(fan_in_uniform(rng, (d_model, d_model), d_model))
        self.W_V = Parameter(fan_in_uniform(rng, (d_model, d_model), d_model))
        self.W_O = Parameter(fan_in_uniform(rng, (d_model, d_model), d_model))

    def _split(self, x: Tensor) -> Tensor:
        x = ad.reshape(x, x.shape[:-1] + (self.heads, self.d_k))
        return ad.swapaxes(x, -3, -2)  # (..., H, n, d_k)

    def attention_weights(self, x, key_mask: np.ndarray | None = None) -> Tensor:
        x = ad.as_tensor(x)
        q = self._split(ad.matmul(x, self.W_Q))
        k = self._split(ad.matmul(x, self.W_K))
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.d_k))
        mask = None
        if key_mask is not None:
            # (..., n) -> (..., 1, 1, n): every query sees the valid keys
            mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        return ad.softmax(scores, mask)

    def __call__(self, x, key_mask: np.ndarray | None = None) -> Tensor:
        x = ad.as_tensor(x)
        v = self._split(ad.matmul(x, self.W_V))
        heads = ad.matmul(self.attention_weights(x, key_mask), v)
        heads = ad.swapaxes(heads, -3, -2)  # (..., n, H, d_k)
        cat = ad.reshape(heads, heads.shape[:-2] + (self.heads * self.d_k,))
        return ad.matmul(cat, self.W_O)


def mhsa_forward(params: MultiHeadSelfAttention, X, mask=None) -> Tensor:
    return params(X, mask)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.scale = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        mu = ad.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = ad.mean(xc * xc, axis=-1, keepdims=True)
        return xc / ad.sqrt(var + NORM_EPS) * self.scale + self.shift


class EncoderLayer(Module):
    """Post-norm transformer block: ``norm2(Z + FFN(Z))``, ``Z = norm1(X + MHSA(X))``."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.mhsa = MultiHeadSelfAttention(d_model, heads, rng)
        self.ffn = MLP([d_model, d_ff, d_model], rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)

    def __call__(self, x, key_mask: np.ndarray | None = None) -> Tensor:
        z = self.norm1(x + self.mhsa(x, key_mask))
        return self.norm2(z + self.ffn(z))


def encoder_layer_forward(params: EncoderLayer, X, mask=None) -> Tensor:
    return params(X, mask)


class AttentionPool(Module):
    """Softmax-gated weighted average over the node axis (-2)."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        # zero final layer: initial pooling is a plain mean
        self.gate = MLP([d_model, hidden, 1], rng, zero_last=True)

    def weights(self, h) -> Tensor:
        h = ad.as_tensor(h)
        if h.shape[-2] == 0:
            raise ValueError("attention pooling over an empty node set")
        scores = self.gate(h)  # (..., n, 1)
        return ad.softmax(scores, axis=-2)

    def __call__(self, h) -> Tensor:
        h = ad.as_tensor(h)
        w = self.weights(h)
        return ad.sum_(w * h, axis=-2)


def attn_pool(params: AttentionPool, H) -> Tensor:
    return params(H)
