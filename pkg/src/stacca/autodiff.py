"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Node ids come from a
global counter, so creation order is a valid topological order and
:func:`backward` simply walks the reachable nodes in reverse id order.

Broadcasting follows numpy: a lower-rank operand repeats along leading axes.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


class NumericError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (rollouts, evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    # a single reduction is cheaper than isfinite(); a NaN/Inf anywhere poisons the sum
    if not np.isfinite(data.sum()):
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "parents", "backward_fn", "name")

    def __init__(
        self,
        data,
        parents: tuple[Tensor, ...] = (),
        backward_fn: Callable | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.node_id = next(_node_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # make ``ndarray <op> Tensor`` defer to the reflected Tensor method
    __array_ufunc__ = None

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: index(self, idx)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Gradient-free copy of ``x`` (stop-gradient)."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, parents, fn, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(
        np.where(pos, a.data, slope * a.data),
        (a,),
        lambda g: (np.where(pos, g, slope * g),),
        "leaky_relu",
    )


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg_part = np.expm1(np.minimum(a.data, 0.0))
    if alpha != 1.0:
        neg_part *= alpha
    out = neg_part + np.maximum(a.data, 0.0)
    return _make(
        out,
        (a,),
        lambda g: (np.where(a.data > 0, g, g * (neg_part + alpha)),),
        "elu",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        ),
        "minimum",
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(
        np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),), "clip"
    )


# -- linear algebra & shape ---------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight: one flat GEMM instead of a batched loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def fn_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), fn_flat, "matmul")

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), fn, "matmul")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.swapaxes(a.data, ax1, ax2),
        (a,),
        lambda g: (np.swapaxes(g, ax1, ax2),),
        "swapaxes",
    )


def index(a, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = as_tensor(a)

    def fn(g):
        out = np.zeros(a.shape)
        out[idx] += g
        return (out,)

    return _make(np.array(a.data[idx]), (a,), fn, "index")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; backward scatters (accumulating duplicates)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise IndexError(f"gather index out of range for axis of length {n}")

    def fn(g):
        out = np.zeros(a.shape)
        out_m = np.moveaxis(out, axis, 0)
        np.add.at(out_m, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (out,)

    if indices.ndim != 1:
        if axis != 0:
            raise ValueError("multi-dimensional indices only supported on axis 0")
    return _make(np.take(a.data, indices, axis=axis), (a,), fn, "take")


def gather_rows(a, indices) -> Tensor:
    return take(a, indices, axis=0)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), fn, "concat")


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    out, start = [], 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        out.append(index(a, tuple(sl)))
        start += size
    return out


# -- reductions ---------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return _make(
        np.mean(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims) / count,),
        "mean",
    )


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first argmax."""
    a = as_tensor(a)
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def fn(g):
        grad = np.zeros(a.shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, arg, gk, axis=axis)
        return (grad,)

    return _make(out, (a,), fn, "max")


def softmax(x, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        full = np.broadcast_to(mask, z.shape)
        if not full.any(axis=axis).all():
            raise ValueError("softmax row is fully masked")
        z = np.where(full, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), fn, "softmax")


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    return softmax(x, mask, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


# -- backward -----------------------------------------------------------------


def _tape(root: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from ``root`` in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if not t.requires_grad or t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(t.parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a dict keyed by ``node_id`` holding the gradient of every leaf
    reachable from ``loss``; any ``params`` that are unreachable map to zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node_id] = np.ones(loss.shape)
        for node in reversed(_tape(loss)):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.backward_fn is None:
                leaves[node.node_id] = g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = np.array(pg, dtype=np.float64)
    if params is not None:
        for p in params:
            leaves.setdefault(p.node_id, np.zeros(p.shape))
    return leaves


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``, in order."""
    store = backward(loss, params)
    return [store[p.node_id] for p in params]


# -- optimiser ----------------------------------------------------------------


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    moments: tuple[list[np.ndarray], list[np.ndarray]],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_adam: float = 1e-8,
    t: int = 1,
) -> tuple[list[np.ndarray], tuple[list[np.ndarray], list[np.ndarray]]]:
    """One bias-corrected Adam update; ``t`` is the 1-based step count."""
    m_list, v_list = moments
    new_p, new_m, new_v = [], [], []
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, m_list, v_list):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps_adam))
        new_m.append(m)
        new_v.append(v)
    return new_p, (new_m, new_v)


class Adam:
    """Stateful wrapper that updates ``Parameter.data`` in place."""

    def __init__(self, params: Sequence[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        new_p, (self.m, self.v) = adam_step(
            [p.data for p in self.params],
            grads,
            (self.m, self.v),
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.t,
        )
        for p, d in zip(self.params, new_p):
            p.data = d

    def minimize(self, loss: Tensor) -> None:
        self.step(grad(loss, self.params))

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array([float(self.t)])}
        for k, p in enumerate(self.params):
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}/t"][0])
        self.m = [arrays[f"{prefix}/m/{k}"].copy() for k in range(len(self.params))]
        self.v = [arrays[f"{prefix}/v/{k}"].copy() for k in range(len(self.params))]


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"STACCAPK"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None
) -> None:
    """Write named float64 arrays in a small versioned binary container.

    Layout (little endian): magic, u32 version, u32 meta length, meta JSON,
    u32 entry count, then per entry: u32 name length, name, u32 ndim,
    ndim x u64 shape, row-major f64 data. Entries are written in sorted
    name order so equal contents give equal bytes.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return arrays, meta
