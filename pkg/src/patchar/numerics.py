"""Dense-array numerics with reverse-mode differentiation.

A deliberately small tape-based autodiff over numpy arrays, plus the
transformer pieces the model needs: RMSNorm, rotary embeddings, masked
attention and a Pre-Norm block with an optional key/value cache.

Every op checks its output for NaN/Inf and raises ``FloatingPointError``.
Matrix products report ``2*M*K*N`` to an active :func:`count_flops` scope,
which is what the FLOPs formulas are checked against.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
RMS_EPS = 1e-6
ROPE_BASE = 10000.0

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_flop_counter: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar(
    "flop_counter", default=None
)


@dataclass
class FlopCounter:
    total: int = 0
    calls: list = field(default_factory=list)

    def add(self, m: int, k: int, n: int, batch: int) -> None:
        flops = 2 * m * k * n * batch
        self.total += flops
        self.calls.append((batch, m, k, n, flops))


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Count matmul FLOPs (2*M*K*N each) executed inside the block."""
    counter = FlopCounter()
    token = _flop_counter.set(counter)
    try:
        yield counter
    finally:
        _flop_counter.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """An array node in the autodiff tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor(data)
        if _grad_enabled.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self
        return Tensor._make(
            a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow"
        )

    def __matmul__(self, other):
        return matmul(self, as_tensor(other, self.dtype))

    def __getitem__(self, idx):
        a = self
        fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            out = np.zeros_like(a.data)
            if fancy:
                np.add.at(out, idx, g)
            else:
                out[idx] = g
            return (out,)

        return Tensor._make(a.data[idx], (a,), back, "getitem")

    # -- shape ---------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        a = self
        return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, i: int, j: int):
        a = self
        return Tensor._make(
            np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes"
        )

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise ---------------------------------------------------------
    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        a = self
        out = _sigmoid(a.data)
        return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def silu(self):
        a = self
        s = _sigmoid(a.data)
        return Tensor._make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")

    def softmax(self, axis: int = -1, mask: np.ndarray | None = None):
        """Softmax along ``axis``; positions where ``mask`` is False get weight 0."""
        a = self
        x = a.data
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        x = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(x)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (a,), back, "softmax")

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Parameter(Tensor):
    """A trainable leaf; ``grad`` always has the value's shape."""

    def __init__(self, data, name: str | None = None, dtype=DEFAULT_DTYPE):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# -- free-function ops --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(…, M, K) @ (…, K, N) with broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    counter = _flop_counter.get()
    if counter is not None:
        m, k = a.shape[-2:]
        n = b.shape[-1]
        counter.add(m, k, n, int(np.prod(out.shape[:-2], dtype=np.int64)))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return Tensor._make(out, (a, b), back, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat"
    )


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Row-wise ``x / sqrt(mean(x^2) + eps) * gain`` over the last axis."""
    if x.shape[-1] == 0:
        raise ValueError("rmsnorm needs a non-empty feature axis")
    xd = x.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r
    out = xhat * gain.data

    def back(g):
        gx = g * gain.data
        dx = r * (gx - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
        dg = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0).reshape(gain.shape)
        return (dx, dg)

    return Tensor._make(out, (x, gain), back, "rmsnorm")


def rope_angles(positions, dim: int, base: float = ROPE_BASE) -> tuple[np.ndarray, np.ndarray]:
    if dim % 2:
        raise ValueError(f"rotary embedding needs an even feature size, got {dim}")
    pos = np.asarray(positions, dtype=DEFAULT_DTYPE)
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=DEFAULT_DTYPE) / dim)
    ang = pos[..., None] * inv_freq
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions, base: float = ROPE_BASE) -> Tensor:
    """Rotate adjacent channel pairs (2i, 2i+1) by ``position * base**(-2i/C)``.

    ``positions`` runs along axis -2 of ``x``.
    """
    c = x.shape[-1]
    cos, sin = rope_angles(positions, c, base)
    if cos.shape[0] != x.shape[-2]:
        raise ValueError("positions length must match the sequence axis")
    cos = cos.astype(x.dtype)
    sin = sin.astype(x.dtype)

    def rotate(d, s):
        even, odd = d[..., 0::2], d[..., 1::2]
        out = np.empty_like(d)
        out[..., 0::2] = even * cos - odd * s
        out[..., 1::2] = even * s + odd * cos
        return out

    return Tensor._make(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),), "rope")


@dataclass(frozen=True)
class AttentionMask:
    kind: str
    length: int

    def __post_init__(self):
        if self.kind not in ("causal", "bidirectional"):
            raise ValueError(f"unknown mask kind {self.kind!r}")

    def matrix(self, n_queries: int | None = None, offset: int = 0) -> np.ndarray:
        """Boolean (queries, keys) visibility; query i sits at absolute position ``offset + i``."""
        tq = self.length - offset if n_queries is None else n_queries
        if self.kind == "bidirectional":
            return np.ones((tq, self.length), dtype=bool)
        q = np.arange(tq)[:, None] + offset
        k = np.arange(self.length)[None, :]
        return k <= q


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: AttentionMask | str = "bidirectional",
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """softmax(q k^T / sqrt(C) + mask) v over the last two axes.

    ``key_mask`` (broadcastable to (..., Tk)) hides padded keys. When keys
    outnumber queries the queries are taken to be the trailing positions.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    tq, tk = q.shape[-2], k.shape[-2]
    if isinstance(mask, str):
        mask = AttentionMask(mask, tk)
    visible = mask.matrix(tq, offset=tk - tq)
    if key_mask is not None:
        visible = visible & np.asarray(key_mask, dtype=bool)[..., None, :]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = scores.softmax(axis=-1, mask=visible)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy, optionally weighted (weights also normalise the mean)."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=x.dtype)
    denom = max(w.sum(), 1.0)
    per = np.logaddexp(0.0, x) - x * y
    out = np.array((per * w).sum() / denom)

    def back(g):
        return (g * (_sigmoid(x) - y) * w / denom,)

    return Tensor._make(out, (logits,), back, "bce")


# -- modules -------------------------------------------------------------------

class Module:
    """Minimal parameter container: walks attributes for Parameters and Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0, dtype=DEFAULT_DTYPE):
        std = scale / math.sqrt(n_in)
        self.weight = Parameter(rng.normal(0.0, std, (n_in, n_out)), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight)


class RMSNorm(Module):
    def __init__(self, dim: int, dtype=DEFAULT_DTYPE):
        self.gain = Parameter(np.ones(dim), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return rmsnorm(x, self.gain)


@dataclass
class KVCache:
    """Per-layer rotated keys and values for incremental causal decoding."""

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[-2]


class TransformerBlock(Module):
    """Pre-Norm block: x + Attn(norm(x)), then x + FFN(norm(x))."""

    def __init__(self, dim: int, ffn_dim: int, n_heads: int, rng: np.random.Generator, n_layers: int = 1, dtype=DEFAULT_DTYPE):
        if dim % n_heads or (dim // n_heads) % 2:
            raise ValueError("head size must divide the width and be even")
        self.dim, self.n_heads = dim, n_heads
        out_scale = 1.0 / math.sqrt(2 * n_layers)
        self.attn_norm = RMSNorm(dim, dtype)
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, scale=out_scale, dtype=dtype)
        self.ffn_norm = RMSNorm(dim, dtype)
        self.fc1 = Linear(dim, ffn_dim, rng, dtype=dtype)
        self.fc2 = Linear(ffn_dim, dim, rng, scale=out_scale, dtype=dtype)

    def _heads(self, x: Tensor) -> Tensor:
        *lead, t, _ = x.shape
        return x.reshape(*lead, t, self.n_heads, self.dim // self.n_heads).swapaxes(-2, -3)

    def __call__(self, x, positions, mask_kind="bidirectional", key_mask=None, cache: KVCache | None = None, layer: int = 0):
        *lead, t, c = x.shape
        qkv = self.qkv(self.attn_norm(x))
        q = rope_apply(self._heads(qkv[..., :c]), positions)
        k = rope_apply(self._heads(qkv[..., c : 2 * c]), positions)
        v = self._heads(qkv[..., 2 * c :])
        if cache is not None:
            if layer < len(cache.keys):
                k = concat([cache.keys[layer], k], axis=-2)
                v = concat([cache.values[layer], v], axis=-2)
                cache.keys[layer], cache.values[layer] = k, v
            else:
                cache.keys.append(k)
                cache.values.append(v)
        km = None if key_mask is None else np.asarray(key_mask)[..., None, :]
        a = attention(q, k, v, AttentionMask(mask_kind, k.shape[-2]), key_mask=km)
        a = a.swapaxes(-2, -3).reshape(*lead, t, c)
        x = x + self.proj(a)
        return x + self.fc2(self.fc1(self.ffn_norm(x)).silu())


class Transformer(Module):
    """A stack of Pre-Norm blocks with a final RMSNorm."""

    def __init__(self, n_layers: int, dim: int, ffn_dim: int, n_heads: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.blocks = [TransformerBlock(dim, ffn_dim, n_heads, rng, n_layers, dtype) for _ in range(n_layers)]
        self.norm = RMSNorm(dim, dtype)

    def __call__(self, x: Tensor, mask_kind: str = "bidirectional", key_mask=None, cache: KVCache | None = None) -> Tensor:
        start = 0 if cache is None else cache.length
        positions = np.arange(start, start + x.shape[-2])
        for i, block in enumerate(self.blocks):
            x = block(x, positions, mask_kind, key_mask, cache, i)
        return self.norm(x)


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
