"""Dense numpy tensors with an explicit reverse-mode tape.

Nothing is recorded unless a :class:`Graph` is active, so decoding code pays
only for the numpy kernels themselves::

    w = Tensor(np.ones((3, 3)), requires_grad=True)
    with Graph() as g:
        loss = (x @ w).sum()
    g.backward(loss)   # or loss.backward()
    w.grad
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "as_tensor",
    "set_checked",
    "matmul",
    "add",
    "mul",
    "concat",
    "take",
    "rms_norm",
    "softmax",
    "log_softmax",
    "silu",
    "rope",
    "cosine_similarity",
    "smooth_l1",
    "soft_cross_entropy",
    "COS_EPS",
]

COS_EPS = 1e-8

_local = threading.local()
_checked = False


def set_checked(flag: bool) -> None:
    """Raise ``FloatingPointError`` whenever a kernel produces a non-finite value."""
    global _checked
    _checked = bool(flag)


def _graph_stack() -> list:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = []
    return stack


def _active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._graph: Graph | None = None

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

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        if self._graph is None:
            raise RuntimeError("tensor was not produced inside a recording Graph")
        self._graph.backward(self)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Graph:
    """Ordered tape of executed kernels; supports one or more reverse passes."""

    def __init__(self) -> None:
        self.tape: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> Graph:
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def op_names(self) -> list[str]:
        return [entry[0] for entry in self.tape]

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {}
        for _, out, parents, fn in reversed(self.tape):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    owners[key] = p
        # whatever is left belongs to leaves
        for key, g in grads.items():
            leaf = owners.get(key)
            if leaf is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(name: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _checked and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {name}")
    out = Tensor(data)
    g = _active_graph()
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._graph = g
        g.tape.append((name, out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _const(b, a)
    data = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if np.isscalar(b):
        s = float(b)  # a numpy float64 scalar would promote float32 data

        def backward_s(g):
            return (g * s,)

        return _emit("scale", a.data * s, (a,), backward_s)
    b = _const(b, a)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", data, (a, b), backward)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * s

    def backward(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _emit("silu", data, (x,), backward)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy broadcasting on the rest."""
    a = as_tensor(a)
    b = _const(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # activations @ weight: one flat GEMM instead of a batched loop
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", data, (a, b), backward)
    data = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", data, (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", np.asarray(data), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", data, (x,), backward)


def take(x: Tensor, idx) -> Tensor:
    """Indexing (basic or integer-array); gradients scatter-add back."""
    data = x.data[idx]
    fancy = isinstance(idx, np.ndarray) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    ) or isinstance(idx, list)

    def backward(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _emit("take", np.array(data, copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", data, tuple(tensors), backward)


# ---------------------------------------------------------------- fused kernels


def rms_norm(x: Tensor, w: Tensor, eps: float) -> Tensor:
    """Row-wise ``x / sqrt(mean(x^2) + eps) * w`` over the last axis."""
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    w = _const(w, x)
    if w.shape != (x.shape[-1],):
        raise ValueError(f"rms_norm weight shape {w.shape} does not match last dim {x.shape[-1]}")
    r = 1.0 / np.sqrt(np.einsum("...i,...i->...", x.data, x.data)[..., None] / x.shape[-1] + eps)
    n = x.data * r
    data = n * w.data

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = (g * n).reshape(-1, n.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gn = g * w.data
            gx = r * (gn - n * np.mean(gn * n, axis=-1, keepdims=True))
        return gx, gw

    return _emit("rms_norm", data, (x, w), backward)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax(x: Tensor, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (boolean, broadcastable to ``x``) marks allowed entries; masked
    entries get probability exactly zero. Every row needs one allowed entry.
    """
    if temperature <= 0:
        raise ValueError("softmax temperature must be > 0 (use argmax for greedy)")
    x = as_tensor(x)
    z = x.data / temperature if temperature != 1.0 else x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    y = _softmax_np(z)

    def backward(g):
        gx = y * (g - np.sum(g * y, axis=-1, keepdims=True))
        if temperature != 1.0:
            gx = gx / temperature
        return (gx,)

    return _emit("softmax", y, (x,), backward)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = x.data - _logsumexp(x.data)

    def backward(g):
        return (g - np.exp(data) * np.sum(g, axis=-1, keepdims=True),)

    return _emit("log_softmax", data, (x,), backward)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding with the half-split convention; cos/sin broadcast to x."""
    data = x.data * cos + _rotate_half(x.data) * sin

    def backward(g):
        return (g * cos + _rotate_half_t(g * sin),)

    return _emit("rope", data, (x,), backward)


def cosine_similarity(q: Tensor, k: Tensor, eps: float = COS_EPS) -> Tensor:
    """``dot(q, k) / (|q| |k| + eps)`` over the last axis."""
    q = as_tensor(q)
    k = _const(k, q)
    if q.shape != k.shape:
        raise ValueError(f"cosine_similarity shape mismatch: {q.shape} vs {k.shape}")
    dot = np.sum(q.data * k.data, axis=-1)
    nq = np.sqrt(np.sum(q.data * q.data, axis=-1))
    nk = np.sqrt(np.sum(k.data * k.data, axis=-1))
    den = nq * nk + eps
    data = dot / den

    def backward(g):
        gq = gk = None
        coef = (g / den)[..., None]
        s2 = (g * dot / (den * den))[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            uq = np.where(nq[..., None] > 0, q.data / nq[..., None], 0.0)
            uk = np.where(nk[..., None] > 0, k.data / nk[..., None], 0.0)
        if q.requires_grad:
            gq = coef * k.data - s2 * nk[..., None] * uq
        if k.requires_grad:
            gk = coef * q.data - s2 * nq[..., None] * uk
        return gq, gk

    return _emit("cosine_similarity", data, (q, k), backward)


def _row_weights(weight, lead_shape: tuple, dtype) -> tuple[np.ndarray, float]:
    if weight is None:
        w = np.ones(lead_shape, dtype=dtype)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=dtype), lead_shape)
    return w, float(np.sum(w))


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0, weight=None) -> Tensor:
    """Mean Huber-style loss: ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - 0.5 beta`` outside.

    ``weight`` optionally weights rows (all axes but the last); the result is
    then the weighted mean of per-row means. All-zero weights give 0.
    """
    a = as_tensor(a)
    b = _const(b, a)
    if a.shape != b.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {a.shape} vs {b.shape}")
    if beta <= 0:
        raise ValueError("smooth_l1 beta must be positive")
    d = a.data - b.data
    ad = np.abs(d)
    inside = ad < beta
    elem = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta)
    w, wsum = _row_weights(weight, a.shape[:-1], a.dtype)
    scale = 1.0 / (wsum * a.shape[-1]) if wsum > 0 else 0.0
    data = np.asarray(np.sum(elem * w[..., None]) * scale, dtype=a.dtype)

    def backward(g):
        gd = g * scale * w[..., None] * np.where(inside, d / beta, np.sign(d))
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

    return _emit("smooth_l1", data, (a, b), backward)


def soft_cross_entropy(p_teacher, logits: Tensor, weight=None) -> Tensor:
    """Mean over rows of ``-sum_v p(v) log softmax(logits)(v)``.

    Teacher rows must be distributions (|sum - 1| <= 1e-6). ``weight`` weights
    rows as in :func:`smooth_l1`.
    """
    logits = as_tensor(logits)
    p = p_teacher.data if isinstance(p_teacher, Tensor) else np.asarray(p_teacher)
    if p.dtype.kind != "f":
        p = p.astype(np.float64)
    if p.shape != logits.shape:
        raise ValueError(f"soft_cross_entropy shape mismatch: {p.shape} vs {logits.shape}")
    psum = np.sum(p, axis=-1)
    if np.any(np.abs(psum - 1.0) > 1e-6) or np.any(p < 0):
        raise ValueError("teacher rows are not valid probability distributions")
    lse = _logsumexp(logits.data)
    row = lse[..., 0] * psum - np.sum(p * logits.data, axis=-1)
    w, wsum = _row_weights(weight, logits.shape[:-1], logits.dtype)
    scale = 1.0 / wsum if wsum > 0 else 0.0
    data = np.asarray(np.sum(row * w) * scale, dtype=logits.dtype)

    def backward(g):
        sm = np.exp(logits.data - lse)
        gl = g * scale * w[..., None] * (sm * psum[..., None] - p)
        return (None, gl.astype(logits.dtype, copy=False))

    parents = (p_teacher if isinstance(p_teacher, Tensor) else Tensor(p), logits)
    return _emit("soft_cross_entropy", data, parents, backward)
