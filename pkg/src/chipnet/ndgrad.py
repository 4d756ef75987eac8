"""A small dense-tensor engine with define-by-run reverse-mode autodiff.

Tensors store float32 (or float64 when asked) and every primitive computes in
float64 internally before casting back, so reductions accumulate in 64 bits.
Each primitive that touches a tensor requiring gradients records a node; the
nodes reachable from a scalar loss form the tape that :meth:`Tensor.backward`
walks once in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


@dataclass
class Node:
    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    consumed: bool = field(default=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def square(self):
        return mul(self, self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE), dtype=dtype or DEFAULT_DTYPE)


def _result_dtype(*tensors: Tensor):
    return np.result_type(*[t.data.dtype for t in tensors])


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def make_result(value: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str, dtype=None) -> Tensor:
    """Wrap a primitive's float64 result and record it on the tape if needed."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    dtype = dtype if dtype is not None else _result_dtype(*inputs)
    out = Tensor(value.astype(dtype, copy=False), dtype=dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(av + bv, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(av - bv, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return make_result(av * bv, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)

    return make_result(av / bv, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    return a, b


def unary(x: Tensor, value: np.ndarray, local_grad: np.ndarray, op: str) -> Tensor:
    """Elementwise primitive given its value and pointwise derivative."""

    def bw(g):
        return (g * local_grad,)

    return make_result(value, (x,), bw, op)


def exp(x: Tensor) -> Tensor:
    v = np.exp(_f64(x))
    return unary(x, v, v, "exp")


def tsum(x: Tensor, axis=None) -> Tensor:
    xv = _f64(x)
    value = xv.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(value), (x,), bw, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(_f64(x).reshape(shape), (x,), bw, "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""

    def bw(g):
        out = np.zeros(x.shape, dtype=np.float64)
        np.add.at(out, index, g)
        return (out,)

    return make_result(np.array(_f64(x)[index]), (x,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(np.concatenate([_f64(t) for t in tensors], axis=axis), tensors, bw, "concat")


def scatter_channels(x: Tensor, index: np.ndarray, width: int) -> Tensor:
    """Place the channels of ``x`` [N,C,...] at positions ``index`` of a zero tensor with ``width`` channels."""
    index = np.asarray(index, dtype=np.intp)
    if len(index) != x.shape[1]:
        raise ShapeError(f"scatter index has {len(index)} entries for {x.shape[1]} channels")
    out = np.zeros((x.shape[0], width) + x.shape[2:], dtype=np.float64)
    out[:, index] = _f64(x)

    def bw(g):
        return (g[:, index],)

    return make_result(out, (x,), bw, "scatter_channels")


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xv = _f64(x)
    return unary(x, np.maximum(xv, 0.0), (xv > 0).astype(np.float64), "relu")


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,k,k]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d input has {c} channels but weight expects {cw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(_f64(x), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wv = _f64(weight)
    # [N,Ho,Wo,O] -> [N,O,Ho,Wo]
    out = np.tensordot(cols, wv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wv, axes=([1], [0]))  # [N,Ho,Wo,C,k,k]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw

    return make_result(np.ascontiguousarray(out), (x, weight), bw, "conv2d")


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over an [N,C,H,W] tensor.

    In ``train`` mode the batch statistics normalize the input and the running
    statistics move toward them by ``momentum`` (unbiased variance, as usual);
    ``eval`` mode uses the running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or stats.mean.shape != (c,):
        raise ShapeError(f"batchnorm2d parameters do not match {c} channels")
    xv = _f64(x)
    gv = _f64(gamma)[None, :, None, None]
    bv = _f64(beta)[None, :, None, None]
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d in train mode needs at least 2 values per channel")
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
        stats.var[...] = (1 - momentum) * stats.var + momentum * var * m / (m - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]

        def bw(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gxhat = g * gv
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx, gg, gb

    elif mode == "eval":
        inv = 1.0 / np.sqrt(stats.var.astype(np.float64) + eps)
        xhat = (xv - stats.mean.astype(np.float64)[None, :, None, None]) * inv[None, :, None, None]

        def bw(g):
            return g * gv * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    return make_result(gv * xhat + bv, (x, gamma, beta), bw, "batchnorm2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear cannot combine input {x.shape} with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias {bias.shape} does not match {weight.shape[0]} outputs")
    xv, wv = _f64(x), _f64(weight)

    def bw(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return make_result(xv @ wv.T + _f64(bias), (x, weight, bias), bw, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    if n < 1 or labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = _f64(logits)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return make_result(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The recorded graph is consumed; calling this again on the same loss raises.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    if loss._node is not None and loss._node.consumed:
        raise RuntimeError("graph already consumed by a previous backward; re-run the forward pass")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None:
                g = g.astype(t.dtype)
                t.grad = g if t.grad is None else t.grad + g
            continue
        if node.consumed:
            raise RuntimeError(f"graph node {node.op} already consumed by a previous backward")
        if g is not None:
            for parent, pg in zip(node.inputs, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        node.consumed = True
        node.backward_fn = None
