"""Dense tensors with reverse-mode automatic differentiation.

A tensor produced by an operation on at least one ``requires_grad`` input
carries a :class:`Node` that records its inputs and the rule mapping the
output cotangent to input cotangents.  :class:`Graph` collects those nodes in
topological order starting from an output tensor and runs the backward pass
once; a second pass over any consumed node raises :class:`GraphStateError`.

Broadcasting is deliberately restricted: binary elementwise operations
accept operands of identical shape or a 0-d scalar, nothing else.  Row-vector
broadcasts have their own explicit ops (:func:`bias_add`, :func:`broadcast_rows`).
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DomainError, GraphStateError, NumericError, ShapeError

# Finite-value checking after each forward op.  Cheap next to conv2d, so on by default.
CHECK_FINITE = True


def set_debug(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        Graph(self).backward(seed)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """The operations reachable from ``output``, in execution order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.tensors = _toposort(output)

    @property
    def nodes(self) -> list:
        return [t._node for t in self.tensors]

    @property
    def consumed(self) -> bool:
        return any(n.consumed for n in self.nodes)

    def backward(self, seed=None) -> None:
        out = self.output
        if not out.requires_grad:
            raise GraphStateError("output does not depend on any requires_grad tensor")
        if self.consumed:
            raise GraphStateError("backward called on a consumed graph")
        if seed is None:
            if out.data.size != 1:
                raise ShapeError(
                    f"an explicit cotangent is required for non-scalar output {out.shape}")
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=out.dtype)
            if seed.shape != out.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {out.shape}")
        if out.is_leaf:
            _accumulate_leaf(out, seed)
            return
        pending = {id(out): seed}
        for t in reversed(self.tensors):
            node = t._node
            node.consumed = True
            g = pending.pop(id(t), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                else:
                    prev = pending.get(id(inp))
                    pending[id(inp)] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _toposort(output: Tensor) -> list:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        if t._node is None:
            continue
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t._node.inputs:
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(target, seed=None) -> None:
    """Run reverse mode from a :class:`Graph` or an output tensor."""
    graph = target if isinstance(target, Graph) else Graph(target)
    graph.backward(seed)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


# ----------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (_unscalar(g * b.data, a), _unscalar(g * a.data, b)))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _result(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), "relu", (a,),
                   lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result((x * cdf).astype(a.dtype, copy=False), "gelu", (a,), back)


_ELEMENTWISE = {"relu": relu, "gelu": gelu, "add": add, "mul": mul, "scale": scale}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ----------------------------------------------------------------------------- softmax & losses


def softmax(v, temperature: float = 1.0, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(v.data)):
        raise DomainError("softmax input contains non-finite values")
    z = v.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y / temperature,)

    return _result(y, "softmax", (v,), back)


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (v,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N, C) against integer ``labels``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError("label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), back)


# ----------------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched over an equal leading axis for 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), back)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}: {exc}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def bias_add(x, b) -> Tensor:
    """Add vector ``b`` along the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"bias_add: {x.shape} and {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, "bias_add", (x, b), lambda g: (g, g.sum(axis=lead)))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T (+ bias)`` with ``weight`` shaped (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else bias_add(y, bias)


def broadcast_rows(v, n: int) -> Tensor:
    """Stack ``n`` copies of vector ``v`` into an (n, d) matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got {v.shape}")
    return _result(np.broadcast_to(v.data, (n,) + v.shape).copy(), "broadcast_rows", (v,),
                   lambda g: (g.sum(axis=0),))


def take_rows(bank, index) -> Tensor:
    """Gather rows ``bank[index]``; repeated indices accumulate in backward."""
    bank = as_tensor(bank)
    index = np.asarray(index, dtype=np.int64)
    if bank.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got {bank.shape}")
    if index.size and (index.min() < 0 or index.max() >= bank.shape[0]):
        raise DomainError(f"row index out of range for bank with {bank.shape[0]} rows")

    def back(g):
        out = np.zeros_like(bank.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(bank.data[index], "take_rows", (bank,), back)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _result(np.asarray(a.data.sum()), "sum", (a,),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _result(np.asarray(a.data.mean()), "mean", (a,),
                   lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def select(a, index) -> Tensor:
    """Basic indexing ``a[index]`` with a scatter backward."""
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.asarray(a.data[index]), "select", (a,), back)


# ----------------------------------------------------------------------------- convolution & pooling


def gap(F) -> Tensor:
    """Spatial mean over the last two axes: (C, H, W) -> (C,), (N, C, H, W) -> (N, C)."""
    F = as_tensor(F)
    if F.ndim not in (3, 4) or F.shape[-1] < 1 or F.shape[-2] < 1:
        raise ShapeError(f"gap expects (C,H,W) or (N,C,H,W), got {F.shape}")
    hw = F.shape[-1] * F.shape[-2]
    return _result(F.data.mean(axis=(-2, -1)), "gap", (F,),
                   lambda g: (np.broadcast_to(g[..., None, None] / hw, F.shape).copy(),))


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with a (K, C, kh, kw) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise DomainError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, K)
    out = out.transpose(0, 3, 1, 2)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def back(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (K, C, kh, kw)
        if x.requires_grad:
            cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, "conv2d", inputs, back)
