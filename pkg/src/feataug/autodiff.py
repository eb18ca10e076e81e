"""Dense tensors with reverse-mode differentiation.

Every operation builds a node on a per-step tape: the output tensor keeps
references to its inputs and a closure mapping the output gradient to input
gradients.  ``backward`` walks the tape in reverse topological order.  The
graph is dropped with the last reference to the loss.

Tensors are treated as immutable: operations never write into ``data``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

_DTYPE: type = np.float32


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def get_dtype() -> type:
    return _DTYPE


def set_precision(name: str) -> None:
    """Select the global floating point type ("float32" or "float64")."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.float32 if name == "float32" else np.float64


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = "float32" if _DTYPE is np.float32 else "float64"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """A node in the computation graph.

    ``data`` holds the value, ``grad`` is filled by :func:`backward` for every
    node that requires a gradient and was reached from the loss.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim == 0:
            pass
        elif any(s <= 0 for s in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False, op="constant")


def _make(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(out, needs, op=op, parents=parents, backward_fn=backward_fn if needs else None)


# ---------------------------------------------------------------- arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, "matmul", (a, b), back)


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """'same' or 'row'; rows of ``b`` are broadcast over the batch of ``a``."""
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return "row"
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_like(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = b

        def back_s(g):
            return (g,)

        return _make(a.data + c, "add", (a,), back_s)
    b = as_tensor(b)
    _broadcast_kind(a, b)

    def back(g):
        return g, _reduce_like(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -b)
    b = as_tensor(b)
    _broadcast_kind(a, b)

    def back(g):
        return g, -_reduce_like(g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = as_tensor(b)
    _broadcast_kind(a, b)
    A, B = a.data, b.data

    def back(g):
        return g * B, _reduce_like(g * A, b.shape)

    return _make(A * B, "mul", (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def back(g):
        return (g * c,)

    return _make(a.data * c, "scale", (a,), back)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    gate = a.data > 0

    def back(g):
        return (g * gate,)

    return _make(np.maximum(a.data, 0), "relu", (a,), back)


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale or relu."""
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        return scale(a, b)
    fn = {"add": add, "sub": sub, "mul": mul}.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return fn(a, b)


# ---------------------------------------------------------------- reshaping


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (g.T,)

    return _make(a.data.T, "transpose", (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def back(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), "reshape", (a,), back)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, back)


def take_rows(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], "take_rows", (a,), back)


def pick(a: Tensor, columns) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, columns[i]]``."""
    a = as_tensor(a)
    cols = np.asarray(columns, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)

    return _make(a.data[rows, cols], "pick", (a,), back)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    out = a.data.sum() if axis is None else a.data.sum(axis=axis)
    return _make(np.asarray(out, dtype=a.data.dtype), "sum", (a,), back)


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    shape = a.shape

    def back(g):
        return (np.full(shape, g / n, dtype=a.data.dtype),)

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), "mean", (a,), back)


def logsumexp_rows(a: Tensor) -> Tensor:
    """Numerically stable ``log(sum(exp(a), axis=1))`` via row-max subtraction."""
    a = as_tensor(a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s

    def back(g):
        return (g[:, None] * soft,)

    return _make(out, "logsumexp", (a,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    return mean(sub(logsumexp_rows(logits), pick(logits, labels)))


# ---------------------------------------------------------------- layers


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    X = x.data
    norm = np.sqrt((X * X).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = X / denom
    live = norm > eps

    def back(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(live, (g - y * proj) / denom, g / denom),)

    return _make(y, "l2_normalize", (x,), back)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical node through which no gradient flows."""
    x = as_tensor(x)
    return Tensor(x.data, False, op="stop_gradient", parents=(x,), backward_fn=None)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, dim: int, momentum: float = 0.1):
        self.running_mean = np.zeros(dim, dtype=_DTYPE)
        self.running_var = np.ones(dim, dtype=_DTYPE)
        self.momentum = momentum

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), self.momentum)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


BN_EPS = 1e-5


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None,
    mode: str = "train",
    *,
    track_stats: bool = True,
) -> Tensor:
    """Batch normalization over the batch axis of a ``b x d`` input.

    In train mode the batch statistics are used and, when ``track_stats``
    holds, folded into ``state`` with its momentum (unbiased variance).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    X = x.data
    b = X.shape[0]
    if mode == "train":
        if b < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = X.mean(axis=0)
        var = X.var(axis=0)
        if state is not None and track_stats:
            m = state.momentum
            state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
            state.running_var = ((1 - m) * state.running_var + m * var * b / (b - 1)).astype(
                state.running_var.dtype
            )
    elif mode == "eval":
        if state is None:
            raise ValueError("eval mode requires running statistics")
        mu, var = state.running_mean.astype(X.dtype), state.running_var.astype(X.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (X - mu) * inv
    G = gamma.data
    out = xhat * G + beta.data

    def back(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * G
        if mode == "train":
            dx = inv / b * (b * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
        else:
            dx = gx * inv
        return dx, dgamma, dbeta

    return _make(out, "batch_norm", (x, gamma, beta), back)


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4 or k.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects b*c*h*w input and o*c*3*3 kernel, got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {k.shape[1]}")
    X, K = x.data, k.data
    B, C, H, W = X.shape
    O = K.shape[0]
    xp = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, O, H, W), dtype=X.dtype)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di : di + H, dj : dj + W]
            out += np.einsum("bchw,oc->bohw", patch, K[:, :, di, dj], optimize=True)

    def back(g):
        dk = np.zeros_like(K)
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, :, di : di + H, dj : dj + W]
                dk[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
                dxp[:, :, di : di + H, dj : dj + W] += np.einsum("bohw,oc->bchw", g, K[:, :, di, dj], optimize=True)
        return dxp[:, :, 1:-1, 1:-1], dk

    return _make(out, "conv2d", (x, k), back)


def avg_pool2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even spatial extents, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4,)

    return _make(out, "avg_pool2", (x,), back)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Leaf gradients add onto any existing ``.grad`` (this is what makes
    micro-batch accumulation work); interior nodes are overwritten.  When
    ``params`` is given, returns their gradients with zeros for parameters
    the loss does not depend on.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return {}
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()
    }
