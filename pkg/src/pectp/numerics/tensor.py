"""Dense tensors with reverse-mode differentiation.

A graph is recorded only when at least one operand requires a gradient, so
a forward pass over frozen weights and frozen prompts builds nothing and
needs no explicit no-grad context. Each recorded node keeps its parents and
a closure mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pectp.numerics import kernels

LAYER_NORM_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis: int | None = None) -> Tensor:
        return reduce_sum(self, axis)

    def mean(self, axis: int) -> Tensor:
        return reduce_mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], back: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Nodes are visited once each in reverse topological order. Interior nodes
    are unlinked afterwards so the graph can be collected.
    """
    if not loss.requires_grad:
        return
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"implicit gradient needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
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
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a: tuple, b: tuple, opname: str) -> None:
    # same shape, scalar, or trailing-suffix (bias / positional add)
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return
    if len(a) <= len(b) and b[len(b) - len(a):] == a:
        return
    raise ShapeError(f"{opname}: cannot combine shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_broadcast(a.shape, b.shape, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _node(ad * bd, (a, b), back, "mul")


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(t.data * t.dtype.type(c), (t,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), back, "matmul")


def transpose(t: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(t: Tensor, shape) -> Tensor:
    src = t.shape
    return _node(t.data.reshape(shape), (t,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[x.shape for x in tensors]}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    shape0 = tensors[0].shape
    for t in tensors:
        if t.shape != shape0:
            raise ShapeError(f"stack: incompatible shapes {[x.shape for x in tensors]}")
    ax = axis % (len(shape0) + 1)

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), back, "stack")


def slice_(t: Tensor, idx) -> Tensor:
    src_shape, dtype = t.shape, t.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(t.data[idx], (t,), back, "slice")


# ---------------------------------------------------------------- reductions


def _axis(t: Tensor, axis: int) -> int:
    if not isinstance(axis, (int, np.integer)):
        raise TypeError(f"axis must be an integer, got {axis!r}")
    nd = t.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} out of range for rank-{nd} tensor")
    return int(axis) % nd


def reduce_sum(t: Tensor, axis: int | None = None) -> Tensor:
    src = t.shape
    if axis is None:
        return _node(np.asarray(t.data.sum()), (t,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    ax = _axis(t, axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return _node(t.data.sum(axis=ax), (t,), back, "sum")


def reduce_mean(t: Tensor, axis: int) -> Tensor:
    ax = _axis(t, axis)
    n = t.shape[ax]
    src = t.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), src).copy(),)

    return _node(t.data.mean(axis=ax), (t,), back, "mean")


def sum_squares(t: Tensor) -> Tensor:
    d = t.data
    return _node(np.asarray((d * d).sum()), (t,), lambda g: (2.0 * g * d,), "sum_squares")


# ---------------------------------------------------------------- nonlinear


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis (row max subtracted before exp)."""
    y = kernels.softmax_forward(t.data)
    return _node(y, (t,), lambda g: (kernels.softmax_backward(g, y),), "softmax")


def gelu(t: Tensor) -> Tensor:
    x = t.data
    return _node(kernels.gelu_forward(x), (t,), lambda g: (kernels.gelu_backward(g, x),), "gelu")


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm epsilon must be positive")
    if gamma.shape != (t.shape[-1],) or beta.shape != (t.shape[-1],):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {t.shape[-1]}"
        )
    y, xhat, rstd = kernels.layer_norm_forward(t.data, gamma.data, beta.data, eps)

    def back(g):
        dx, dgamma, dbeta = kernels.layer_norm_backward(g, xhat, rstd, gamma.data)
        return dx, dgamma, dbeta

    return _node(y, (t, gamma, beta), back, "layer_norm")


def sigmoid_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of the per-row summed sigmoid binary cross-entropy."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"sigmoid_bce: logits {z.shape} vs targets {y.shape}")
    rows = z.shape[0] if z.ndim > 1 else 1
    # log(1 + exp(-|z|)) form is stable for both signs
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / rows
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def back(g):
        return (g * (sig - y) / rows,)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), back, "sigmoid_bce")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; ``labels`` are column indices."""
    z = logits.data
    labels = np.asarray(labels)
    rows = z.shape[0]
    p = kernels.softmax_forward(z)
    picked = p[np.arange(rows), labels]
    loss = -np.log(np.maximum(picked, np.finfo(z.dtype).tiny)).sum() / rows

    def back(g):
        d = p.copy()
        d[np.arange(rows), labels] -= 1.0
        return (g * d / rows,)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), back, "softmax_ce")
