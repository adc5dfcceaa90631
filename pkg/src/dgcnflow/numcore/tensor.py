"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive is registered in ``PRIMITIVES`` as a pair of
numpy functions.  A :class:`Tensor` produced by a primitive remembers the
primitive tag, its inputs, attributes and cached intermediates; the set of
those nodes reachable from a scalar loss is the :class:`ComputationRecord`
that :func:`backward` walks in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class EmptyRecordError(ContractError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    attrs: dict[str, Any]
    cache: Any
    output: "Tensor | None" = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; each call goes through ``forward``
    def __add__(self, other):
        return forward("add", [self, as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return forward("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return forward("sub", [as_tensor(other), self])

    def __mul__(self, other):
        return forward("mul", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return forward("neg", [self])

    def __matmul__(self, other):
        return forward("matmul", [self, as_tensor(other)])

    def __getitem__(self, index):
        return forward("getitem", [self], index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes):
        return forward("transpose", [self], axes=tuple(axes) if axes else None)

    def sum(self, axis=None, keepdims=False):
        return forward("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return forward("mean", [self], axis=axis, keepdims=keepdims)

    def sigmoid(self):
        return forward("sigmoid", [self])

    def tanh(self):
        return forward("tanh", [self])

    def relu(self):
        return forward("relu", [self])

    def square(self):
        return forward("square", [self])

    def abs(self):
        return forward("abs", [self])


def _raise_nonscalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# Each primitive: fwd(*arrays, **attrs) -> (out, cache); bwd(g, cache, *arrays, **attrs) -> grads


def _add_fwd(a, b):
    _broadcast_check("add", a, b)
    return a + b, None


def _add_bwd(g, cache, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _broadcast_check("sub", a, b)
    return a - b, None


def _sub_bwd(g, cache, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _broadcast_check("mul", a, b)
    return a * b, None


def _mul_bwd(g, cache, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _neg_fwd(a):
    return -a, None


def _neg_bwd(g, cache, a):
    return (-g,)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    if b.ndim == 2 and a.ndim > 2:
        # shared weight matrix: one 2-D product over all leading rows
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],)), None
    return np.matmul(a, b), None


def _matmul_bwd(g, cache, a, b):
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    if a.ndim == 2 and b.ndim > 2:
        # fold batch axes into the column axis so the weight gradient is a single product
        gm = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
        bm = np.moveaxis(b, -2, 0).reshape(b.shape[-2], -1)
        ga = gm @ bm.T
        gb = np.matmul(a.T, g)
        return ga, _unbroadcast(gb, b.shape)
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_fwd(a):
    s = _sigmoid(a)
    return s, s


def _sigmoid_bwd(g, s, a):
    return (g * s * (1.0 - s),)


def _tanh_fwd(a):
    t = np.tanh(a)
    return t, t


def _tanh_bwd(g, t, a):
    return (g * (1.0 - t * t),)


def _relu_fwd(a):
    mask = a > 0
    return np.where(mask, a, 0.0), mask


def _relu_bwd(g, mask, a):
    return (g * mask,)


def _square_fwd(a):
    return a * a, None


def _square_bwd(g, cache, a):
    return (2.0 * a * g,)


def _abs_fwd(a):
    return np.abs(a), None


def _abs_bwd(g, cache, a):
    return (g * np.sign(a),)


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None


def _reshape_bwd(g, cache, a, shape):
    return (g.reshape(a.shape),)


def _transpose_fwd(a, axes):
    return np.transpose(a, axes), None


def _transpose_bwd(g, cache, a, axes):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _sum_fwd(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _expand_reduced(g, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _sum_bwd(g, cache, a, axis, keepdims):
    return (np.array(_expand_reduced(g, a, axis, keepdims)),)


def _mean_fwd(a, axis, keepdims):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    return out, a.size // max(np.size(out), 1)


def _mean_bwd(g, n, a, axis, keepdims):
    return (np.array(_expand_reduced(g, a, axis, keepdims)) / n,)


def _getitem_fwd(a, index):
    return a[index], None


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def _getitem_bwd(g, cache, a, index):
    out = np.zeros_like(a)
    if _is_basic(index):
        out[index] = g
    else:
        np.add.at(out, index, g)
    return (out,)


def _take_fwd(a, indices, axis):
    return np.take(a, indices, axis=axis), None


def _take_bwd(g, cache, a, indices, axis):
    out = np.zeros_like(a)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, indices, np.moveaxis(g, axis, 0))
    return (out,)


def _concat_fwd(*arrays, axis):
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(arr.shape, ref.shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {arr.shape} differ off axis {axis}")
    return np.concatenate(arrays, axis=axis), [arr.shape[ax] for arr in arrays]


def _concat_bwd(g, sizes, *arrays, axis):
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "neg": (_neg_fwd, _neg_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "square": (_square_fwd, _square_bwd),
    "abs": (_abs_fwd, _abs_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "getitem": (_getitem_fwd, _getitem_bwd),
    "take": (_take_fwd, _take_bwd),
    "concat": (_concat_fwd, _concat_bwd),
}


def forward(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply primitive ``op`` to ``inputs`` and record it when any input needs gradients."""
    try:
        fwd, _ = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    inputs = tuple(as_tensor(t) for t in inputs)
    for t in inputs:
        if not np.isfinite(t.data).all():
            raise NumericDomainError(f"{op}: non-finite value in input of shape {t.shape}")
    out_data, cache = fwd(*(t.data for t in inputs), **attrs)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=np.float64)
    out.requires_grad = needs_grad
    out.grad = None
    out.name = None
    out.node = None
    if needs_grad:
        node = Node(op, inputs, attrs, cache)
        node.output = out
        out.node = node
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward("concat", list(tensors), axis=axis)


def take(t: Tensor, indices, axis: int) -> Tensor:
    return forward("take", [t], indices=np.asarray(indices), axis=axis)


@dataclass
class ComputationRecord:
    """Primitive nodes reachable from a root, inputs before outputs."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: list[Node] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(order)
        stack: list[tuple[Node, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        position = {id(n): k for k, n in enumerate(self.nodes)}
        for k, node in enumerate(self.nodes):
            for t in node.inputs:
                if t.node is not None and position.get(id(t.node), len(self.nodes)) >= k:
                    return False
        return True

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every node's value from the leaves; keyed by ``id(node)``."""
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            args = [values[id(t.node)] if t.node is not None else t.data for t in node.inputs]
            fwd, _ = PRIMITIVES[node.op]
            values[id(node)] = np.asarray(fwd(*args, **node.attrs)[0], dtype=np.float64)
        return values


def backward(root: Tensor, record: ComputationRecord | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every leaf that requires gradients.

    Gradients add onto existing ``grad`` buffers; zero them between steps.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node is None:
        if root.requires_grad:
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones_like(root.data)
            return
        raise EmptyRecordError("root is detached from any computation that requires gradients")
    if record is None:
        record = ComputationRecord.trace(root)
    grads: dict[int, np.ndarray] = {id(root.node): np.ones_like(root.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _, bwd = PRIMITIVES[node.op]
        in_grads = bwd(g, node.cache, *(t.data for t in node.inputs), **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t.node is not None:
                key = id(t.node)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                gi = np.asarray(gi, dtype=np.float64).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def global_norm_clip(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
