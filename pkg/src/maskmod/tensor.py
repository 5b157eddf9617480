"""Dense tensors with reverse-mode differentiation.

Every operation records a node holding its inputs and a backward rule.  The
backward rule is free to differ from the analytic derivative of the forward
rule, which is what the mask threshold relies on.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPE = np.float32
_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float type (64-bit for gradient checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Node:
    __slots__ = ("id", "name", "inputs", "backward")

    def __init__(self, name: str, inputs: Sequence["Tensor"], backward: Callable):
        self.id = next(_node_ids)
        self.name = name
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim and min(arr.shape) == 0:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_op(name: str, inputs: Sequence[Tensor], fwd: Callable, bwd: Callable) -> Tensor:
    """Apply ``fwd`` to the input arrays and record ``bwd`` for the backward pass.

    ``bwd(upstream, *input_arrays)`` must return one gradient (or None) per input.
    Nothing checks that ``bwd`` is the derivative of ``fwd``.
    """
    inputs = [as_tensor(t) for t in inputs]
    arrays = [t.data for t in inputs]
    out = fwd(*arrays)
    return _record(name, inputs, out, lambda g: bwd(g, *arrays))


def _record(name: str, inputs: Sequence[Tensor], data, backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=np.result_type(*(t.data.dtype for t in inputs)) if inputs else None)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf and node."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad")

    # collect reachable nodes, then walk them in reverse creation order
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            nodes[t.node.id] = t
            stack.extend(t.node.inputs)

    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        t = nodes[node_id]
        g = upstream.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        grads = t.node.backward(g)
        if len(grads) != len(t.node.inputs):
            raise RuntimeError(f"{t.node.name}: backward returned {len(grads)} grads for {len(t.node.inputs)} inputs")
        for inp, gi in zip(t.node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            if gi.shape != inp.shape:
                raise ShapeError(f"{t.node.name}: gradient shape {gi.shape} does not match input {inp.shape}")
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                upstream[key] = gi if key not in upstream else upstream[key] + gi


# ---------------------------------------------------------------------------
# broadcasting: same shape, scalar, or a [C] vector against axis 1


def _broadcast_plan(name: str, a: np.ndarray, b: np.ndarray) -> tuple:
    if a.shape == b.shape:
        return a.shape, None, None
    if b.size == 1 and b.ndim <= a.ndim:
        return a.shape, None, "scalar"
    if a.size == 1 and a.ndim <= b.ndim:
        return b.shape, "scalar", None
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return a.shape, None, "channel"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return b.shape, "channel", None
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _expand(x: np.ndarray, mode: Optional[str], ndim: int) -> np.ndarray:
    if mode == "channel":
        return x.reshape((1, -1) + (1,) * (ndim - 2))
    if mode == "scalar":
        return x.reshape(())
    return x


def _reduce(g: np.ndarray, mode: Optional[str], shape: tuple) -> np.ndarray:
    if mode == "scalar":
        return np.asarray(g.sum()).reshape(shape)
    if mode == "channel":
        axes = (0,) + tuple(range(2, g.ndim))
        return g.sum(axis=axes)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ma, mb = _broadcast_plan("add", a.data, b.data)
    nd = max(a.ndim, b.ndim)
    out = _expand(a.data, ma, nd) + _expand(b.data, mb, nd)
    return _record("add", [a, b], out, lambda g: (_reduce(g, ma, a.shape), _reduce(g, mb, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ma, mb = _broadcast_plan("sub", a.data, b.data)
    nd = max(a.ndim, b.ndim)
    out = _expand(a.data, ma, nd) - _expand(b.data, mb, nd)
    return _record("sub", [a, b], out, lambda g: (_reduce(g, ma, a.shape), _reduce(-g, mb, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ma, mb = _broadcast_plan("mul", a.data, b.data)
    nd = max(a.ndim, b.ndim)
    ea, eb = _expand(a.data, ma, nd), _expand(b.data, mb, nd)

    def bwd(g):
        return _reduce(g * eb, ma, a.shape), _reduce(g * ea, mb, b.shape)

    return _record("mul", [a, b], ea * eb, bwd)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", [x], out, bwd)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _record("reshape", [x], out, lambda g: (g.reshape(x.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record("matmul", [a, b], a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _record("transpose", [x], x.data.T, lambda g: (g.T,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # NaN passes through so a diverging run still surfaces at the loss
    return _record("relu", [x], np.where(mask | np.isnan(x.data), x.data, 0), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", [x], out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record("log", [x], np.log(x.data), lambda g: (g / x.data,))
