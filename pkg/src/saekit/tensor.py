"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` sorts the recorded graph topologically and walks it in
reverse. The graph is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32
_REAL_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_kinks():
    """Collect the branch decisions of non-smooth ops (ReLU masks, pooling argmaxes).

    Two forwards with equal logs are on the same smooth piece of the function.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def log_kink(decision: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(decision)


class Tensor:
    """A dense row-major array of single or double precision reals.

    Leaf tensors created with ``requires_grad=True`` are the parameters and
    inputs a gradient map is reported for; op outputs carry ``_parents`` and
    a ``_backward`` closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _REAL_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if np.dtype(dtype) not in _REAL_DTYPES:
            raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        t._op = None
        return t

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def offset(self, index: Sequence[int]) -> int:
        """Row-major flat offset of a multi-index."""
        if len(index) != self.ndim:
            raise DimensionError(f"index of rank {len(index)} for tensor of rank {self.ndim}")
        off = 0
        for i, extent in zip(index, self.shape):
            if not 0 <= i < extent:
                raise IndexError(f"index {tuple(index)} out of range for shape {self.shape}")
            off = off * extent + i
        return off

    def get(self, index: Sequence[int]) -> float:
        return float(self.data.reshape(-1)[self.offset(index)])

    def set(self, index: Sequence[int], value: float) -> None:
        if self._backward is not None:
            raise ContractError("op outputs are immutable; only leaf tensors may be written")
        self.data.reshape(-1)[self.offset(index)] = value

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> dict["Tensor", np.ndarray]:
        """Run :func:`backward` and store gradients on leaf tensors' ``.grad``."""
        grads = backward(self)
        for t, g in grads.items():
            if t._backward is None:
                t.grad = g
        return grads


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def make_node(data: np.ndarray, parents: Iterable[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording it on the graph when needed.

    ``grad_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    parents = tuple(parents)
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        out._op = op
    return out


# ---------------------------------------------------------------------------
# graph traversal


class TapeGraph:
    """Topologically ordered record of the ops that produced a tensor.

    Only nodes that require gradients are kept; every node's inputs precede
    it in ``nodes``.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "TapeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        if not out.requires_grad:
            return cls(order)
        stack: list[tuple[Tensor, int]] = [(out, 0)]
        seen.add(id(out))
        while stack:
            node, i = stack.pop()
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, 0))
            else:
                order.append(node)
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: TapeGraph | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every reachable node that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = TapeGraph.from_output(loss)
    grads: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return grads
    grads[loss] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    return grads


# ---------------------------------------------------------------------------
# elementwise ops


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "scalar"
    if a.ndim == 4 and b.ndim == 2 and b.shape == a.shape[:2]:
        return "channel"
    raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable")


def _expand(b: np.ndarray, kind: str) -> np.ndarray:
    if kind == "channel":
        return b[:, :, None, None]
    if kind == "scalar":
        return b.reshape(())
    return b


def _reduce(g: np.ndarray, kind: str, shape) -> np.ndarray:
    if kind == "channel":
        return g.sum(axis=(2, 3))
    if kind == "scalar":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be channel-broadcast (N×C over N×C×H×W)."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim == 2 and b.ndim == 4:
        a, b = b, a
    kind = _broadcast_kind(a, b)
    bshape = b.shape

    def grad_fn(g):
        return g, _reduce(g, kind, bshape)

    return make_node(a.data + _expand(b.data, kind), (a, b), grad_fn, "add")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a scalar or channel-broadcast."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def scale_grad(g):
            return (g * c,)

        return make_node(a.data * a.data.dtype.type(c), (a,), scale_grad, "scale")
    if a.ndim == 2 and b.ndim == 4:
        a, b = b, a
    kind = _broadcast_kind(a, b)
    bshape = b.shape
    ad, bd = a.data, _expand(b.data, kind)

    def grad_fn(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce(g * ad, kind, bshape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), grad_fn, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    log_kink(mask)

    def grad_fn(g):
        return (g * mask,)

    return make_node(a.data * mask, (a,), grad_fn, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable for large |x| in both directions
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def grad_fn(g):
        return (g * s * (1 - s),)

    return make_node(s, (a,), grad_fn, "sigmoid")


_EWISE = {"add": add, "mul": mul}
_UNARY = {"relu": relu, "sigmoid": sigmoid}


def ewise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch to one of ``add``, ``mul``, ``relu``, ``sigmoid`` by name."""
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _EWISE:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _EWISE[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")

    def grad_fn(g):
        return (np.ascontiguousarray(g.T),)

    return make_node(np.ascontiguousarray(a.data.T), (a,), grad_fn, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape

    def grad_fn(g):
        return (g.reshape(src),)

    return make_node(out, (a,), grad_fn, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_node(out, tensors, grad_fn, "concat")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), grad_fn, "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size

    def grad_fn(g):
        return (np.full(shape, g.reshape(()) / n, dtype=g.dtype),)

    return make_node(np.asarray(a.data.mean(), dtype=a.dtype), (a,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# finite-difference checking


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` for the given flat indices."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(len(indices) if not isinstance(indices, range) else flat.size)
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.copy())).data)
        flat[i] = orig
        out[j] = (fp - fm) / (2 * eps)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, indices=None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a tensor to a scalar tensor. ``x`` is promoted to double
    precision. ``indices`` optionally restricts the check to some flat
    positions.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    loss = f(leaf)
    analytic = backward(loss).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(x)
    analytic = analytic.reshape(-1)
    if indices is not None:
        indices = list(indices)
        analytic = analytic[indices]
    numeric = numeric_grad(f, x, eps, indices)
    return float(rel_error(analytic, numeric).max())
