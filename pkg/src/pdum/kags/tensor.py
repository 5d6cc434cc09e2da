"""Dense tensors with reverse-mode differentiation on top of numpy.

Every forward primitive returns a new :class:`Tensor` and, when any input
requires gradients and recording is enabled, remembers a closure that maps the
upstream gradient to the gradients of its inputs. :func:`backward` walks the
recorded graph once in reverse topological order and then releases it.

Two context-local switches control recording and precision:

- :func:`no_grad` disables graph recording (inference, finite differences).
- :func:`default_dtype` sets the float width of newly created leaves. Training
  runs at 32 bits; the gradient-check harness switches to 64 bits.
"""

from __future__ import annotations

import contextlib
import logging
from contextvars import ContextVar
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "zeros",
    "no_grad",
    "grad_enabled",
    "default_dtype",
    "current_dtype",
    "backward",
    "matmul",
    "softmax_rows",
    "concat",
    "stack",
    "batch_norm",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

_GRAD_ENABLED: ContextVar[bool] = ContextVar("kags_grad_enabled", default=True)
_DTYPE: ContextVar[np.dtype] = ContextVar("kags_dtype", default=np.dtype(np.float32))

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]
Operand = "Tensor | float | int | np.ndarray"


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the ``with`` block (current context only)."""

    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[np.dtype]:
    """Set the float width used for tensors created inside the block.

    Parameters
    ----------
    dtype : Any
        Anything accepted by :class:`numpy.dtype`; must be a floating type.

    Raises
    ------
    ContractError
        If ``dtype`` is not a floating type.
    """

    resolved = np.dtype(dtype)
    if resolved.kind != "f":
        raise ContractError(f"default dtype must be floating, got {resolved}")
    token = _DTYPE.set(resolved)
    try:
        yield resolved
    finally:
        _DTYPE.reset(token)


def current_dtype() -> np.dtype:
    return _DTYPE.get()


class Tensor:
    """A float array that may participate in a differentiation graph.

    Parameters
    ----------
    data : array-like
        Values; copied and cast to the context's default float width unless
        ``dtype`` is given.
    requires_grad : bool, optional
        Mark the tensor as a leaf whose gradient is accumulated into ``grad``.
    dtype : Any, optional
        Explicit float width overriding :func:`current_dtype`.

    Raises
    ------
    NumericError
        If ``data`` contains NaN or infinite values.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_released")
    __array_priority__ = 1000

    def __init__(self, data: Any, *, requires_grad: bool = False, dtype: Any = None) -> None:
        array = np.array(data, dtype=np.dtype(dtype) if dtype is not None else current_dtype())
        _check_finite(array, "leaf")
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._released = False

    # -- introspection ---------------------------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ------------------------------------------------------------------------------------------

    def __add__(self, other: Operand) -> Tensor:
        return _add(self, _lift(other, self))

    def __radd__(self, other: Operand) -> Tensor:
        return _add(_lift(other, self), self)

    def __sub__(self, other: Operand) -> Tensor:
        return _sub(self, _lift(other, self))

    def __rsub__(self, other: Operand) -> Tensor:
        return _sub(_lift(other, self), self)

    def __mul__(self, other: Operand) -> Tensor:
        return _mul(self, _lift(other, self))

    def __rmul__(self, other: Operand) -> Tensor:
        return _mul(_lift(other, self), self)

    def __truediv__(self, other: Operand) -> Tensor:
        return _div(self, _lift(other, self))

    def __rtruediv__(self, other: Operand) -> Tensor:
        return _div(_lift(other, self), self)

    def __neg__(self) -> Tensor:
        return _result(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, _lift(other, self))

    def __rmatmul__(self, other: Operand) -> Tensor:
        return matmul(_lift(other, self), self)

    # -- shape -----------------------------------------------------------------------------------------------

    def reshape(self, *shape: int | Sequence[int]) -> Tensor:
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        original = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: cannot view shape {original} as {shape}") from exc
        return _result(data, (self,), lambda g: (g.reshape(original),), "reshape")

    def swapaxes(self, axis1: int, axis2: int) -> Tensor:
        data = np.swapaxes(self.data, axis1, axis2)
        return _result(data, (self,), lambda g: (np.swapaxes(g, axis1, axis2),), "swapaxes")

    @property
    def T(self) -> Tensor:
        """Swap the two trailing axes."""
        if self.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got shape {self.shape}")
        return self.swapaxes(-1, -2)

    def __getitem__(self, index: Any) -> Tensor:
        index = _normalize_index(index)
        data = self.data[index]
        shape, dtype = self.shape, self.data.dtype

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
            np.add.at(full, index, g)
            return (full,)

        return _result(np.array(data, copy=True), (self,), _backward, "getitem")

    # -- reductions ------------------------------------------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        data = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        axes = _normalize_axes(axis, len(shape))

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            if not keepdims:
                g = np.reshape(g, tuple(1 if i in axes else n for i, n in enumerate(shape)))
            return (np.broadcast_to(g, shape),)

        return _result(data, (self,), _backward, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[i] for i in axes])) if axes else 1
        if count == 0:
            raise DimensionError(f"mean over an empty axis of shape {self.shape}")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- element-wise ----------------------------------------------------------------------------------------

    def exp(self) -> Tensor:
        y = np.exp(self.data)
        return _result(y, (self,), lambda g: (g * y,), "exp")

    def log(self) -> Tensor:
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(x)
        return _result(y, (self,), lambda g: (g / x,), "log")

    def tanh(self) -> Tensor:
        y = np.tanh(self.data)
        return _result(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self) -> Tensor:
        y = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        return _result(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def relu(self) -> Tensor:
        mask = self.data > 0
        return _result(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def softmax(self, axis: int = -1) -> Tensor:
        if self.ndim == 0 or self.shape[axis] == 0:
            raise DimensionError(f"softmax over an empty axis of shape {self.shape}")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return _result(y, (self,), _backward, "softmax")

    def log_softmax(self, axis: int = -1) -> Tensor:
        if self.ndim == 0 or self.shape[axis] == 0:
            raise DimensionError(f"log_softmax over an empty axis of shape {self.shape}")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

        return _result(y, (self,), _backward, "log_softmax")


# -- constructors --------------------------------------------------------------------------------------------


def tensor(data: Any, *, requires_grad: bool = False, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data: Any, *, dtype: Any = None) -> Tensor:
    """Create a trainable leaf."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# -- binary primitives ---------------------------------------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcasting("add", np.add, a, b)
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def _sub(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcasting("sub", np.subtract, a, b)
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    data = _broadcasting("mul", np.multiply, a, b)
    return _result(data, (a, b), lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)), "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        data = _broadcasting("div", np.divide, a, b)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g / y, a.shape), _unbroadcast(-g * x / (y * y), b.shape)

    return _result(data, (a, b), _backward, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the two trailing axes, broadcasting leading batch axes.

    Raises
    ------
    DimensionError
        If either operand has fewer than two axes, the inner extents differ, or
        the batch axes do not broadcast. The message names both shapes.
    """

    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from exc
    x, y = a.data, b.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), _backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row maximum."""
    return x.softmax(axis=-1)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""

    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: shapes {shapes} do not align on axis {axis}") from exc
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis."""

    if not tensors:
        raise ContractError("stack needs at least one tensor")
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"stack: shapes {shapes} differ") from exc
    count = len(tensors)
    return _result(data, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)), "stack")


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    *,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize the rows (axis ``-2``) of ``x`` and apply a per-feature affine map.

    With ``stats=None`` each leading index is normalized by the biased mean and
    variance of its own rows, and those statistics take part in the gradient.
    Otherwise ``stats`` holds fixed ``(mean, var)`` vectors of width ``d``.

    Returns
    -------
    tuple[Tensor, numpy.ndarray, numpy.ndarray]
        The output and the mean and variance that were applied.
    """

    if x.ndim < 2 or x.shape[-1] != scale.shape[-1] or scale.shape != shift.shape:
        raise DimensionError(f"batch_norm: input {x.shape} does not match scale {scale.shape} / shift {shift.shape}")
    data, gamma = x.data, scale.data
    if stats is None:
        mean = data.mean(axis=-2, keepdims=True)
        var = data.var(axis=-2, keepdims=True)
    else:
        mean, var = (np.asarray(s, dtype=data.dtype) for s in stats)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (data - mean) * inv
    out = xhat * gamma + shift.data
    rows = x.shape[-2]
    batch_stats = stats is None

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_scale = _unbroadcast(g * xhat, scale.shape)
        g_shift = _unbroadcast(g, shift.shape)
        dxhat = g * gamma
        if batch_stats:
            gx = (inv / rows) * (
                rows * dxhat - dxhat.sum(axis=-2, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-2, keepdims=True)
            )
        else:
            gx = dxhat * inv
        return gx, g_scale, g_shift

    result = _result(out, (x, scale, shift), _backward, "batch_norm")
    return result, np.asarray(mean), np.asarray(var)


# -- graph traversal -----------------------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every reachable leaf.

    Leaf gradients add to any existing ``grad``; call ``zero_grad`` between
    optimizer steps. The graph is released afterwards.

    Raises
    ------
    ContractError
        If ``root`` is not a single element, does not depend on any leaf that
        requires gradients, or its graph was already consumed by a previous call.
    """

    if root._released:
        raise ContractError("backward already ran on this graph; rebuild it with a fresh forward pass")
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not depend on any tensor that requires grad")

    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=node.data.dtype) if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
            node._released = True
    root._released = True
    logger.debug("backward visited %d nodes", len(order))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    pending: list[tuple[Tensor, bool]] = [(root, False)]
    while pending:
        node, expanded = pending.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        pending.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                pending.append((parent, False))
    return order


# -- helpers -------------------------------------------------------------------------------------------------


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    data = np.asarray(data)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._released = False
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_finite(data: np.ndarray, op: str) -> None:
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values (shape {data.shape})")


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.data.dtype)


def _broadcasting(op: str, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _normalize_index(index: Any) -> Any:
    if isinstance(index, list):
        return np.asarray(index)
    if isinstance(index, tuple):
        return tuple(np.asarray(i) if isinstance(i, list) else i for i in index)
    return index
