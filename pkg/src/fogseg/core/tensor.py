"""
Tensor and reverse-mode autodiff
--------------------------------

``Tensor`` wraps a numpy array (canonical image layout N x C x H x W, row-major, float32 by
default) together with an optional gradient slot. Differentiable operations are ``Function``
subclasses: ``forward`` works on plain arrays, ``backward`` maps the upstream gradient to one
gradient per input. ``Function.apply`` records the call on the output tensor so that
``backward`` can rebuild the graph from the loss.

Classes:
    Tensor:   Dense array plus ``requires_grad`` / ``grad``
    Function: Base class of every differentiable op
    Graph:    Topologically ordered view of the recorded operations behind a tensor

Functions:
    no_grad:         Context manager that disables recording
    backward:        Populate ``.grad`` on every leaf reachable from a scalar loss
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .. import config
from ..errors import FogSegError, NumericalError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed forward passes without recording a graph."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def record_branches() -> Iterator[List[bytes]]:
    """
    Collect the branch decisions (ReLU masks, pooling winners, signs) of the piecewise ops run
    inside. Two forward passes with equal records went through the same linear pieces.
    """
    previous = getattr(_state, 'branches', None)
    _state.branches = record = []
    try:
        yield record
    finally:
        _state.branches = previous


def note_branch(decision: np.ndarray) -> None:
    record = getattr(_state, 'branches', None)
    if record is not None:
        record.append(np.ascontiguousarray(decision).tobytes())


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

# ----------------------------------------------------------------------------------------------------------


class Function:
    """
    Base class of differentiable operations.

    Subclasses implement ``forward(*arrays, **options) -> ndarray`` and
    ``backward(grad) -> tuple`` with one entry (array or None) per positional input.
    Anything ``backward`` needs is stored on ``self`` during ``forward``.
    """

    def __init__(self) -> None:
        self.inputs: Tuple[Optional[Tensor], ...] = ()
        self.needs_input_grad: Tuple[bool, ...] = ()

    @property
    def op(self) -> str:
        return type(self).__name__.lower()

    def forward(self, *arrays: Any, **options: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Optional['Tensor'], **options: Any) -> 'Tensor':
        ctx = cls()
        ctx.needs_input_grad = tuple(t is not None and t.requires_grad for t in inputs)
        arrays = [t.data if t is not None else None for t in inputs]
        out = ctx.forward(*arrays, **options)

        if config.DEBUG and not np.all(np.isfinite(out)):
            if all(a is None or np.all(np.isfinite(a)) for a in arrays):
                raise NumericalError(f"{ctx.op} produced non-finite values from finite inputs")

        requires_grad = is_grad_enabled() and any(ctx.needs_input_grad)
        if not requires_grad:
            return Tensor(out)
        ctx.inputs = inputs
        return Tensor(out, requires_grad=True, _ctx=ctx)

# ----------------------------------------------------------------------------------------------------------


class Tensor:
    """Dense N-D array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None,
                 _ctx: Optional[Function] = None) -> None:
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.retains_grad: bool = False
        self._ctx = _ctx

    # ---------------------------------------------------------------- construction

    @staticmethod
    def zeros(shape: Sequence[int], requires_grad: bool = False, dtype: Any = DEFAULT_DTYPE) -> 'Tensor':
        return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape: Sequence[int], requires_grad: bool = False, dtype: Any = DEFAULT_DTYPE) -> 'Tensor':
        return Tensor(np.ones(tuple(shape), dtype=dtype), requires_grad=requires_grad)

    # ---------------------------------------------------------------- properties

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise FogSegError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> 'Tensor':
        self.retains_grad = True
        return self

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ---------------------------------------------------------------- arithmetic

    def _wrap(self, other: Any) -> 'Tensor':
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: Any) -> 'Tensor':
        return Add.apply(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> 'Tensor':
        return Add.apply(self, Neg.apply(self._wrap(other)))

    def __rsub__(self, other: Any) -> 'Tensor':
        return Add.apply(self._wrap(other), Neg.apply(self))

    def __mul__(self, other: Any) -> 'Tensor':
        return Mul.apply(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> 'Tensor':
        if isinstance(other, Tensor):
            return Mul.apply(self, Reciprocal.apply(other))
        return Mul.apply(self, self._wrap(1.0 / other))

    def __neg__(self) -> 'Tensor':
        return Neg.apply(self)

    def sum(self, axis: Any = None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> 'Tensor':
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def exp(self) -> 'Tensor':
        return Exp.apply(self)

    def log(self) -> 'Tensor':
        return Log.apply(self)

    def abs(self) -> 'Tensor':
        return Abs.apply(self)

    def sigmoid(self) -> 'Tensor':
        return Sigmoid.apply(self)

    def tanh(self) -> 'Tensor':
        return Tanh.apply(self)

    def reshape(self, *shape: Any) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

# ----------------------------------------------------------------------------------------------------------
# Elementwise and reduction primitives


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Reciprocal(Function):
    def forward(self, a):
        self.out = 1.0 / a
        return self.out

    def backward(self, grad):
        return (-grad * self.out * self.out,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // max(out.size, 1) if a.size else 1
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        note_branch(self.sign)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Sigmoid(Function):
    def forward(self, a):
        # exp(-softplus(-a)) stays finite for large |a|
        self.out = np.exp(-np.logaddexp(0.0, -a)).astype(a.dtype, copy=False)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)

# ----------------------------------------------------------------------------------------------------------


@dataclass
class Node:
    id: int
    op: str
    tensor: Tensor
    input_ids: List[int] = field(default_factory=list)

    @property
    def ctx(self) -> Optional[Function]:
        return self.tensor._ctx


class Graph:
    """Recorded operations behind a tensor, in topological (execution) order."""

    def __init__(self, nodes: List[Node]) -> None:
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> 'Graph':
        order: List[Tensor] = []
        visited: set = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._ctx is not None:
                for parent in reversed(tensor._ctx.inputs):
                    if parent is not None and parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        ids: Dict[int, int] = {id(t): i for i, t in enumerate(order)}
        nodes = []
        for i, tensor in enumerate(order):
            ctx = tensor._ctx
            inputs = [] if ctx is None else [ids[id(p)] for p in ctx.inputs
                                             if p is not None and id(p) in ids]
            nodes.append(Node(id=i, op='leaf' if ctx is None else ctx.op, tensor=tensor, input_ids=inputs))
        return cls(nodes)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.dtype, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """
    Reverse-mode pass from a scalar ``loss``.

    Every leaf with ``requires_grad`` on a path to ``loss`` receives d loss / d leaf in
    ``.grad``; repeated calls and repeated uses of one tensor accumulate by summation.

    Raises:
        FogSegError: ``loss`` is not a scalar or does not require grad
    """
    if loss.size != 1:
        raise FogSegError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise FogSegError("backward called on a tensor that does not require grad")

    graph = Graph.from_output(loss)
    pending: Dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    }
    for node in reversed(graph.nodes):
        tensor = node.tensor
        upstream = pending.pop(id(tensor), None)
        if upstream is None:
            continue
        if tensor._ctx is None or tensor.retains_grad:
            _accumulate(tensor, upstream)
        if tensor._ctx is None:
            continue
        input_grads = tensor._ctx.backward(upstream)
        for parent, parent_grad in zip(tensor._ctx.inputs, input_grads):
            if parent is None or parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
