"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Every differentiable primitive is a
:class:`Function` subclass; applying one to tensors that require gradients
links the output back to its inputs, so the graph can be traced into a
:class:`ComputationRecord` and differentiated with :func:`backward`.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "creator", "parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.creator: Optional[Function] = None
        self.parents: Tuple[Tensor, ...] = ()
        self.name = name

    # -- basic info -------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar; the primitives live in ops.py ---------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        backward(trace(self), self, seed)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward`` on raw arrays (keyword arguments are
    static configuration) and ``backward`` returning one gradient per input,
    or ``None`` for inputs that need none.
    """

    def __init__(self, **kwargs):
        self.kwargs = kwargs
        self.needs = ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(**kwargs)
        fn.needs = tuple(t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors)))
        if _grad_enabled and any(fn.needs):
            out.requires_grad = True
            out.creator = fn
            out.parents = tensors
        return out


class ComputationRecord:
    """Topologically ordered nodes reachable from an output tensor."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def replay(self) -> None:
        """Recompute every non-leaf node from its parents, in order."""
        for node in self.nodes:
            if node.creator is not None:
                node.data = node.creator.forward(*(p.data for p in node.parents))


def trace(output: Tensor) -> ComputationRecord:
    order: List[Tensor] = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return ComputationRecord(order)


def backward(record: ComputationRecord, seed: Tensor, seed_grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(seed)/d(leaf) into ``leaf.grad`` for every leaf in ``record``."""
    if seed.size != 1 and seed_grad is None:
        raise UsageError(f"backward needs a scalar seed, got shape {seed.shape}")
    grads = {id(seed): np.ones_like(seed.data) if seed_grad is None else np.asarray(seed_grad, dtype=seed.dtype)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.creator is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = node.creator.backward(g)
        for parent, pg, need in zip(node.parents, in_grads, node.creator.needs):
            if not need or pg is None:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{type(node.creator).__name__} produced gradient {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def parameters_grad(params: Iterable[Tensor]) -> List[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
