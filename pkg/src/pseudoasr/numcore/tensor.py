"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a :class:`Function` subclass with a numpy
``forward`` and a ``backward`` that maps the output gradient to one gradient
per input. Graphs are recorded dynamically: an op called on at least one
tracked tensor (``requires_grad=True``) links its output to its inputs, and
:meth:`Tensor.backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Any, Iterable, Sequence

import numpy as np

# 64-bit by default; PSEUDOASR_DTYPE=float32 switches the build to single precision.
DEFAULT_DTYPE = np.dtype(os.environ.get("PSEUDOASR_DTYPE", "float64"))


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes: Sequence[int], detail: str = ""):
        shp = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {shp}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]


class GraphError(RuntimeError):
    """Backward called on something that is not a recorded scalar."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.records: list[ComputationRecord] = []


_state = _State()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    # numpy should defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: tuple[Function, tuple[Tensor, ...]] | None = None
        self.name = name

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if self.size != 1 and grad is None:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            raise GraphError("loss is detached from any recorded graph")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        _run_backward(self, seed)

    # -- operators --------------------------------------------------------
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
        if isinstance(other, Tensor):
            return ops.mul(self, ops.reciprocal(other))
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


class Function:
    """A differentiable primitive. Subclasses define ``forward`` and ``backward``."""

    name = "op"

    def __init__(self, **kwargs: Any):
        self.kwargs = kwargs

    def forward(self, *xs: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> tuple[np.ndarray | None, ...]:  # pragma: no cover
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(**kwargs)
        out = fn.forward(*(t.data for t in tensors))
        track = _state.grad_enabled and any(t.requires_grad for t in tensors)
        res = Tensor(out, requires_grad=track)
        if track:
            res._node = (fn, tensors)
            for rec in _state.records:
                rec._append(cls, kwargs, tensors, res)
        return res


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            for parent in t._node[1]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _run_backward(root: Tensor, seed: np.ndarray) -> None:
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            else:
                t.grad = t.grad + g
            continue
        fn, parents = t._node
        pgrads = fn.backward(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{fn.name}.backward", pg.shape, p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class ComputationRecord:
    """Ordered log of the tracked primitives executed inside a ``with`` block.

    ``replay`` re-executes the same primitives on fresh numpy values for the
    leaves (anything not produced inside the record) and returns the arrays
    of every recorded output, in order.
    """

    def __init__(self) -> None:
        self.entries: list[tuple[type[Function], dict, tuple[Tensor, ...], Tensor]] = []

    def _append(self, cls, kwargs, inputs, output) -> None:
        self.entries.append((cls, kwargs, inputs, output))

    def __enter__(self) -> ComputationRecord:
        _state.records.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.records.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def op_names(self) -> list[str]:
        return [cls.name for cls, *_ in self.entries]

    def replay(self, feed: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute all outputs. ``feed`` maps ``id(leaf)`` to replacement values."""
        values: dict[int, np.ndarray] = dict(feed or {})
        outs = []
        for cls, kwargs, inputs, output in self.entries:
            arrays = [values.get(id(t), t.data) for t in inputs]
            val = cls(**kwargs).forward(*arrays)
            values[id(output)] = val
            outs.append(val)
        return outs
