"""Tensor type, graph recording and the reverse-mode backward pass.

Every op's backward is itself written with differentiable ops, so with
``create_graph=True`` the returned gradients are ordinary graph nodes and can
be differentiated again.
"""
from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnsupportedOpError(AutodiffError):
    """Raised when a graph needs a derivative an op does not provide."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.graphs: list[Graph] = []


_state = _State()
_ids = itertools.count()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def set_grad_enabled(mode: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = mode
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


# ---------------------------------------------------------------------------
# graph recording


@dataclass(frozen=True)
class NodeRecord:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    value: np.ndarray | None = None  # leaves only


class Graph:
    """Insertion-ordered record of every tensor created while active.

    Used as a context manager. Insertion order is a topological order, so a
    recorded graph can be re-evaluated with :func:`forward_eval`.
    """

    def __init__(self):
        self.nodes: list[NodeRecord] = []
        self.outputs: dict[str, int] = {}

    def __enter__(self) -> Graph:
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc):
        _state.graphs.pop()

    def _add(self, rec: NodeRecord) -> int:
        self.nodes.append(rec)
        return len(self.nodes) - 1

    def input(self, name: str, value, requires_grad: bool = False) -> Tensor:
        if self is not _active_graph():
            raise AutodiffError("Graph.input called outside the graph context")
        return Tensor(value, requires_grad=requires_grad, name=name)

    def mark_output(self, name: str, t: Tensor) -> None:
        if t.graph is not self:
            raise AutodiffError(f"output {name!r} was not recorded in this graph")
        self.outputs[name] = t.node_id

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "leaf" and n.name is not None]

    def __len__(self):
        return len(self.nodes)


def _active_graph() -> Graph | None:
    return _state.graphs[-1] if _state.graphs else None


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """An n-dimensional float64 array that participates in autodiff."""

    __slots__ = ("data", "requires_grad", "fn", "node_id", "graph", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _fn=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and not all(s > 0 for s in arr.shape):
            raise ShapeError("tensor", [arr.shape], "extents must be positive")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.fn = _fn
        self.name = name
        g = _active_graph()
        self.graph = g
        if g is None:
            self.node_id = next(_ids)
        elif _fn is None:
            self.node_id = g._add(NodeRecord("leaf", (), arr.shape, name=name, value=arr.copy()))
        else:
            self.node_id = g._add(
                NodeRecord(
                    _fn.op_name,
                    tuple(t.node_id if t.graph is g else -1 for t in _fn.inputs),
                    arr.shape,
                    dict(_fn.attrs),
                )
            )

    # -- basic properties
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self):
        return self.shape[0]

    # -- operators (implemented in ops, bound at import time)
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().pow(self, p)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return _ops().max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# functions

_REGISTRY: dict[str, type[Function]] = {}


class Function:
    """Base class for a differentiable primitive.

    ``forward`` works on numpy arrays. ``backward`` receives the upstream
    gradient as a Tensor and must return one Tensor (or None for "no
    gradient") per input, built from Tensor ops so it can be differentiated
    again.
    """

    op_name = "function"
    # whether backward may run with create_graph=True
    second_order = True

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        _REGISTRY[cls.op_name] = cls

    def __init__(self, **attrs):
        self.attrs = attrs
        self.inputs: tuple[Tensor, ...] = ()
        self._out = None
        self._needs: tuple[bool, ...] | None = None

    @property
    def output(self) -> Tensor:
        out = self._out() if self._out is not None else None
        if out is None:
            raise AutodiffError(f"{self.op_name}: output tensor no longer alive")
        return out

    def needs(self, i: int) -> bool:
        """Whether input ``i`` needs a gradient in the current backward pass."""
        if self._needs is not None:
            return self._needs[i]
        return self.inputs[i].requires_grad

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        fn = cls(**attrs)
        tensors = tuple(as_tensor(t) for t in inputs)
        arrays = [t.data for t in tensors]
        try:
            out = fn.forward(*arrays)
        except ShapeError:
            raise
        except ValueError as e:
            raise ShapeError(cls.op_name, [a.shape for a in arrays], str(e)) from None
        requires = _state.grad_enabled and any(t.requires_grad for t in tensors)
        fn.inputs = tensors
        if requires or _active_graph() is not None:
            t = Tensor(out, requires_grad=requires, _fn=fn)
            if not requires:
                t.fn = None
        else:
            t = Tensor(out)
        fn._out = weakref.ref(t)
        return t


def get_function(op: str) -> type[Function]:
    return _REGISTRY[op]


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
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
        if node.fn is not None:
            for p in node.fn.inputs:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor] | Tensor,
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the results are graph nodes (second-order
    capable). Tensors not connected to ``output`` get zero gradients.
    """
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    for w in wrt_list:
        if not isinstance(w, Tensor) or not w.requires_grad:
            raise AutodiffError("every wrt tensor must be a graph tensor with requires_grad=True")
    if grad_output is None:
        if output.size != 1:
            raise AutodiffError(f"output must be scalar, got shape {output.shape}")
        grad_output = Tensor(np.ones_like(output.data))
    elif grad_output.shape != output.shape:
        raise ShapeError("grad", [output.shape, grad_output.shape], "grad_output shape")

    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = grad_output
        wanted = {id(w) for w in wrt_list}
        order = _toposort(output)
        # keep only nodes from which some wrt tensor is reachable
        relevant: set[int] = set()
        for node in order:
            if id(node) in wanted or (
                node.fn is not None and any(id(p) in relevant for p in node.fn.inputs)
            ):
                relevant.add(id(node))
        with set_grad_enabled(create_graph):
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None or node.fn is None:
                    continue
                fn = node.fn
                if create_graph and not fn.second_order:
                    raise UnsupportedOpError(
                        f"op '{fn.op_name}' has no registered second derivative"
                    )
                fn._needs = tuple(id(p) in relevant for p in fn.inputs)
                try:
                    in_grads = fn.backward(g)
                finally:
                    fn._needs = None
                for parent, pg in zip(fn.inputs, in_grads):
                    if pg is None or id(parent) not in relevant:
                        continue
                    if pg.shape != parent.shape:
                        raise ShapeError(fn.op_name + ".backward", [parent.shape, pg.shape])
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
                if id(node) not in wanted:
                    del grads[id(node)]

    out = []
    for w in wrt_list:
        g = grads.get(id(w))
        out.append(Tensor(np.zeros_like(w.data)) if g is None else g)
    return out


def backward_grad(output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Differentiable gradients of a scalar output (``create_graph=True``)."""
    return grad(output, wrt, create_graph=True)


def second_order_grad(output: Tensor, wrt1: Tensor, wrt2: Tensor) -> Tensor:
    """Mixed second derivative block d/d(wrt2) of d(output)/d(wrt1).

    The result has shape ``wrt1.shape + wrt2.shape``.
    """
    (g1,) = grad(output, [wrt1], create_graph=True)
    flat = _ops().reshape(g1, (g1.size,))
    rows = []
    for i in range(g1.size):
        e = np.zeros(g1.size)
        e[i] = 1.0
        gi = _ops().sum(flat * Tensor(e))
        if gi.requires_grad:
            (h,) = grad(gi, [wrt2])
            rows.append(h.data)
        else:
            rows.append(np.zeros_like(wrt2.data))
    return Tensor(np.stack(rows).reshape(wrt1.shape + wrt2.shape))


def forward_eval(graph: Graph, inputs: dict[str, Any] | None = None) -> dict[str, Tensor]:
    """Re-evaluate a recorded graph, overriding named leaves with ``inputs``.

    Returns the tensors registered with :meth:`Graph.mark_output`.
    """
    inputs = dict(inputs or {})
    names = set(graph.input_names)
    unknown = set(inputs) - names
    if unknown:
        raise AutodiffError(f"unknown graph inputs: {sorted(unknown)}")
    vals: list[np.ndarray] = []
    for rec in graph.nodes:
        if rec.op == "leaf":
            if rec.name is not None and rec.name in inputs:
                v = np.asarray(as_tensor(inputs[rec.name]).data, dtype=DTYPE)
                if v.shape != rec.shape:
                    raise ShapeError(f"input '{rec.name}'", [rec.shape, v.shape])
            else:
                v = rec.value
            vals.append(v)
            continue
        if any(i < 0 for i in rec.inputs):
            raise AutodiffError(f"{rec.op}: operand recorded outside this graph")
        fn = get_function(rec.op)(**rec.attrs)
        args = [vals[i] for i in rec.inputs]
        try:
            vals.append(np.asarray(fn.forward(*args), dtype=DTYPE))
        except ShapeError:
            raise
        except ValueError as e:
            raise ShapeError(rec.op, [a.shape for a in args], str(e)) from None
    return {name: Tensor(vals[i]) for name, i in graph.outputs.items()}
