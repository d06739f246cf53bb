"""Tensors, recorded graphs and the reverse-mode backward pass.

A :class:`Tensor` produced by an op keeps a :class:`Node` naming the op kind,
its inputs and a closure mapping the output gradient to input gradients.
:func:`backward` flattens the nodes reachable from a scalar output into a
:class:`Graph` (topological order, inputs before outputs) and walks it once in
reverse.

Grad mode and fault injection are thread-local, so independent graphs can be
built and differentiated on different threads.
"""
import contextlib
import logging
import threading

from dataclasses import dataclass
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    Iterator,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np
import numpy.typing as npt

from ssdepth.errors import ShapeError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.floating[Any]]
BackwardFn = Callable[[FloatArray], Sequence[Optional[FloatArray]]]
Scalar = Union[int, float]

DEFAULT_DTYPE = np.float64

# corrupted backward passes are scaled by this factor under inject_fault()
FAULT_SCALE = 1.5


class _State(threading.local):
    grad_enabled: bool = True
    faults: FrozenSet[str] = frozenset()


_state = _State()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def inject_fault(*kinds: str) -> Iterator[None]:
    """Corrupt the backward pass of the named op kinds (verification hook)."""
    previous = _state.faults
    _state.faults = previous | frozenset(kinds)
    try:
        yield
    finally:
        _state.faults = previous


class Node:
    kind: str
    inputs: Tuple['Tensor', ...]
    backward_fn: BackwardFn

    def __init__(self, kind: str, inputs: Sequence['Tensor'], backward_fn: BackwardFn):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    data: FloatArray
    requires_grad: bool
    node: Optional[Node]
    name: str

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[Any] = None,
        name: str = '',
    ):
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if np.issubdtype(array.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(array, dtype=dtype)
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> Any:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError('item', [self.shape], 'tensor is not scalar')
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        kind = self.node.kind if self.node is not None else 'leaf'
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={kind}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union['Tensor', Scalar]) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.add(self, other)

    def __radd__(self, other: Scalar) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.add(other, self)

    def __sub__(self, other: Union['Tensor', Scalar]) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.sub(self, other)

    def __rsub__(self, other: Scalar) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.sub(other, self)

    def __mul__(self, other: Union['Tensor', Scalar]) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.mul(self, other)

    def __rmul__(self, other: Scalar) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.mul(other, self)

    def __truediv__(self, other: Union['Tensor', Scalar]) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.div(self, other)

    def __rtruediv__(self, other: Scalar) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.div(other, self)

    def __neg__(self) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.neg(self)

    def __pow__(self, exponent: float) -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.pow(self, exponent)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        from ssdepth.diffcore import ops
        return ops.matmul(self, other)


def as_tensor(value: Union[Tensor, Scalar, FloatArray], dtype: Optional[Any] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


def constant(value: Any, like: Tensor) -> Tensor:
    """A non-differentiable tensor with the dtype of ``like``."""
    return Tensor(value, requires_grad=False, dtype=like.dtype)


def record(kind: str, data: FloatArray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, inputs, backward_fn)
    return out


@dataclass(frozen=True)
class GraphRecord:
    kind: str
    input_ids: Tuple[int, ...]
    output: Tensor


class Graph:
    """Nodes reachable from one output, inputs always before their consumers."""
    records: List[GraphRecord]
    _index: Dict[int, int]

    def __init__(self, records: List[GraphRecord]):
        self.records = records
        self._index = {id(r.output): i for i, r in enumerate(records)}

    @classmethod
    def trace(cls, output: Tensor) -> 'Graph':
        order: List[Tensor] = []
        visited: Set[int] = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            key = id(tensor)
            if expanded:
                if key not in visited:
                    visited.add(key)
                    order.append(tensor)
                continue
            if key in visited:
                continue
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in reversed(tensor.node.inputs):
                    if id(parent) not in visited and parent.requires_grad:
                        stack.append((parent, False))

        index = {id(t): i for i, t in enumerate(order)}
        records: List[GraphRecord] = []
        for tensor in order:
            if tensor.node is None:
                records.append(GraphRecord('leaf', (), tensor))
            else:
                ids = tuple(index[id(p)] if id(p) in index else -1 for p in tensor.node.inputs)
                records.append(GraphRecord(tensor.node.kind, ids, tensor))
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)

    def index_of(self, tensor: Tensor) -> Optional[int]:
        return self._index.get(id(tensor))

    def leaves(self) -> List[Tensor]:
        return [r.output for r in self.records if r.kind == 'leaf' and r.output.requires_grad]


class Gradients:
    """Gradient map keyed by node id, looked up by tensor.

    Leaves that the output does not depend on get zero gradients.
    """
    graph: Graph
    by_node: Dict[int, FloatArray]

    def __init__(self, graph: Graph, by_node: Dict[int, FloatArray]):
        self.graph = graph
        self.by_node = by_node

    def __getitem__(self, tensor: Tensor) -> FloatArray:
        index = self.graph.index_of(tensor)
        if index is None or index not in self.by_node:
            return np.zeros_like(tensor.data)
        return self.by_node[index]

    def __contains__(self, tensor: Tensor) -> bool:
        index = self.graph.index_of(tensor)
        return index is not None and index in self.by_node


def backward(output: Tensor) -> Gradients:
    if output.size != 1:
        raise ShapeError('backward', [output.shape], 'output must be a scalar')

    graph = Graph.trace(output)
    grads: Dict[int, FloatArray] = {len(graph) - 1: np.ones_like(output.data)}
    faults = _state.faults

    for position in range(len(graph) - 1, -1, -1):
        record_ = graph.records[position]
        grad = grads.get(position)
        node = record_.output.node
        if grad is None or node is None:
            continue
        input_grads = node.backward_fn(grad)
        if record_.kind in faults:
            input_grads = [None if g is None else g * FAULT_SCALE for g in input_grads]
        for parent_id, parent, g in zip(record_.input_ids, node.inputs, input_grads):
            if g is None or parent_id < 0 or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise ShapeError(f'{record_.kind}.backward', [g.shape, parent.data.shape])
            if parent_id in grads:
                grads[parent_id] = grads[parent_id] + g
            else:
                grads[parent_id] = g

    # only leaf gradients are kept
    leaf_grads = {i: g for i, g in grads.items() if graph.records[i].kind == 'leaf'}
    return Gradients(graph, leaf_grads)
