"""
Minimal reverse-mode differentiation over dense float64 arrays.

A graph is built freshly for every forward pass: leaves are created with :func:`parameter`
(gradient is tracked) or :func:`constant` (no gradient), every primitive returns a new
:class:`DiffNode`, and :func:`backward` accumulates ``d(root)/d(node)`` into ``node.grad``
for every reachable node that requires a gradient.
Gradients are available both for model parameters and for inputs, so the same graph
serves training steps and input perturbations.
"""
# This code is distributed under the MIT License

from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from odskd.exceptions import DomainError, ShapeError, UsageError

logger = logging.getLogger(__name__)

# floor applied before taking logarithms in losses
LOG_FLOOR = 1e-300

GradRule = Callable[[np.ndarray], np.ndarray]
Operand = Union["DiffNode", np.ndarray, float, int, Sequence[float]]


class DiffNode:
    """A node in a differentiable computation graph."""

    __slots__ = ("value", "grad", "parents", "requires_grad")

    value: np.ndarray
    """ The (float64) array held by this node. """

    grad: np.ndarray
    """ The accumulated gradient of the root with respect to :attr:`value`, same shape. """

    parents: List[Tuple[DiffNode, GradRule]]
    """ Parents that require a gradient, each with the rule that maps this node's gradient
    to the contribution for the parent. """

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Optional[List[Tuple[DiffNode, GradRule]]] = None,
    ):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = parents if parents is not None else []
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"DiffNode(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Operand) -> DiffNode:
        return add(self, other)

    def __radd__(self, other: Operand) -> DiffNode:
        return add(other, self)

    def __sub__(self, other: Operand) -> DiffNode:
        return add(self, scale(as_node(other), -1.0))

    def __rsub__(self, other: Operand) -> DiffNode:
        return add(other, scale(self, -1.0))

    def __neg__(self) -> DiffNode:
        return scale(self, -1.0)

    def __mul__(self, other: Operand) -> DiffNode:
        if np.isscalar(other):
            return scale(self, float(other))  # type: ignore[arg-type]
        return mul(self, other)

    def __rmul__(self, other: Operand) -> DiffNode:
        return self.__mul__(other)

    def __matmul__(self, other: Operand) -> DiffNode:
        return matmul(self, other)


def constant(value) -> DiffNode:
    """A leaf without gradient tracking."""
    return DiffNode(value, requires_grad=False)


def parameter(value) -> DiffNode:
    """A leaf whose gradient is accumulated by :func:`backward`."""
    return DiffNode(value, requires_grad=True)


def as_node(value: Operand) -> DiffNode:
    if isinstance(value, DiffNode):
        return value
    return constant(value)


def detach(node: DiffNode) -> DiffNode:
    """A constant copy of `node`; gradients do not flow through it."""
    return constant(node.value)


def _make(value: np.ndarray, *parents: Tuple[DiffNode, GradRule]) -> DiffNode:
    tracked = [(node, rule) for node, rule in parents if node.requires_grad]
    return DiffNode(value, requires_grad=len(tracked) > 0, parents=tracked)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: DiffNode, b: DiffNode, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(
            f"Cannot {op} arrays of shapes {a.shape} and {b.shape}"
        ) from e


def add(a: Operand, b: Operand) -> DiffNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> DiffNode:
    """Elementwise multiplication with numpy broadcasting."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "multiply")
    return _make(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Operand, factor: float) -> DiffNode:
    a = as_node(a)
    return _make(a.value * factor, (a, lambda g: g * factor))


def matmul(a: Operand, b: Operand) -> DiffNode:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply matrices of shapes {a.shape} and {b.shape}")
    return _make(
        a.value @ b.value,
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    )


def relu(a: Operand) -> DiffNode:
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


def log(a: Operand, floor: float = LOG_FLOOR) -> DiffNode:
    """Natural logarithm of ``max(a, floor)``. The clamped region has zero gradient."""
    a = as_node(a)
    inside = a.value > floor
    clamped = np.maximum(a.value, floor)
    return _make(np.log(clamped), (a, lambda g: np.where(inside, g / clamped, 0.0)))


def sum(a: Operand, axis: Optional[int] = None) -> DiffNode:  # pylint: disable=redefined-builtin
    a = as_node(a)

    def _rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make(np.sum(a.value, axis=axis), (a, _rule))


def mean(a: Operand, axis: Optional[int] = None) -> DiffNode:
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def take(a: Operand, index: int) -> DiffNode:
    """Selects row `index` of a 2-D node."""
    a = as_node(a)
    if not -a.shape[0] <= index < a.shape[0]:
        raise ShapeError(f"Row {index} out of range for shape {a.shape}")

    def _rule(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return full

    return _make(a.value[index], (a, _rule))


def onehot_dot(a: Operand, onehot: np.ndarray) -> DiffNode:
    """Row-wise dot product with a (constant) one-hot matrix, i.e. a gather along the last axis."""
    a = as_node(a)
    if a.shape != np.shape(onehot):
        raise ShapeError(f"Cannot gather shape {a.shape} with one-hot shape {np.shape(onehot)}")
    return sum(mul(a, constant(onehot)), axis=-1)


def softmax_row(z: Operand, temperature: float = 1.0) -> DiffNode:
    """
    Row-wise ``softmax(z / temperature)`` over the last axis, computed with max-subtraction.

    :raises DomainError: if `temperature` is not positive.
    """
    if not temperature > 0:
        raise DomainError(f"Softmax temperature must be positive, got {temperature}")
    z = as_node(z)
    probs = softmax(z.value / temperature, axis=-1)

    def _rule(g):
        inner = np.sum(g * probs, axis=-1, keepdims=True)
        return probs * (g - inner) / temperature

    return _make(probs, (z, _rule))


def _topological_order(root: DiffNode) -> List[DiffNode]:
    order: List[DiffNode] = []
    visited = set()
    stack: List[Tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: DiffNode):
    """
    Accumulates ``d(root)/d(node)`` into ``node.grad`` for every node reachable from `root`
    that requires a gradient. Each node is visited once, in reverse topological order.

    :param root: A node holding a single element.
    :raises UsageError: if `root` is not a scalar.
    """
    if root.value.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")

    root.grad = np.ones_like(root.value)
    for node in reversed(_topological_order(root)):
        for parent, rule in node.parents:
            parent.grad += rule(node.grad)
