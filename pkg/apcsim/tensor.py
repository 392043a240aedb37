"""
Dense tensors with tape-based reverse-mode differentiation.

A Tensor holds a float64 numpy array. Operations are `Function` subclasses: the
forward pass works on raw arrays and, when any input requires gradients, the
output keeps a reference to the function that created it. `backward(loss)` walks
that tape in reverse topological order and accumulates gradients into leaves.
"""

import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum a gradient over the axes that numpy broadcasting expanded.

    Args:
        grad: Gradient with the broadcast (output) shape
        shape: Shape of the operand that was broadcast

    Returns:
        Gradient reduced to `shape`
    """
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Function:
    """
    One node of the differentiation tape.

    Subclasses implement `forward` on numpy arrays and `backward`, which maps
    the gradient of the output to one gradient (or None) per input. Anything
    the backward rule needs is saved on the instance during `forward`.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward rule")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward rule")

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs) -> "Tensor":
        tensors = tuple(as_tensor(value) for value in inputs)
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


# Tape nodes are plain Function instances
TapeNode = Function


class Tensor:
    """
    A dense n-dimensional float64 array that can take part in differentiation.

    Intermediate tensors are never modified. Leaf parameters collect `grad`
    through `backward`, and only an optimizer step replaces their data.
    """

    # Make numpy defer to our reflected operators (ndarray * Tensor)
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, creator: Optional[Function] = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    # -- properties -----------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        from .functional import matmul
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants as non-differentiable tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(value: ArrayLike) -> Tensor:
    """Create a leaf tensor that collects gradients."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


# -- backward -----------------------------------------------------------------

def _topological_order(root: Tensor):
    # Iterative post-order: every tensor appears after all of its inputs
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Backpropagate a scalar loss to every leaf that requires gradients.

    Each tape node is visited exactly once, after all of its consumers, so a
    node's gradient is complete before it is pushed to its inputs.

    Args:
        loss: Scalar tensor produced by differentiable operations

    Raises:
        ContractError: If the loss is not a scalar
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        input_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = unbroadcast(np.asarray(parent_grad, dtype=np.float64), parent.shape)
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad


# -- elementwise ----------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


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


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Clamp(Function):
    def forward(self, a, lo=None, hi=None):
        self.mask = np.ones_like(a, dtype=bool)
        if lo is not None:
            self.mask &= a >= lo
        if hi is not None:
            self.mask &= a <= hi
        if lo is None and hi is None:
            return a.copy()
        return np.clip(a, lo, hi)

    def backward(self, grad):
        # gradient passes where the input was inside [lo, hi]
        return (grad * self.mask,)


class SteRound(Function):
    def forward(self, a):
        return round_half_away(a)

    def backward(self, grad):
        return (grad,)


# -- reductions and shape ------------------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes) if self.axes else grad
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[ax] for ax in self.axes])) if self.axes else 1
        return np.mean(a, axis=self.axes, keepdims=keepdims) if self.axes else a.copy()

    def backward(self, grad):
        if not self.keepdims and self.axes:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Max(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.a = a
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.out = np.max(a, axis=self.axes, keepdims=True)
        return self.out if keepdims else np.squeeze(self.out, axis=self.axes)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        # ties share the gradient evenly
        mask = (self.a == self.out).astype(np.float64)
        mask /= mask.sum(axis=self.axes, keepdims=True)
        return (grad * mask,)


class BroadcastTo(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (unbroadcast(grad, self.shape),)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


# -- functional wrappers -----------------------------------------------------------

def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return Sqrt.apply(a)


def relu(a) -> Tensor:
    return Relu.apply(a)


def clamp(a, lo=None, hi=None) -> Tensor:
    return Clamp.apply(a, lo=lo, hi=hi)


def ste_round(a) -> Tensor:
    """Round half away from zero in the forward pass, identity in the backward pass."""
    return SteRound.apply(a)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    return Max.apply(a, axis=axis, keepdims=keepdims)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        np.broadcast_shapes(a.shape, tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}")
    return BroadcastTo.apply(a, shape=tuple(shape))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    known = int(np.prod([s for s in shape if s != -1]))
    if (-1 not in shape and known != a.size) or (-1 in shape and (known == 0 or a.size % known)):
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return Reshape.apply(a, shape=shape)


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=axes)
