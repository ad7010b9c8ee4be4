"""
Dense float64 tensors with reverse-mode differentiation.

Every computation in the captioner is written against the Tensor
class in this module. Operations record themselves on a dynamic tape
whenever one of their inputs requires gradients, and backward() on a
scalar result walks that tape in reverse topological order exactly
once.

Typical Usage:

>>> from r3_captioner.tensor import Tensor, matmul
>>> a = Tensor([[1.0, 2.0]], requires_grad=True)
>>> loss = matmul(a, Tensor([[3.0], [4.0]])).sum()
>>> loss.backward()
>>> a.grad
array([[3., 4.]])
"""

from typing import Callable, Optional, Sequence, Union
from contextlib import contextmanager
import threading
import logging

import numpy as np

from r3_captioner.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    RangeError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """
    Returns whether operations currently record onto the tape.
    """

    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """
    Context manager that stops operations from recording a graph.
    Used by generation and by the finite-difference checks.
    """

    previous = is_grad_enabled()
    _grad_state.enabled = False

    try:
        yield
    finally:
        _grad_state.enabled = previous


class Node:
    """
    One entry of the gradient tape.

    Args:
        op: Name of the operation that produced the output
        inputs: Tensors the operation read
        adjoint: Maps the output gradient to one gradient per input
            (None where an input receives nothing)
    """

    __slots__ = ("op", "inputs", "adjoint", "consumed")

    def __init__(self, op: str, inputs: tuple, adjoint: Callable):
        self.op = op
        self.inputs = inputs
        self.adjoint = adjoint
        self.consumed = False


class Tensor:
    """
    A dense row-major float64 array with an optional gradient
    buffer and an optional reference into the computation graph.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        """
        Copies data into a float64 buffer.

        Args:
            data: Nested sequence, scalar or numpy array
            requires_grad: Whether backward() should populate grad
        """

        if isinstance(data, Tensor):
            data = data.data

        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """
        Wraps an already float64 array without copying it.
        """

        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out.node = None
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def backward(self):
        """
        Populates grad on every requires-grad leaf reachable from
        this scalar. A leaf still holding the gradient of an earlier
        backward() must be reset with zero_grad() first, and running
        backward twice over the same graph is an error.
        """

        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )

        if self.node is None:
            raise ContractError("backward() called on a tensor without a graph")

        if self.node.consumed:
            raise ContractError(
                "backward() already ran on this graph; rebuild the forward pass"
            )

        order = _topological_order(self)
        stale = [t for t in order if t.node is None and t.requires_grad and t.grad is not None]

        if stale:
            raise ContractError(
                f"{len(stale)} leaf tensor(s) still hold gradients from an earlier "
                "backward(); call zero_grad() first"
            )

        pending = {id(self): np.ones_like(self.data)}

        for tensor in reversed(order):
            grad = pending.pop(id(tensor), None)

            if tensor.node is None:
                if tensor.requires_grad:
                    if grad is None:
                        grad = np.zeros_like(tensor.data)
                    tensor.grad = grad.copy()
                continue

            tensor.node.consumed = True

            if grad is None:
                continue

            for source, source_grad in zip(tensor.node.inputs, tensor.node.adjoint(grad)):
                if source_grad is None or not source.requires_grad:
                    continue

                key = id(source)
                pending[key] = source_grad if key not in pending else pending[key] + source_grad

    # Operator sugar; the functional forms below are the real API.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("Division is only defined by a scalar constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mul(tensor_sum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    """
    Iterative depth-first ordering of every tensor feeding root.
    """

    order = []
    visited = set()
    stack = [(root, False)]

    while stack:
        tensor, expanded = stack.pop()

        if expanded:
            order.append(tensor)
            continue

        if id(tensor) in visited:
            continue

        visited.add(id(tensor))
        stack.append((tensor, True))

        if tensor.node is not None:
            for source in tensor.node.inputs:
                if id(source) not in visited:
                    stack.append((source, False))

    return order


def as_tensor(value: ArrayLike) -> Tensor:
    """
    Returns value unchanged if it is a Tensor, otherwise wraps it
    as a constant.
    """

    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data: np.ndarray, op: str, inputs: tuple, adjoint: Callable) -> Tensor:
    """
    Wraps data as the output of op and, when gradients are being
    tracked, attaches the tape entry.
    """

    out = Tensor._wrap(data)

    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, adjoint)

    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """
    Sums grad over the leading axes that broadcasting added.
    """

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    return grad.reshape(shape)


def _check_leading_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    """
    Allows equal shapes or one shape being a trailing suffix of the
    other, and returns the output shape.
    """

    longer, shorter = (a.shape, b.shape) if a.ndim >= b.ndim else (b.shape, a.shape)

    if shorter and longer[len(longer) - len(shorter):] != shorter:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")

    return longer


def elementwise(op: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Pointwise add, sub or mul with broadcasting over leading axes.

    Args:
        op: One of "add", "sub", "mul"
        a: Left operand
        b: Right operand

    Returns:
        Tensor of the broader operand's shape
    """

    a, b = as_tensor(a), as_tensor(b)
    _check_leading_broadcast(a, b, op)

    if op == "add":
        data = a.data + b.data

        def adjoint(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    elif op == "sub":
        data = a.data - b.data

        def adjoint(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    elif op == "mul":
        data = a.data * b.data

        def adjoint(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    else:
        raise ContractError(f"Unknown elementwise op {op!r}")

    return _record(data, op, (a, b), adjoint)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Elementwise a + b.

    Args:
        a: Tensor, array or scalar
        b: Tensor, array or scalar; its shape must be a suffix of
            a's shape or the other way round
    """

    return elementwise("add", a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Elementwise a - b, broadcast like add.

    Args:
        a: Tensor, array or scalar
        b: Tensor, array or scalar
    """

    return elementwise("sub", a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Elementwise (Hadamard) product, broadcast like add.

    Args:
        a: Tensor, array or scalar
        b: Tensor, array or scalar
    """

    return elementwise("mul", a, b)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes; leading axes of the
    shorter-rank operand must be a suffix of the other's.

    Args:
        a: Tensor[..., m, k]
        b: Tensor[..., k, n]

    Returns:
        Tensor[..., m, n]
    """

    a, b = as_tensor(a), as_tensor(b)

    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")

    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    longer, shorter = (lead_a, lead_b) if len(lead_a) >= len(lead_b) else (lead_b, lead_a)

    if shorter and longer[len(longer) - len(shorter):] != shorter:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")

    data = np.matmul(a.data, b.data)

    def adjoint(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record(data, "matmul", (a, b), adjoint)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """
    Sums over axis (all axes when None).
    """

    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(data, dtype=np.float64), "sum", (x,), adjoint)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    """
    Views x with a new shape holding the same number of elements.

    Args:
        x: Input tensor
        shape: Target shape

    Raises:
        DimensionError: The element counts differ
    """

    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}")

    data = x.data.reshape(shape)

    def adjoint(g):
        return (g.reshape(x.shape),)

    return _record(data, "reshape", (x,), adjoint)


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))

    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(x.data, axes))

    def adjoint(g):
        return (np.transpose(g, inverse),)

    return _record(data, "transpose", (x,), adjoint)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Numerically stable softmax along axis. Entries equal to -inf
    receive probability zero.
    """

    if np.isnan(x.data).any():
        raise NumericError("softmax: input contains NaN")

    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    data = exps / np.sum(exps, axis=axis, keepdims=True)

    def adjoint(g):
        return (data * (g - np.sum(g * data, axis=axis, keepdims=True)),)

    return _record(data, "softmax", (x,), adjoint)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def adjoint(g):
        return (g * (x.data > 0.0),)

    return _record(data, "relu", (x,), adjoint)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalizes over the last axis to zero mean and unit variance,
    then applies the affine gain and bias.

    Args:
        x: Tensor[..., d]
        gain: Tensor[d]
        bias: Tensor[d]
        eps: Added to the variance before the square root
    """

    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}"
        )

    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    data = normed * gain.data + bias.data

    def adjoint(g):
        g_normed = g * gain.data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grad_gain = _unbroadcast(g * normed, gain.shape)
        grad_bias = _unbroadcast(g, bias.shape)
        return grad_x, grad_gain, grad_bias

    return _record(data, "layer_norm", (x, gain, bias), adjoint)


def make_rng(seed) -> np.random.Generator:
    """
    Returns seed if it already is a Generator, otherwise seeds a new
    one from it.
    """

    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dropout(x: Tensor, rate: float, seed, training: bool) -> Tensor:
    """
    Inverted dropout. Zeroes each element with probability rate and
    scales survivors by 1/(1-rate); identity outside training.

    Args:
        x: Input tensor
        rate: Drop probability in [0, 1)
        seed: Integer seed or numpy Generator the mask is drawn from
        training: Whether dropout is active
    """

    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")

    if not training or rate == 0.0:
        return x

    keep = make_rng(seed).random(x.shape) >= rate
    return mul(x, Tensor._wrap(keep / (1.0 - rate)))


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """
    Gathers rows of table; the output has shape
    indices.shape + table.shape[1:]. Gradients scatter-add back
    into the selected rows.
    """

    indices = np.asarray(indices, dtype=np.int64)

    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise RangeError(
            f"take_rows: index outside [0, {table.shape[0]}) "
            f"(min {indices.min()}, max {indices.max()})"
        )

    data = table.data[indices]

    def adjoint(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return _record(data, "take_rows", (table,), adjoint)


def l2_normalize(x: Tensor) -> Tensor:
    """
    Scales every vector along the last axis to unit L2 norm. Rows
    with zero norm pass through unchanged.
    """

    norms = np.sqrt(np.sum(x.data**2, axis=-1, keepdims=True))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    data = np.where(zero, x.data, x.data / safe)

    def adjoint(g):
        projected = g - data * np.sum(g * data, axis=-1, keepdims=True)
        return (np.where(zero, g, projected / safe),)

    return _record(data, "l2_normalize", (x,), adjoint)


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """
    Emits value in the forward pass while passing the incoming
    gradient to x unchanged.
    """

    value = np.asarray(value, dtype=np.float64)

    if value.shape != x.shape:
        raise DimensionError(f"straight_through: {value.shape} vs {x.shape}")

    def adjoint(g):
        return (g,)

    return _record(value.copy(), "straight_through", (x,), adjoint)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """
    Weighted mean negative log-likelihood of integer targets.

    Args:
        logits: Tensor[..., V]
        targets: int array matching logits.shape[:-1]
        weights: float/bool array matching targets; zero entries
            are excluded from the mean
    """

    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)

    if targets.shape != logits.shape[:-1] or weights.shape != targets.shape:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, "
            f"weights {weights.shape}"
        )

    total = weights.sum()

    if total <= 0:
        raise ContractError("cross_entropy: no position carries weight")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    data = np.asarray(-(picked * weights).sum() / total)

    def adjoint(g):
        probs = np.exp(log_probs)
        np.put_along_axis(
            probs,
            targets[..., None],
            np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (probs * (weights / total)[..., None] * g,)

    return _record(data, "cross_entropy", (logits,), adjoint)


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4
) -> float:
    """
    Compares backward()'s gradient of f at x with central
    differences, coordinate by coordinate.

    Args:
        f: Deterministic function from x to a scalar Tensor
        x: Leaf tensor with requires_grad set; perturbed in place
            and restored afterwards
        eps: Finite-difference step

    Returns:
        max over coordinates of |a - b| / max(|a|, |b|, 1e-8)
    """

    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")

    x.requires_grad = True
    loss = f(x)

    # other leaves of f keep whatever gradient they held before
    leaves = [t for t in _topological_order(loss) if t.node is None and t.requires_grad]
    saved = {id(t): t.grad for t in [x, *leaves]}
    for leaf in [x, *leaves]:
        leaf.grad = None

    loss.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    for leaf in [x, *leaves]:
        leaf.grad = saved[id(leaf)]

    x.data = np.ascontiguousarray(x.data)
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)

    with no_grad():
        for i in range(flat.size):
            original = flat[i]

            flat[i] = original + eps
            upper = f(x).item()
            flat[i] = original - eps
            lower = f(x).item()
            flat[i] = original

            numeric.reshape(-1)[i] = (upper - lower) / (2.0 * eps)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    error = float(np.max(np.abs(analytic - numeric) / scale)) if x.size else 0.0

    logger.debug("finite_diff_check coordinates=%d max_rel_error=%.3e", x.size, error)

    return error
