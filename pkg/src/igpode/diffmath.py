"""Dense tensors on a reverse-mode autodiff tape.

Every differentiable quantity in igpode is a :class:`Tensor` living on a
:class:`Tape`.  Operations record a :class:`TapeNode` holding the forward value
and a closure mapping the output adjoint to input adjoints.  Node ids grow in
creation order, so a reverse sweep over ids is a valid topological order.

All values are 64-bit floats backed by numpy; the linear algebra kernels come
from scipy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable
from typing import Sequence
from typing import Union

import numpy as np
from scipy import linalg
from scipy import special

from igpode.errors import ContractError
from igpode.errors import DecompositionError
from igpode.errors import DimensionError
from igpode.errors import NonFiniteError

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-5
JITTER_ESCALATIONS = 3

Operand = Union["Tensor", np.ndarray, float, int]
Backward = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]


@dataclass
class TapeNode:
    """A recorded operation.

    :param id: position on the tape, strictly increasing in creation order
    :type id: int
    :param op: operation kind, e.g. ``"matmul"``
    :type op: str
    :param inputs: ids of the input nodes
    :type inputs: tuple[int, ...]
    :param value: cached forward value
    :type value: np.ndarray
    :param backward: local gradient rule, None for leaves and constants
    :type backward: Backward | None
    :param name: parameter name for trainable leaves
    :type name: str | None
    """

    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Backward | None = None
    name: str | None = None


class Tape:
    """Records operations for reverse-mode differentiation.

    A tape is single threaded.  Independent tapes may share read-only parameter
    arrays and run concurrently.

    :param audit: check every recorded value for NaN/Inf and fail loudly
    :type audit: bool
    :param record: when False nothing is stored and gradients are unavailable
    :type record: bool
    """

    def __init__(self, audit: bool = False, record: bool = True):
        self.audit = audit
        self.recording = record
        self.nodes: list[TapeNode] = []
        self.requires_grad: list[bool] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(
        self,
        op: str,
        inputs: Sequence[int],
        value,
        backward: Backward | None,
        requires_grad: bool,
        name: str | None = None,
    ) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if self.audit and not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"op '{op}' produced non-finite values at node {len(self.nodes)}",
            )
        if not self.recording:
            return Tensor(self, -1, value)

        node_id = len(self.nodes)
        self.nodes.append(
            TapeNode(
                node_id,
                op,
                tuple(inputs),
                value,
                backward if requires_grad else None,
                name,
            ),
        )
        self.requires_grad.append(requires_grad)
        return Tensor(self, node_id, value)

    def param(self, name: str, value) -> Tensor:
        """Adds a trainable leaf."""
        if name in self.params:
            raise ContractError(f"parameter '{name}' is already on the tape")
        tensor = self._push(
            "param",
            (),
            np.array(value, dtype=np.float64),
            None,
            requires_grad=self.recording,
            name=name,
        )
        if self.recording:
            self.params[name] = tensor.id
        return tensor

    def constant(self, value) -> Tensor:
        return self._push("const", (), value, None, requires_grad=False)

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        value,
        backward: Backward,
    ) -> Tensor:
        """Adds the result of ``op`` applied to ``inputs``."""
        for t in inputs:
            if t.tape is not self:
                raise ContractError(f"op '{op}' mixes tensors from different tapes")
        if not self.recording:
            return self._push(op, (), value, None, requires_grad=False)
        needs_grad = any(self.requires_grad[t.id] for t in inputs)
        return self._push(
            op,
            [t.id for t in inputs],
            value,
            backward,
            requires_grad=needs_grad,
        )


class Tensor:
    """A float64 array attached to a tape."""

    __slots__ = ("tape", "id", "value")
    __array_ufunc__ = None

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# --------------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------------


def _tape_of(*operands: Operand) -> Tape:
    for x in operands:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("at least one operand must be a Tensor")


def as_tensor(tape: Tape, x: Operand) -> Tensor:
    """Returns ``x`` as a tensor on ``tape``, lifting arrays to constants."""
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("operands live on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sums ``grad`` over the axes that broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return fn(a, b)
    except ValueError as e:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast",
        ) from e


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        item is None or item is Ellipsis or isinstance(item, (int, slice))
        for item in items
    )


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.value)))


def check_finite(t: Tensor, what: str) -> Tensor:
    """Raises :class:`NonFiniteError` if ``t`` holds a NaN or Inf."""
    if not is_finite(t):
        raise NonFiniteError(f"{what} is not finite")
    return t


def make_rng(seed: int | None = None) -> np.random.Generator:
    """Creates the seedable generator used for every random draw."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws; fixed seeds give bit-identical streams."""
    return rng.standard_normal(shape)


# --------------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting, including over leading axes)
# --------------------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    tape = _tape_of(a, b)
    a, b = as_tensor(tape, a), as_tensor(tape, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape.record("add", (a, b), _broadcast("add", np.add, av, bv), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    tape = _tape_of(a, b)
    a, b = as_tensor(tape, a), as_tensor(tape, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape.record(
        "sub",
        (a, b),
        _broadcast("sub", np.subtract, av, bv),
        backward,
    )


def mul(a: Operand, b: Operand) -> Tensor:
    tape = _tape_of(a, b)
    a, b = as_tensor(tape, a), as_tensor(tape, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape.record(
        "mul",
        (a, b),
        _broadcast("mul", np.multiply, av, bv),
        backward,
    )


def div(a: Operand, b: Operand) -> Tensor:
    tape = _tape_of(a, b)
    a, b = as_tensor(tape, a), as_tensor(tape, b)
    av, bv = a.value, b.value

    def backward(g):
        return (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return tape.record(
        "div",
        (a, b),
        _broadcast("div", np.divide, av, bv),
        backward,
    )


def neg(a: Tensor) -> Tensor:
    return a.tape.record("neg", (a,), -a.value, lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    av = a.value

    def backward(g):
        return (g * exponent * av ** (exponent - 1),)

    return a.tape.record("power", (a,), av**exponent, backward)


# --------------------------------------------------------------------------------
# Elementwise functions
# --------------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return a.tape.record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return a.tape.record("log", (a,), np.log(av), lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return a.tape.record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return a.tape.record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.value)
    return a.tape.record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    av = a.value
    return a.tape.record(
        "softplus",
        (a,),
        np.logaddexp(0.0, av),
        lambda g: (g * special.expit(av),),
    )


def relu(a: Tensor) -> Tensor:
    av = a.value
    return a.tape.record(
        "relu",
        (a,),
        np.maximum(av, 0.0),
        lambda g: (g * (av > 0.0),),
    )


def elu(a: Tensor) -> Tensor:
    av = a.value
    out = np.where(av > 0.0, av, np.expm1(np.minimum(av, 0.0)))
    return a.tape.record(
        "elu",
        (a,),
        out,
        lambda g: (g * np.where(av > 0.0, 1.0, out + 1.0),),
    )


def cos(a: Tensor) -> Tensor:
    av = a.value
    return a.tape.record("cos", (a,), np.cos(av), lambda g: (-g * np.sin(av),))


def sin(a: Tensor) -> Tensor:
    av = a.value
    return a.tape.record("sin", (a,), np.sin(av), lambda g: (g * np.cos(av),))


# --------------------------------------------------------------------------------
# Reductions and shape manipulation
# --------------------------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = a.value

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return a.tape.record(
        "sum",
        (a,),
        av.sum(axis=axis, keepdims=keepdims),
        backward,
    )


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = reduce_sum(a, axis, keepdims)
    return total * (total.size / a.size) if a.size else total


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    av = a.value
    try:
        value = av.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {av.shape} into {shape}") from e
    return a.tape.record("reshape", (a,), value, lambda g: (g.reshape(av.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)
    return a.tape.record(
        "transpose",
        (a,),
        np.transpose(a.value, axes),
        lambda g: (np.transpose(g, inverse),),
    )


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*tensors)
    tensors = [as_tensor(tape, t) for t in tensors]
    values = [t.value for t in tensors]
    try:
        value = np.concatenate(values, axis=axis)
    except ValueError as e:
        raise DimensionError(
            f"concat: incompatible shapes {[v.shape for v in values]}",
        ) from e
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record("concat", tensors, value, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*tensors)
    tensors = [as_tensor(tape, t) for t in tensors]
    try:
        value = np.stack([t.value for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError("stack: tensors must share a shape") from e

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return tape.record("stack", tensors, value, backward)


def getitem(a: Tensor, index) -> Tensor:
    """Slices ``a``; integer arrays select with repetition allowed."""
    av = a.value
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(av)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return a.tape.record("getitem", (a,), av[index], backward)


def take(a: Tensor, indices, axis: int) -> Tensor:
    axis = axis % a.ndim
    index = (slice(None),) * axis + (np.asarray(indices, dtype=np.intp),)
    return getitem(a, index)


def diagonal(a: Tensor) -> Tensor:
    av = a.value
    if av.ndim != 2:
        raise DimensionError(f"diagonal expects a matrix, got shape {av.shape}")
    return a.tape.record(
        "diagonal", (a,), np.diagonal(av).copy(), lambda g: (np.diag(g),)
    )


# --------------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product, broadcasting over leading axes."""
    tape = _tape_of(a, b)
    a, b = as_tensor(tape, a), as_tensor(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(
            f"matmul needs at least two axes, got {av.shape} and {bv.shape}",
        )
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {av.shape} x {bv.shape}",
        )

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    value = _broadcast("matmul", np.matmul, av, bv)
    return tape.record("matmul", (a, b), value, backward)


def cholesky(a: Tensor, jitter: float = DEFAULT_JITTER) -> Tensor:
    """Lower Cholesky factor of ``a + jitter * I``.

    When the factorisation fails the jitter is escalated by a factor of ten, at
    most :data:`JITTER_ESCALATIONS` times, starting from :data:`DEFAULT_JITTER`.

    :param a: symmetric matrix
    :type a: Tensor
    :param jitter: non-negative diagonal offset
    :type jitter: float
    :raises DecompositionError: the matrix is not positive definite
    :return: lower-triangular factor
    :rtype: Tensor
    """
    av = a.value
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise DimensionError(f"cholesky expects a square matrix, got {av.shape}")
    if jitter < 0:
        raise ContractError(f"jitter must be non-negative, got {jitter}")
    if not np.all(np.isfinite(av)):
        raise NonFiniteError("cholesky input is not finite")

    n = av.shape[0]
    eye = np.eye(n)
    base = max(jitter, DEFAULT_JITTER)
    attempts = [jitter] + [base * 10**k for k in range(1, JITTER_ESCALATIONS + 1)]
    for attempt, level in enumerate(attempts):
        try:
            lv = linalg.cholesky(av + level * eye, lower=True)
            break
        except linalg.LinAlgError:
            continue
    else:
        raise DecompositionError(
            f"matrix of size {n} is not positive definite "
            f"with jitter {attempts[-1]:.0e}",
        )
    if attempt > 0:
        logger.warning(f"cholesky escalated jitter to {level:.0e}")

    def backward(g):
        phi = np.tril(lv.T @ g)
        phi[np.diag_indices(n)] *= 0.5
        x = linalg.solve_triangular(lv, phi, trans="T", lower=True)
        abar = linalg.solve_triangular(lv, x.T, trans="T", lower=True).T
        return (0.5 * (abar + abar.T),)

    return a.tape.record("cholesky", (a,), lv, backward)


def solve_triangular(l: Tensor, b: Operand, lower: bool = True) -> Tensor:
    """Solves ``l @ x = b`` for triangular ``l``."""
    tape = l.tape
    b = as_tensor(tape, b)
    lv, bv = l.value, b.value
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1]:
        raise DimensionError(f"triangular factor must be square, got {lv.shape}")
    if bv.ndim not in (1, 2) or bv.shape[0] != lv.shape[0]:
        raise DimensionError(
            f"right-hand side {bv.shape} does not match factor {lv.shape}",
        )
    xv = linalg.solve_triangular(lv, bv, lower=lower)

    def backward(g):
        gb = linalg.solve_triangular(lv, g, lower=lower, trans="T")
        outer = np.outer(gb, xv) if bv.ndim == 1 else gb @ xv.T
        gl = -(np.tril(outer) if lower else np.triu(outer))
        return gl, gb

    return tape.record("solve_triangular", (l, b), xv, backward)


# --------------------------------------------------------------------------------
# Reverse sweep
# --------------------------------------------------------------------------------


def grad(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every parameter on ``tape``.

    Parameters the loss does not depend on get zero gradients, so the returned
    key set always equals the tape's parameter names.

    :raises ContractError: the loss is not a scalar or the tape is not recording
    """
    if loss.tape is not tape:
        raise ContractError("loss does not live on this tape")
    if not tape.recording:
        raise ContractError("gradients need a recording tape")
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")

    adjoints: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    result = {
        name: np.zeros_like(tape.nodes[node_id].value)
        for name, node_id in tape.params.items()
    }
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = adjoints.pop(node.id, None)
        if g is None:
            continue
        if node.name is not None:
            result[node.name] = np.array(g, dtype=np.float64)
            continue
        if node.backward is None:
            continue
        for input_id, input_grad in zip(node.inputs, node.backward(g)):
            if input_grad is None or not tape.requires_grad[input_id]:
                continue
            if input_id in adjoints:
                adjoints[input_id] = adjoints[input_id] + input_grad
            else:
                adjoints[input_id] = input_grad
    return result
