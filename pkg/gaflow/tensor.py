""" Dense tensors with tape-based reverse-mode differentiation.

A Tensor wraps a contiguous numpy buffer. Every differentiable operation
executed while gradients are enabled appends a record to the active
Tape; backward() replays the records in exact reverse order, pushing
adjoints from the loss towards the leaves. Leaf tensors accumulate (+=)
into their .grad buffer, so two backward passes without zeroing double
every gradient.

Operations recorded outside a ``with Tape()`` block go to a default tape
that backward() empties once it has been replayed.

Image tensors use the channels-first layout, C x H x W, with a leading
batch axis (N x C x H x W) inside the networks.
"""
from __future__ import annotations

import contextlib
import logging
import typing

import numpy as np

from .errors import ContractError, DimensionError

PRECISIONS: dict[str, type] = dict(float32=np.float32, float64=np.float64)

_default_dtype: type = np.float32
_grad_enabled: bool = True


def get_default_dtype() -> type:
    return _default_dtype


def set_precision(name: str) -> None:
    global _default_dtype
    try:
        _default_dtype = PRECISIONS[name]
    except KeyError:
        raise ContractError(f"Unknown precision {name!r}; expected one of {sorted(PRECISIONS)}.")


@contextlib.contextmanager
def precision(name: str):
    """ Temporarily switch the dtype used for newly created tensors. """
    global _default_dtype
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Record(object):
    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op: str, output: Tensor, inputs: tuple, backward_fn: typing.Callable):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape(object):
    """ Ordered record of the operations executed on tensors requiring grad.

    A Tape is also a context manager; inside a ``with Tape() as tape:``
    block the tape is the active one.
    """
    def __init__(self):
        self.records: list[Record] = []

    def record(self, op: str, output: Tensor, inputs: tuple, backward_fn: typing.Callable) -> None:
        self.records.append(Record(op, output, inputs, backward_fn))

    def clear(self) -> None:
        for r in self.records:
            r.output._tape = None
        self.records = []

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> Tape:
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()


_tape_stack: list[Tape] = [Tape()]


def active_tape() -> Tape:
    return _tape_stack[-1]


class Tensor(object):
    """ N-dimensional array with an optional gradient.

    Parameters
    ----------
    data : array_like
        values; copied into a contiguous buffer of the requested dtype
    requires_grad : bool
        whether backward() should populate .grad for this tensor
    name : str
        optional name, used for checkpoints and diagnostics
    dtype : numpy dtype or None
        defaults to the current precision
    """
    # numpy defers binary operators to Tensor
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        self.data: np.ndarray = np.ascontiguousarray(np.asarray(data, dtype=dtype or _default_dtype))
        self.requires_grad: bool = requires_grad
        self.grad: np.ndarray | None = None
        self.name: str = name
        self.is_leaf: bool = True
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        name = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{name}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # Arithmetic operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def make_result(op: str, data: np.ndarray, inputs: tuple, backward_fn: typing.Callable) -> Tensor:
    """ Wrap the result of an operation and record it on the active tape.

    backward_fn receives the adjoint of the output and returns one
    adjoint (or None) per input, in input order.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape = active_tape()
        tape.record(op, out, inputs, backward_fn)
        out._tape = tape
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """ Sum an adjoint over the axes along which its input was broadcast. """
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    a = as_tensor(a, like)
    b = as_tensor(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"Operands with shapes {a.shape} and {b.shape} cannot be combined.")
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("mul", a.data * b.data, (a, b),
                       lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_result("div", out, (a, b),
                       lambda g: (unbroadcast(g / b.data, a.shape),
                                  unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return make_result("square", a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g / (2 * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a: Tensor) -> Tensor:
    return make_result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,),
                       lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope).astype(a.dtype)
    return make_result("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return make_result("clamp_min", np.where(mask, a.data, floor).astype(a.dtype), (a,),
                       lambda g: (g * mask,))


def smooth_l1(a: Tensor, delta: float = 1.0) -> Tensor:
    """ Elementwise Huber function: 0.5 x^2 / delta below delta, |x| - 0.5 delta above. """
    x = a.data
    small = np.abs(x) < delta
    out = np.where(small, 0.5 * x * x / delta, np.abs(x) - 0.5 * delta).astype(a.dtype)
    return make_result("smooth_l1", out, (a,),
                       lambda g: (g * np.where(small, x / delta, np.sign(x)).astype(a.dtype),))


def channel_axis(a: Tensor) -> int:
    if a.ndim < 3:
        raise DimensionError(f"Expected a C x H x W or N x C x H x W tensor, got shape {a.shape}.")
    return a.ndim - 3


def softmax(a: Tensor, axis: int | None = None) -> Tensor:
    """ Softmax over the channel axis (or an explicit axis). """
    if axis is None:
        axis = channel_axis(a)
    if a.shape[axis] < 1:
        raise DimensionError("softmax requires at least one channel.")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_result("softmax", out, (a,), backward_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)
    return make_result("sum", out, (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype),)
    return make_result("mean", out, (a,), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    """ Basic (slice/integer) indexing; the result does not alias the input. """
    out = np.array(a.data[index])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return make_result("getitem", out, (a,), backward_fn)


def concat(tensors: typing.Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise DimensionError(f"Cannot concatenate rank {t.ndim} with rank {len(ref)}.")
        for i, (m, n) in enumerate(zip(ref, t.shape)):
            if i != axis % len(ref) and m != n:
                raise DimensionError(f"Concatenation along axis {axis}: extent mismatch on axis {i} ({m} vs {n}).")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return make_result("concat", out, tuple(tensors), backward_fn)


def concat_channels(tensors: typing.Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=channel_axis(tensors[0]))


def split_channels(a: Tensor, sizes: typing.Sequence[int]) -> list[Tensor]:
    axis = channel_axis(a)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"Channel split {tuple(sizes)} does not match {a.shape[axis]} channels.")
    parts = []
    start = 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        parts.append(getitem(a, tuple(index)))
        start += n
    return parts


def backward(loss: Tensor) -> None:
    """ Replay the tape of loss in reverse, accumulating into leaf grads. """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}.")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that does not require grad.")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    tape = loss._tape
    if tape is None:
        raise ContractError("backward() called on a tensor whose tape has been cleared.")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for r in reversed(tape.records):
        g = adjoints.pop(id(r.output), None)
        if g is None:
            for t in r.inputs:
                if t.is_leaf and t.requires_grad:
                    leaves.setdefault(id(t), t)
            continue
        grads = r.backward_fn(g)
        for t, gt in zip(r.inputs, grads):
            if not t.requires_grad:
                continue
            if t.is_leaf:
                leaves.setdefault(id(t), t)
            if gt is None:
                continue
            key = id(t)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gt
            else:
                adjoints[key] = np.asarray(gt, dtype=t.dtype)

    for key, t in leaves.items():
        g = adjoints.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.astype(t.dtype) if t.grad is None else t.grad + g
    logger.debug(f"backward(): replayed {len(tape)} records, {len(leaves)} leaves.")
    if tape is _tape_stack[0]:
        tape.clear()


logger = logging.getLogger(__name__)
