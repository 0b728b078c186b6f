"""Dense tensors with reverse-mode differentiation on an explicit tape.

The engine is deliberately small: it supports exactly the operations the
point-cloud networks need (batched matmul against a 2-d right operand,
elementwise arithmetic with numpy broadcasting, concatenation/slicing,
row gathering, the usual activations and normalisations, and axis
reductions).  Every operation records a backward closure on the active
:class:`Tape`; calling ``tape.backward(loss)`` walks the recorded nodes
in reverse, visiting each exactly once, and accumulates gradients into
leaf tensors.

Precision is caller-controlled: networks run in float32, gradient checks
run the same graph in float64.  Binary operations require both operands
to share a dtype so an accidental float64 upcast cannot hide in a run.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes (or dtypes) do not conform."""


class UninitializedStatsError(RuntimeError):
    """Batch-norm inference requested before any statistics exist."""


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of differentiable operations.

    Operations append themselves in execution order, which is a
    topological order by construction.  ``backward`` sweeps the record in
    reverse; an operation whose output never received a gradient (it does
    not feed the loss) is skipped.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self._produced: set[int] = set()
        self._prev: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward: Callable) -> None:
        self._nodes.append((out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: "Tensor", params: Optional[Iterable["Tensor"]] = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        ``loss`` must be a scalar.  Leaves listed in ``params`` that the
        loss does not reach get a zero gradient instead of ``None``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if id(loss) not in self._produced and loss.requires_grad:
            _accumulate_leaf(loss, grads[id(loss)])
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, grad in zip(inputs, backward_fn(g)):
                if grad is None or not tensor.requires_grad:
                    continue
                if id(tensor) in self._produced:
                    key = id(tensor)
                    if key in grads:
                        grads[key] = grads[key] + grad
                    else:
                        grads[key] = grad
                else:
                    _accumulate_leaf(tensor, grad)
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)


_ACTIVE_TAPE: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


class no_grad:
    """Context manager that suspends tape recording (e.g. frozen teacher)."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev


def _accumulate_leaf(tensor: "Tensor", grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = grad.astype(tensor.data.dtype, copy=True)
    else:
        tensor.grad = tensor.grad + grad


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """A dense multi-dimensional float array, optionally on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; all routed through the module-level ops
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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


class Parameter(Tensor):
    """A named learnable tensor; its gradient matches its value shape."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# Op plumbing


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, backward)
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    data = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = -_unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def _coerce_pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, op)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return a, b


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; the right operand must be 2-d, the left 1-d or more.

    Leading axes of the left operand are treated as batch dimensions,
    which covers every use in the networks (per-point affine maps, the
    adjacency product, stacked edge features).
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, "matmul")
    if b.data.ndim != 2:
        raise ShapeError(f"matmul: right operand must be 2-d, got shape {b.data.shape}")
    if a.data.ndim < 1:
        raise ShapeError(f"matmul: left operand must be at least 1-d, got shape {a.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.data.shape} vs {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ b.data.T
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                k = a.data.shape[-1]
                m = b.data.shape[1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _result(data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.data.shape}")
    data = a.data.T.copy()

    def backward(g):
        return (g.T,)

    return _result(data, (a,), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Shared affine map applied along the last axis: ``x @ weight + bias``."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# Shape surgery


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(
            "concat: shapes " + ", ".join(str(t.data.shape) for t in tensors) + f" ({err})"
        )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            if t.requires_grad
            else None
            for i, t in enumerate(tensors)
        )

    return _result(data, tuple(tensors), backward)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    x = as_tensor(x)
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {x.data.shape}")
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) outside axis of size {x.data.shape[axis]}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    data = x.data[tuple(index)].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[tuple(index)] = g
        return (full,)

    return _result(data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.data.shape} as {tuple(shape)}")

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _result(data, (x,), backward)


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor: output[i, j] = x[index[i, j]].

    The backward pass scatter-adds into the source rows, so a row picked
    several times receives the sum of its downstream gradients.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d source, got shape {x.data.shape}")
    index = np.asarray(index)
    data = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index.reshape(-1), g.reshape(-1, x.data.shape[1]))
        return (gx,)

    return _result(data, (x,), backward)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    """Concatenate scalar tensors into a 1-d vector (for hinge max/min)."""
    return concat([reshape(v, (1,)) for v in values], axis=0)


# ---------------------------------------------------------------------------
# Activations and normalisations


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _result(data, (x,), backward)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    data = np.where(x.data > 0, x.data, x.data * x.data.dtype.type(slope))

    def backward(g):
        return (g * np.where(x.data > 0, x.data.dtype.type(1), x.data.dtype.type(slope)),)

    return _result(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), backward)


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _result(data, (x,), backward)


def l2_normalize(x, axis: int) -> Tensor:
    """Scale slices along ``axis`` to unit norm; all-zero slices stay zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm == 0, np.ones_like(norm), norm)
    data = x.data / safe

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((g - data * inner) / safe,)

    return _result(data, (x,), backward)


class BatchNormState:
    """Per-channel running statistics for batch normalisation."""

    def __init__(self, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.mean: Optional[np.ndarray] = None
        self.var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def init_identity(self, channels: int, dtype) -> "BatchNormState":
        """Seed neutral statistics so an untrained model can run inference."""
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        return self


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Normalise over every axis but the last (the channel axis).

    Training mode uses the biased batch statistics and folds them into the
    running estimate with ``running = momentum*running + (1-momentum)*batch``.
    Inference mode uses the running statistics and raises if none exist.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_same_dtype(x, gamma, "batch_norm")
    channels = x.data.shape[-1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ShapeError(
            f"batch_norm: scale/shift of shape {gamma.data.shape} do not match {channels} channels"
        )
    axes = tuple(range(x.data.ndim - 1))
    eps = x.data.dtype.type(state.eps)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state.mean is None:
            state.mean = mean.copy()
            state.var = var.copy()
        else:
            m = state.momentum
            state.mean = m * state.mean + (1.0 - m) * mean
            state.var = m * state.var + (1.0 - m) * var
    else:
        if not state.initialized:
            raise UninitializedStatsError(
                "batch-norm inference requested with uninitialized statistics"
            )
        mean = state.mean.astype(x.data.dtype)
        var = state.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    data = gamma.data * xhat + beta.data
    count = x.data.size // channels

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                # classic fused batch-norm backward over the batch statistics
                gx = (
                    gxhat
                    - gxhat.mean(axis=axes)
                    - xhat * (gxhat * xhat).sum(axis=axes) / count
                ) * inv_std
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _result(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Reductions


def reduce_sum(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "sum")
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, 1.0) * g,)
        return (np.repeat(np.expand_dims(g, axis), x.data.shape[axis], axis=axis),)

    return _result(data, (x,), backward)


def reduce_mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "mean")
    data = x.data.mean(axis=axis)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        scale = x.data.dtype.type(1.0 / count)
        if axis is None:
            return (np.full_like(x.data, scale) * g,)
        return (np.repeat(np.expand_dims(g * scale, axis), x.data.shape[axis], axis=axis),)

    return _result(data, (x,), backward)


def reduce_max(x, axis: int) -> Tensor:
    """Max along ``axis``; backward routes gradient to the first argmax."""
    return _extremum(x, axis, np.max, np.argmax)


def reduce_min(x, axis: int) -> Tensor:
    """Min along ``axis``; backward routes gradient to the first argmin."""
    return _extremum(x, axis, np.min, np.argmin)


def _extremum(x, axis: int, reduce_fn, arg_fn) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, reduce_fn.__name__)
    data = reduce_fn(x.data, axis=axis)
    winners = arg_fn(x.data, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(winners, axis), np.expand_dims(g, axis), axis=axis
        )
        return (gx,)

    return _result(data, (x,), backward)


def _check_axis(x: Tensor, axis: Optional[int], op: str) -> None:
    if axis is None:
        if x.data.size == 0:
            raise ShapeError(f"{op}: reduction over an empty tensor")
        return
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.data.shape}")
    if x.data.shape[axis] == 0:
        raise ShapeError(f"{op}: axis {axis} of shape {x.data.shape} is empty")


# ---------------------------------------------------------------------------
# Convenience compositions


def sq_distance(a, b) -> Tensor:
    """Squared euclidean distance between two equal-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sq_distance: shapes differ, {a.data.shape} vs {b.data.shape}")
    diff = sub(a, b)
    return reduce_sum(mul(diff, diff), axis=None)
