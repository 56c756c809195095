#!/usr/bin/env python3
"""
Tensor Engine for RetinaGAN
Dense numpy arrays, a recording tape and reverse-mode differentiation.

Every network, loss and optimizer in the package is built from the primitives
registered here. A primitive is a forward kernel plus a backward kernel; `apply`
runs the forward kernel, checks the result and records it on the active Tape,
and `backward` walks the tape in reverse accumulating gradients.
"""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_tensor_ids = itertools.count(1)
_default_dtype = np.dtype(np.float32)
_tape_stack: List[Optional["Tape"]] = []

ArrayLike = Union["Tensor", np.ndarray, float, int]


def get_default_dtype() -> np.dtype:
    """dtype given to tensors created from Python numbers or lists."""
    return _default_dtype


@contextmanager
def precision(dtype: Union[str, np.dtype]) -> Iterator[None]:
    """Temporarily switch the default dtype (float32 for training, float64 for gradient checks)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype)
    if _default_dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        _default_dtype = previous
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """A dense array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Optional[Union[str, np.dtype]] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(_tensor_ids)
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

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
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; every method routes through `apply`.
    def __add__(self, other: ArrayLike) -> "Tensor":
        return apply("add", [self, other])

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return apply("add", [other, self])

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return apply("sub", [self, other])

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return apply("sub", [other, self])

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return apply("mul", [self, other])

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return apply("mul", [other, self])

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return apply("div", [self, other])

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return apply("div", [other, self])

    def __neg__(self) -> "Tensor":
        return apply("neg", [self])

    def __pow__(self, exponent: float) -> "Tensor":
        return apply("pow", [self], {"exponent": float(exponent)})

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return apply("matmul", [self, other])


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as untracked tensors, matching the dtype of `like` when given."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def detach(tensor: Tensor) -> Tensor:
    """Untracked leaf copy of a tensor (stop-gradient)."""
    return Tensor(tensor.data.copy(), requires_grad=False, name=tensor.name)


@dataclass
class TapeEntry:
    """One recorded primitive application."""
    op: str
    input_ids: Tuple[int, ...]
    input_requires_grad: Tuple[bool, ...]
    input_data: Tuple[np.ndarray, ...]
    output_id: int
    output_data: np.ndarray
    attrs: Dict[str, Any]
    saved: Any = None


class Tape:
    """
    Ordered record of primitive applications.

    Entries are appended in execution order, so every input id precedes its
    consumer. Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._produced: set = set()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               attrs: Dict[str, Any], saved: Any) -> None:
        self.entries.append(TapeEntry(
            op=op,
            input_ids=tuple(t.id for t in inputs),
            input_requires_grad=tuple(t.requires_grad for t in inputs),
            input_data=tuple(t.data for t in inputs),
            output_id=output.id,
            output_data=output.data,
            attrs=dict(attrs),
            saved=saved,
        ))
        self._produced.add(output.id)
        output.tape = self

    def leaf_ids(self) -> List[int]:
        """Ids of tracked inputs that no entry produced (parameters and input images)."""
        seen = []
        for entry in self.entries:
            for tid, needs in zip(entry.input_ids, entry.input_requires_grad):
                if needs and tid not in self._produced and tid not in seen:
                    seen.append(tid)
        return seen

    def replay(self) -> Dict[int, np.ndarray]:
        """Recompute every entry from the recorded leaf values; returns output id -> value."""
        values: Dict[int, np.ndarray] = {}
        for entry in self.entries:
            args = [values.get(tid, data) for tid, data in zip(entry.input_ids, entry.input_data)]
            out, _ = OPS[entry.op].forward(args, entry.attrs)
            values[entry.output_id] = out
        return values


def current_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; ops inside still compute values."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


@dataclass
class OpKernel:
    """Forward/backward pair for one primitive."""
    name: str
    forward: Callable[[List[np.ndarray], Dict[str, Any]], Tuple[np.ndarray, Any]]
    backward: Callable[..., List[Optional[np.ndarray]]]
    arity: Optional[int] = None


OPS: Dict[str, OpKernel] = {}


def register(name: str, arity: Optional[int] = None):
    """Decorator pairing a forward function with the backward function it returns."""
    def wrap(factory):
        forward, backward = factory()
        OPS[name] = OpKernel(name=name, forward=forward, backward=backward, arity=arity)
        return factory
    return wrap


def apply(op_name: str, inputs: Sequence[ArrayLike], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """
    Run a primitive and record it on the active tape.

    Args:
        op_name: Registered primitive name
        inputs: Tensors or constants (constants take the dtype of the first tensor)
        attrs: Primitive attributes (stride, axis, ...)

    Returns:
        Output tensor; it requires gradients when any input does
    """
    kernel = OPS.get(op_name)
    if kernel is None:
        raise ValueError(f"unknown op '{op_name}'")
    attrs = attrs or {}
    like = next((x for x in inputs if isinstance(x, Tensor)), None)
    tensors = [as_tensor(x, like) for x in inputs]
    if kernel.arity is not None and len(tensors) != kernel.arity:
        raise ShapeError(f"op '{op_name}' takes {kernel.arity} inputs, got {len(tensors)}")

    with np.errstate(all="ignore"):
        out_data, saved = kernel.forward([t.data for t in tensors], attrs)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op '{op_name}' produced non-finite values "
                             f"(input shapes {[t.shape for t in tensors]})")

    requires_grad = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and requires_grad:
        tape.record(op_name, tensors, out, attrs, saved)
    return out


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> Dict[int, np.ndarray]:
    """
    Reverse-mode gradients of a scalar loss.

    Args:
        loss: Scalar tensor recorded on a tape
        params: Tensors whose gradients are wanted; those off the loss path get zeros.
            When omitted, every tracked leaf on the tape is returned.

    Returns:
        Map from tensor id to gradient array (shape- and dtype-matched)
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}

    if tape is not None:
        for entry in reversed(tape.entries):
            g_out = grads.get(entry.output_id)
            if g_out is None:
                continue
            with np.errstate(all="ignore"):
                in_grads = OPS[entry.op].backward(g_out, list(entry.input_data), entry.output_data,
                                                  entry.saved, entry.attrs)
            for tid, needs, g_in in zip(entry.input_ids, entry.input_requires_grad, in_grads):
                if not needs or g_in is None:
                    continue
                if tid in grads:
                    grads[tid] = grads[tid] + g_in
                else:
                    grads[tid] = np.asarray(g_in)
            del grads[entry.output_id]
    elif loss.requires_grad and params is None:
        logger.warning("backward called on a tensor that was never recorded on a tape")

    if params is None:
        wanted = tape.leaf_ids() if tape is not None else []
        return {tid: grads[tid] for tid in wanted if tid in grads}

    result = {}
    for p in params:
        g = grads.get(p.id)
        result[p.id] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return result


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], points: int = 20,
                   step: float = 1e-4, seed: int = 0) -> float:
    """
    Compare analytic gradients with central finite differences.

    Args:
        fn: Function of `inputs` returning a scalar tensor; must be deterministic
        inputs: Tensors to perturb (should be float64 and require gradients)
        points: Number of random coordinates checked
        step: Finite-difference step

    Returns:
        Worst relative error over the checked coordinates
    """
    for t in inputs:
        t.data = t.data.copy()
    with Tape():
        loss = fn(*inputs)
    grads = backward(loss, params=inputs)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        t = inputs[int(rng.integers(len(inputs)))]
        idx = tuple(int(rng.integers(n)) for n in t.shape)
        original = t.data[idx]
        t.data[idx] = original + step
        plus = fn(*inputs).item()
        t.data[idx] = original - step
        minus = fn(*inputs).item()
        t.data[idx] = original
        numeric = (plus - minus) / (2.0 * step)
        analytic = float(grads[t.id][idx])
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# ---------------------------------------------------------------------------
# Kernel helpers
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    g = np.asarray(grad)
    while g.ndim > len(shape):
        g = np.asarray(g.sum(axis=0))
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"op '{op}': shapes {a.shape} and {b.shape} do not broadcast") from None


def _reduce_axes(attrs: Dict[str, Any], ndim: int) -> Tuple[int, ...]:
    axis = attrs.get("axis")
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    g = np.asarray(grad)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation of NCHW input with OIHW weights."""
    kh, kw = w.shape[2], w.shape[3]
    windows = sliding_window_view(_pad_hw(x, pad), (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_input_grad(grad: np.ndarray, w: np.ndarray, x_shape: Tuple[int, ...],
                      stride: int, pad: int) -> np.ndarray:
    """Adjoint of conv2d_forward with respect to its input."""
    n, c, h, wd = x_shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = grad.shape[2], grad.shape[3]
    cols = np.tensordot(grad, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    padded = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return padded[:, :, pad:pad + h, pad:pad + wd]


def conv2d_weight_grad(grad: np.ndarray, x: np.ndarray, w_shape: Tuple[int, ...],
                       stride: int, pad: int) -> np.ndarray:
    """Gradient of conv2d_forward with respect to its weights."""
    kh, kw = w_shape[2], w_shape[3]
    windows = sliding_window_view(_pad_hw(x, pad), (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv(x: np.ndarray, w: np.ndarray, op: str, channel_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"op '{op}' needs NCHW input and 4-D weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[channel_axis]:
        raise ShapeError(f"op '{op}': input channels {x.shape[1]} do not match weights {w.shape}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

@register("add", arity=2)
def _add():
    def forward(xs, attrs):
        _broadcast_shape(xs[0], xs[1], "add")
        return xs[0] + xs[1], None

    def backward(g, xs, out, saved, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]
    return forward, backward


@register("sub", arity=2)
def _sub():
    def forward(xs, attrs):
        _broadcast_shape(xs[0], xs[1], "sub")
        return xs[0] - xs[1], None

    def backward(g, xs, out, saved, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]
    return forward, backward


@register("mul", arity=2)
def _mul():
    def forward(xs, attrs):
        _broadcast_shape(xs[0], xs[1], "mul")
        return xs[0] * xs[1], None

    def backward(g, xs, out, saved, attrs):
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]
    return forward, backward


@register("div", arity=2)
def _div():
    def forward(xs, attrs):
        _broadcast_shape(xs[0], xs[1], "div")
        return xs[0] / xs[1], None

    def backward(g, xs, out, saved, attrs):
        a, b = xs
        return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]
    return forward, backward


@register("neg", arity=1)
def _neg():
    def forward(xs, attrs):
        return -xs[0], None

    def backward(g, xs, out, saved, attrs):
        return [-g]
    return forward, backward


@register("matmul", arity=2)
def _matmul():
    def forward(xs, attrs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"op 'matmul': cannot multiply {a.shape} by {b.shape}")
        return np.matmul(a, b), None

    def backward(g, xs, out, saved, attrs):
        a, b = xs
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]
    return forward, backward


@register("pow", arity=1)
def _pow():
    def forward(xs, attrs):
        return np.power(xs[0], attrs["exponent"]), None

    def backward(g, xs, out, saved, attrs):
        e = attrs["exponent"]
        if e == 0.0:
            return [np.zeros_like(xs[0])]
        return [g * e * np.power(xs[0], e - 1.0)]
    return forward, backward


@register("abs", arity=1)
def _abs():
    def forward(xs, attrs):
        return np.abs(xs[0]), None

    def backward(g, xs, out, saved, attrs):
        return [g * np.sign(xs[0])]
    return forward, backward


@register("exp", arity=1)
def _exp():
    def forward(xs, attrs):
        return np.exp(xs[0]), None

    def backward(g, xs, out, saved, attrs):
        return [g * out]
    return forward, backward


@register("log", arity=1)
def _log():
    def forward(xs, attrs):
        return np.log(xs[0]), None

    def backward(g, xs, out, saved, attrs):
        return [g / xs[0]]
    return forward, backward


@register("clip", arity=1)
def _clip():
    def forward(xs, attrs):
        return np.clip(xs[0], attrs.get("lo"), attrs.get("hi")), None

    def backward(g, xs, out, saved, attrs):
        x = xs[0]
        inside = np.ones(x.shape, dtype=bool)
        if attrs.get("lo") is not None:
            inside &= x >= attrs["lo"]
        if attrs.get("hi") is not None:
            inside &= x <= attrs["hi"]
        return [g * inside]
    return forward, backward


@register("huber", arity=1)
def _huber():
    def forward(xs, attrs):
        x, delta = xs[0], attrs["delta"]
        a = np.abs(x)
        return np.where(a <= delta, 0.5 * x * x / delta, a - 0.5 * delta).astype(x.dtype), None

    def backward(g, xs, out, saved, attrs):
        x, delta = xs[0], attrs["delta"]
        return [g * np.where(np.abs(x) <= delta, x / delta, np.sign(x))]
    return forward, backward


# ---------------------------------------------------------------------------
# Activations and normalization
# ---------------------------------------------------------------------------

@register("relu", arity=1)
def _relu():
    def forward(xs, attrs):
        return np.maximum(xs[0], 0).astype(xs[0].dtype), None

    def backward(g, xs, out, saved, attrs):
        return [g * (xs[0] > 0)]
    return forward, backward


@register("leaky_relu", arity=1)
def _leaky_relu():
    def forward(xs, attrs):
        x, slope = xs[0], attrs.get("slope", 0.2)
        return np.where(x > 0, x, slope * x).astype(x.dtype), None

    def backward(g, xs, out, saved, attrs):
        slope = attrs.get("slope", 0.2)
        return [np.where(xs[0] > 0, g, slope * g)]
    return forward, backward


@register("sigmoid", arity=1)
def _sigmoid():
    def forward(xs, attrs):
        x = xs[0]
        return np.exp(-np.logaddexp(0, -x)).astype(x.dtype), None

    def backward(g, xs, out, saved, attrs):
        return [g * out * (1 - out)]
    return forward, backward


@register("tanh", arity=1)
def _tanh():
    def forward(xs, attrs):
        return np.tanh(xs[0]), None

    def backward(g, xs, out, saved, attrs):
        return [g * (1 - out * out)]
    return forward, backward


@register("instance_norm", arity=1)
def _instance_norm():
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4:
            raise ShapeError(f"op 'instance_norm' needs NCHW input, got {x.shape}")
        eps = attrs.get("eps", 1e-5)
        mu = x.mean(axis=(2, 3), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        return xhat.astype(x.dtype), inv

    def backward(g, xs, out, inv, attrs):
        m = xs[0].shape[2] * xs[0].shape[3]
        g_sum = g.sum(axis=(2, 3), keepdims=True)
        gx_sum = (g * out).sum(axis=(2, 3), keepdims=True)
        return [(inv / m) * (m * g - g_sum - out * gx_sum)]
    return forward, backward


# ---------------------------------------------------------------------------
# Reductions and layout
# ---------------------------------------------------------------------------

@register("sum", arity=1)
def _sum():
    def forward(xs, attrs):
        axes = _reduce_axes(attrs, xs[0].ndim)
        return np.asarray(xs[0].sum(axis=axes, keepdims=attrs.get("keepdims", False))), None

    def backward(g, xs, out, saved, attrs):
        axes = _reduce_axes(attrs, xs[0].ndim)
        return [_expand_reduced(g, xs[0].shape, axes, attrs.get("keepdims", False))]
    return forward, backward


@register("mean", arity=1)
def _mean():
    def forward(xs, attrs):
        axes = _reduce_axes(attrs, xs[0].ndim)
        return np.asarray(xs[0].mean(axis=axes, keepdims=attrs.get("keepdims", False))), None

    def backward(g, xs, out, saved, attrs):
        axes = _reduce_axes(attrs, xs[0].ndim)
        count = int(np.prod([xs[0].shape[a] for a in axes])) if axes else 1
        return [_expand_reduced(g, xs[0].shape, axes, attrs.get("keepdims", False)) / count]
    return forward, backward


@register("max", arity=1)
def _max():
    def forward(xs, attrs):
        axis = attrs["axis"]
        x = xs[0]
        arg = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(arg, axis), axis=axis)
        if not attrs.get("keepdims", False):
            out = np.squeeze(out, axis=axis)
        return out, arg

    def backward(g, xs, out, arg, attrs):
        axis = attrs["axis"]
        grad = np.zeros_like(xs[0])
        g_k = g if attrs.get("keepdims", False) else np.expand_dims(g, axis)
        np.put_along_axis(grad, np.expand_dims(arg, axis), g_k, axis=axis)
        return [grad]
    return forward, backward


@register("concat")
def _concat():
    def forward(xs, attrs):
        axis = attrs.get("axis", 1)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref))
                                         if i != axis % len(ref)):
                raise ShapeError(f"op 'concat' along axis {axis}: incompatible shapes "
                                 f"{[y.shape for y in xs]}")
        return np.concatenate(xs, axis=axis), None

    def backward(g, xs, out, saved, attrs):
        axis = attrs.get("axis", 1)
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.split(g, bounds, axis=axis)
    return forward, backward


@register("reshape", arity=1)
def _reshape():
    def forward(xs, attrs):
        try:
            return xs[0].reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError(f"op 'reshape': cannot reshape {xs[0].shape} to {attrs['shape']}") from None

    def backward(g, xs, out, saved, attrs):
        return [g.reshape(xs[0].shape)]
    return forward, backward


@register("transpose", arity=1)
def _transpose():
    def forward(xs, attrs):
        return np.ascontiguousarray(np.transpose(xs[0], attrs["axes"])), None

    def backward(g, xs, out, saved, attrs):
        return [np.transpose(g, np.argsort(attrs["axes"]))]
    return forward, backward


@register("slice", arity=1)
def _slice():
    def forward(xs, attrs):
        index = [slice(None)] * xs[0].ndim
        index[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
        return xs[0][tuple(index)].copy(), tuple(index)

    def backward(g, xs, out, index, attrs):
        grad = np.zeros_like(xs[0])
        grad[index] = g
        return [grad]
    return forward, backward


@register("crop", arity=1)
def _crop():
    def forward(xs, attrs):
        x = xs[0]
        y0, x0, h, w = attrs["top"], attrs["left"], attrs["height"], attrs["width"]
        if y0 < 0 or x0 < 0 or y0 + h > x.shape[-2] or x0 + w > x.shape[-1]:
            raise ShapeError(f"op 'crop': window {(y0, x0, h, w)} exceeds spatial extent {x.shape[-2:]}")
        return x[..., y0:y0 + h, x0:x0 + w].copy(), None

    def backward(g, xs, out, saved, attrs):
        grad = np.zeros_like(xs[0])
        y0, x0 = attrs["top"], attrs["left"]
        grad[..., y0:y0 + g.shape[-2], x0:x0 + g.shape[-1]] = g
        return [grad]
    return forward, backward


@register("pad_reflect", arity=1)
def _pad_reflect():
    def forward(xs, attrs):
        x, p = xs[0], attrs["pad"]
        if x.ndim != 4 or p >= x.shape[2] or p >= x.shape[3]:
            raise ShapeError(f"op 'pad_reflect': pad {p} too large for {x.shape}")
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect"), None

    def backward(g, xs, out, saved, attrs):
        p = attrs["pad"]
        grad = g
        for axis in (2, 3):
            length = xs[0].shape[axis]
            index = np.pad(np.arange(length), p, mode="reflect")
            moved = np.moveaxis(grad, axis, 0)
            folded = np.zeros((length,) + moved.shape[1:], dtype=g.dtype)
            np.add.at(folded, index, moved)
            grad = np.moveaxis(folded, 0, axis)
        return [grad]
    return forward, backward


@register("upsample_nearest_2x", arity=1)
def _upsample():
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4:
            raise ShapeError(f"op 'upsample_nearest_2x' needs NCHW input, got {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3), None

    def backward(g, xs, out, saved, attrs):
        n, c, h, w = xs[0].shape
        return [g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))]
    return forward, backward


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

@register("conv2d")
def _conv2d():
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        _check_conv(x, w, "conv2d", 1)
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
            raise ShapeError(f"op 'conv2d': kernel {w.shape} larger than padded input {x.shape}")
        out = conv2d_forward(x, w, stride, pad)
        if len(xs) == 3:
            out = out + xs[2].reshape(1, -1, 1, 1)
        return out, None

    def backward(g, xs, out, saved, attrs):
        x, w = xs[0], xs[1]
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        grads = [conv2d_input_grad(g, w, x.shape, stride, pad),
                 conv2d_weight_grad(g, x, w.shape, stride, pad)]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads
    return forward, backward


@register("conv_transpose2d")
def _conv_transpose2d():
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        _check_conv(x, w, "conv_transpose2d", 0)
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        n, _, h, wd = x.shape
        ho = (h - 1) * stride - 2 * pad + w.shape[2]
        wo = (wd - 1) * stride - 2 * pad + w.shape[3]
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"op 'conv_transpose2d': empty output for {x.shape} with {w.shape}")
        out = conv2d_input_grad(x, w, (n, w.shape[1], ho, wo), stride, pad)
        if len(xs) == 3:
            out = out + xs[2].reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out), None

    def backward(g, xs, out, saved, attrs):
        x, w = xs[0], xs[1]
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        grads = [conv2d_forward(g, w, stride, pad),
                 conv2d_weight_grad(x, g, w.shape, stride, pad)]
        if len(xs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads
    return forward, backward


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply("conv2d", inputs, {"stride": stride, "pad": pad})


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply("conv_transpose2d", inputs, {"stride": stride, "pad": pad})


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return apply("instance_norm", [x], {"eps": eps})


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return apply("leaky_relu", [x], {"slope": slope})


def relu(x: Tensor) -> Tensor:
    return apply("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply("tanh", [x])


def exp(x: Tensor) -> Tensor:
    return apply("exp", [x])


def log(x: Tensor) -> Tensor:
    return apply("log", [x])


def absolute(x: Tensor) -> Tensor:
    return apply("abs", [x])


def clip(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    return apply("clip", [x], {"lo": lo, "hi": hi})


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    return apply("huber", [x], {"delta": delta})


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("sum", [x], {"axis": axis, "keepdims": keepdims})


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", [x], {"axis": axis, "keepdims": keepdims})


def tmax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return apply("max", [x], {"axis": axis, "keepdims": keepdims})


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return apply("concat", list(tensors), {"axis": axis})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply("reshape", [x], {"shape": tuple(shape)})


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return apply("transpose", [x], {"axes": tuple(axes)})


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply("slice", [x], {"axis": axis, "start": start, "stop": stop})


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    return apply("crop", [x], {"top": top, "left": left, "height": height, "width": width})


def pad_reflect(x: Tensor, pad: int) -> Tensor:
    return apply("pad_reflect", [x], {"pad": pad})


def upsample_nearest_2x(x: Tensor) -> Tensor:
    return apply("upsample_nearest_2x", [x])


def matmul(a: Tensor, b: ArrayLike) -> Tensor:
    return apply("matmul", [a, b])
