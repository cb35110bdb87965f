"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`Node` holding its inputs and
a backward rule. ``backward`` rebuilds the execution-ordered tape of the
loss's ancestry and replays it in reverse, accumulating gradients into leaf
tensors that have ``requires_grad`` set.

Compute precision is float32 unless switched with :func:`precision`, which
the gradient checker uses to run in float64.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "DegenerateBatchError",
    "NonFiniteError",
    "precision",
    "get_dtype",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "conv2d",
    "conv_transpose2d",
    "conv_output_size",
    "conv_transpose_output_size",
    "batchnorm2d",
    "prelu",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "activation",
    "add",
    "channel_concat",
    "avg_pool2d",
    "clamp",
    "log",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible. ``axes`` names the offending axes."""

    def __init__(self, message: str, axes: Sequence[str] = ()):
        super().__init__(message)
        self.axes = tuple(axes)


class DegenerateBatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True


_state = _State()
_seq = itertools.count()


def get_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors and op results are stored in."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Node:
    """One recorded operation: its inputs and the rule mapping dL/dout to dL/dinputs."""

    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state.dtype:
            arr = arr.astype(_state.dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic: same-shape tensors or python scalars only
    def __add__(self, other):
        return _binary(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(other, self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return _binary(self, -1.0, "mul")

    def sum(self) -> "Tensor":
        shape = self.shape
        return _result(
            np.sum(self.data, dtype=np.float64).reshape(1),
            "sum",
            (self,),
            lambda g: (np.broadcast_to(g.reshape(()), shape),),
        )

    def mean(self) -> "Tensor":
        shape, n = self.shape, self.size
        return _result(
            np.mean(self.data, dtype=np.float64).reshape(1),
            "mean",
            (self,),
            lambda g: (np.broadcast_to(g.reshape(()) / n, shape),),
        )

    def square(self) -> "Tensor":
        x = self.data
        return _result(x * x, "square", (self,), lambda g: (2.0 * x * g,))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # summing is far cheaper than a full isfinite mask; only fall back when needed
    if math.isfinite(float(np.sum(arr, dtype=np.float64))):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    data = np.asarray(data)
    if data.dtype != _state.dtype:
        data = data.astype(_state.dtype)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    out.requires_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.node = Node(op, inputs, backward_fn) if out.requires_grad else None
    return out


def _binary(a, b, kind: str) -> Tensor:
    a_scalar = not isinstance(a, Tensor)
    b_scalar = not isinstance(b, Tensor)
    if not a_scalar and not b_scalar and a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")
    av = a if a_scalar else a.data
    bv = b if b_scalar else b.data
    inputs = tuple(t for t in (a, b) if isinstance(t, Tensor))

    if kind == "add":
        data = av + bv
        grads = lambda g: tuple(g for _ in inputs)
    elif kind == "sub":
        data = av - bv
        if a_scalar:
            grads = lambda g: (-g,)
        elif b_scalar:
            grads = lambda g: (g,)
        else:
            grads = lambda g: (g, -g)
    else:
        data = av * bv
        if a_scalar:
            grads = lambda g: (g * av,)
        elif b_scalar:
            grads = lambda g: (g * bv,)
        else:
            grads = lambda g: (g * bv, g * av)
    return _result(data, kind, inputs, grads)


class Tape:
    """Execution-ordered record of the operations a loss depends on."""

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.entries = nodes

    @classmethod
    def of(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[tuple[Tensor, Node]] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append((t, t.node))
            stack.extend(t.node.inputs)
        found.sort(key=lambda e: e[1].seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor, tape: Tape | None = None, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on any tape: no input requires gradients")
    if tape is None:
        tape = Tape.of(loss)
    if loss.node is None:
        # loss is itself a leaf
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, node in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                ig = np.asarray(ig, dtype=inp.data.dtype).reshape(inp.shape)
                if inp.grad is None:
                    inp.grad = ig.copy()
                else:
                    inp.grad += ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
        if not retain_graph:
            out.node = None


# --------------------------------------------------------------------------
# convolution kernels (cross-correlation, zero padding)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _cols(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """im2col in channel-major layout: (C*kh*kw, N*Ho*Wo)."""
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    o, _, kh, kw = w.shape
    cols, ho, wo = _cols(x, kh, kw, stride, padding)
    out = w.reshape(o, -1) @ cols
    return out.reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3)


def _conv_backward_input(
    gy: np.ndarray, w: np.ndarray, stride: int, padding: int, x_hw: tuple[int, int]
) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` in its input.

    Computed as a stride-1 correlation of the zero-dilated output gradient
    with the spatially flipped, channel-swapped kernel.
    """
    n, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    h, wd = x_hw
    qh, qw = kh - 1 - padding, kw - 1 - padding
    if qh < 0 or qw < 0:
        return _conv_backward_input_scatter(gy, w, stride, padding, x_hw)
    buf = np.zeros((n, o, h + kh - 1, wd + kw - 1), dtype=gy.dtype)
    buf[:, :, qh : qh + stride * ho : stride, qw : qw + stride * wo : stride] = gy
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv_forward(buf, flipped, 1, 0)


def _conv_backward_input_scatter(
    gy: np.ndarray, w: np.ndarray, stride: int, padding: int, x_hw: tuple[int, int]
) -> np.ndarray:
    # col2im fallback for padding >= kernel size
    n, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    h, wd = x_hw
    gcols = (w.reshape(o, -1).T @ gy.transpose(1, 0, 2, 3).reshape(o, -1)).reshape(c, kh, kw, n, ho, wo)
    gx = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
    return gx[:, :, padding : padding + h, padding : padding + wd]


def _conv_backward_weight(
    x: np.ndarray, gy: np.ndarray, stride: int, padding: int, kernel: tuple[int, int]
) -> np.ndarray:
    kh, kw = kernel
    n, o, ho, wo = gy.shape
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    c = x.shape[1]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    gw = gy.transpose(1, 0, 2, 3).reshape(o, -1) @ cols.T
    return gw.reshape(o, c, kh, kw)


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor | None, in_axis: int, out_axis: int, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be NCHW, got shape {x.shape}", ("N", "C", "H", "W"))
    if weight.ndim != 4:
        raise ShapeError(f"{op}: weight must be 4-D, got shape {weight.shape}", ("weight",))
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but weight expects {weight.shape[in_axis]}",
            ("C",),
        )
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ShapeError(
            f"{op}: bias shape {bias.shape} does not match {weight.shape[out_axis]} output channels",
            ("bias",),
        )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation. ``weight`` is (outC, inC, kH, kW)."""
    _check_conv_args(x, weight, bias, 1, 0, "conv2d")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    kh, kw = weight.shape[2:]
    h, w = x.shape[2:]
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}", ("H", "W"))

    xd, wd = x.data, weight.data
    out = _conv_forward(xd, wd, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def grads(g):
        gx = _conv_backward_input(g, wd, stride, padding, (h, w)) if x.requires_grad else None
        gw = _conv_backward_weight(xd, g, stride, padding, (kh, kw)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", inputs, grads)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` in its input.

    ``weight`` is (inC, outC, kH, kW): the same array a conv2d mapping outC
    channels to inC channels would use.
    """
    _check_conv_args(x, weight, bias, 0, 1, "conv_transpose2d")
    if stride < 1 or padding < 0:
        raise ValueError("conv_transpose2d: stride must be >= 1 and padding >= 0")
    kh, kw = weight.shape[2:]
    h, w = x.shape[2:]
    ho = conv_transpose_output_size(h, kh, stride, padding)
    wo = conv_transpose_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output size {ho}x{wo} is empty", ("H", "W"))

    xd, wd = x.data, weight.data
    out = _conv_backward_input(xd, wd, stride, padding, (ho, wo))
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def grads(g):
        gx = _conv_forward(g, wd, stride, padding) if x.requires_grad else None
        gw = _conv_backward_weight(g, xd, stride, padding, (kh, kw)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv_transpose2d", inputs, grads)


# --------------------------------------------------------------------------
# normalization and activations


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance) unless ``update_stats`` is false.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be NCHW, got {x.shape}", ("N", "C", "H", "W"))
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm2d: {label} has shape {arr.shape}, expected ({c},)", ("C",))
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)

    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if m < 2:
            raise DegenerateBatchError(
                f"batchnorm2d: training mode needs at least 2 values per channel, got {m}"
            )
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
            running_var *= 1.0 - momentum
            running_var += momentum * (var.reshape(c) * (m / (m - 1))).astype(running_var.dtype)

        def grads(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (gd * inv_std / m) * (
                    m * g - gb.reshape(1, c, 1, 1) - xhat * gg.reshape(1, c, 1, 1)
                )
            return gx, gg, gb

    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv_std

        def grads(g):
            gx = g * gd * inv_std if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = gd * xhat + beta.data.reshape(1, c, 1, 1)
    return _result(out, "batchnorm2d", (x, gamma, beta), grads)


def prelu(x: Tensor, leak: Tensor) -> Tensor:
    """max(0, x) - leak * max(0, -x); ``leak`` is shape (1,) or per-channel (C,)."""
    if leak.ndim != 1 or (leak.shape[0] != 1 and (x.ndim < 2 or leak.shape[0] != x.shape[1])):
        raise ShapeError(f"prelu: leak shape {leak.shape} fits neither scalar nor channels of {x.shape}", ("C",))
    xd = x.data
    if leak.shape[0] == 1:
        lam = leak.data.reshape(())
    else:
        lam = leak.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    neg = np.maximum(-xd, 0)
    out = np.maximum(xd, 0) - lam * neg
    # kink at 0 takes the positive-branch slope
    pos_mask = xd >= 0

    def grads(g):
        gx = np.where(pos_mask, g, g * lam) if x.requires_grad else None
        gl = -(g * neg)
        if leak.shape[0] == 1:
            gl = gl.sum().reshape(1)
        else:
            axes = (0,) + tuple(range(2, x.ndim))
            gl = gl.sum(axis=axes)
        return gx, gl

    return _result(out, "prelu", (x, leak), grads)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd >= 0
    return _result(np.maximum(xd, 0), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    mask = xd >= 0
    out = np.where(mask, xd, slope * xd)
    return _result(out, "leaky_relu", (x,), lambda g: (np.where(mask, g, slope * g),))


def _open_unit(y: np.ndarray, lo_zero: bool) -> np.ndarray:
    # rounding saturates at the closed endpoints; keep results strictly inside
    top = np.nextafter(y.dtype.type(1), y.dtype.type(0))
    bottom = np.finfo(y.dtype).tiny if lo_zero else -top
    return np.clip(y, bottom, top)


def tanh(x: Tensor) -> Tensor:
    y = _open_unit(np.tanh(x.data), lo_zero=False)
    return _result(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = _open_unit(np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), lo_zero=True)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _binary(a, b, "add")


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("channel_concat: both inputs must be NCHW")
    bad = [ax for ax, i in (("N", 0), ("H", 2), ("W", 3)) if a.shape[i] != b.shape[i]]
    if bad:
        raise ShapeError(f"channel_concat: shapes {a.shape} and {b.shape} differ on {','.join(bad)}", bad)
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, "channel_concat", (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; trailing rows/cols that don't fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: input {h}x{w} smaller than window {k}", ("H", "W"))
    xd = x.data[:, :, : ho * k, : wo * k]
    out = xd.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def grads(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3)
        return (gx,)

    return _result(out, "avg_pool2d", (x,), grads)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), "log", (x,), lambda g: (g / xd,))
