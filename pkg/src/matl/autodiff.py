"""Minimal tape-based reverse-mode automatic differentiation on numpy arrays.

Operations are recorded on the innermost active :class:`Tape` (thread-local).
Outside a tape nothing is recorded, which is how inference runs.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_(mul(x, x))
    >>> backward(tape, y)
    >>> x.grad
    array([6.], dtype=float32)

Shapes must match exactly; the only broadcasting is :func:`add_bias` and
python scalars in :func:`add_scalar` / :func:`mul_scalar`.
"""

from __future__ import annotations

import threading
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, GradCheckError, UsageError

DEFAULT_DTYPE = np.float32

# name -> op function, for coverage checks in the gradient suite
REGISTERED_OPS: dict[str, Callable] = {}

_local = threading.local()


def register(name: str):
    def deco(fn):
        REGISTERED_OPS[name] = fn
        return fn
    return deco


class Tensor:
    """Dense array plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
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
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def op_counts(self) -> Counter:
        return Counter(node.op for node in self.nodes)


def _stack() -> list[Tape]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it on the active tape.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per input. Exposed so that custom ops can be defined in tests.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, output: Tensor, wrt: Iterable[Tensor] | None = None):
    """Propagate d(output)/d(.) through ``tape`` in reverse recorded order.

    Sets ``.grad`` on every leaf that requires grad (zero if the output does
    not depend on it). Returns the gradients of ``wrt`` when given.
    """
    if output.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    wrt = list(wrt) if wrt is not None else []
    produced = {id(n.output) for n in tape.nodes}
    for n in tape.nodes:
        for t in n.inputs:
            if t.requires_grad and id(t) not in produced:
                t.grad = np.zeros_like(t.data)
    for t in wrt:
        if id(t) not in produced:
            t.grad = np.zeros_like(t.data)

    if id(output) not in produced:
        if output.requires_grad:
            output.grad = np.ones_like(output.data)
        return [t.grad for t in wrt] if wrt else None

    pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                inp.grad += gi
    return [t.grad for t in wrt] if wrt else None


# ---------------------------------------------------------------------------
# elementwise / dense ops


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        for axis, (p, q) in enumerate(zip(a.shape, b.shape)):
            if p != q:
                raise DimensionError(f"{op}: axis {axis} mismatch ({p} vs {q}); shapes {a.shape} and {b.shape}")
        raise DimensionError(f"{op}: rank mismatch, shapes {a.shape} and {b.shape}")


@register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


@register("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


@register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


@register("add_scalar")
def add_scalar(a: Tensor, c: float) -> Tensor:
    return record("add_scalar", a.data + c, (a,), lambda g: (g,))


@register("mul_scalar")
def mul_scalar(a: Tensor, c: float) -> Tensor:
    return record("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


@register("add_bias")
def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` (last axis for dense, 1 for NCHW)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"add_bias: bias shape {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return record("add_bias", x.data + b.data.reshape(shape), (x, b),
                  lambda g: (g, g.sum(axis=other)))


@register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis mismatch ({a.shape[1]} vs {b.shape[0]})")
    return record("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


@register("relu")
def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record("relu", np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


@register("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


@register("sqrt")
def sqrt(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Square root with the argument floored at ``floor`` (finite gradient at 0)."""
    clipped = np.maximum(x.data, floor)
    out = np.sqrt(clipped)
    active = x.data > floor
    return record("sqrt", out, (x,), lambda g: (np.where(active, g * 0.5 / out, 0.0),))


@register("softmax")
def softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: last axis is empty (shape {x.shape})")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", out, (x,), bw)


@register("sum")
def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.asarray(x.data.sum(), dtype=x.dtype)
        return record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    out = x.data.sum(axis=axis)
    return record("sum", out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


@register("mean")
def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean: empty tensor")
    n = x.size
    # shifted by the first element so a constant tensor averages to exactly that constant
    first = x.data.flat[0]
    out = np.asarray(first + (x.data - first).mean(), dtype=x.dtype)
    return record("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


@register("reshape")
def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


@register("take_rows")
def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` (repeats allowed; gradients scatter-add)."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return record("take_rows", x.data[index], (x,), bw)


@register("l2_normalize")
def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return record("l2_normalize", out, (x,), bw)


@register("upsample_nearest")
def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest: expects NCHW, got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record("upsample_nearest", out, (x,), bw)


# ---------------------------------------------------------------------------
# losses


@register("binary_cross_entropy")
def binary_cross_entropy(p: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean over all elements of -[t log p + (1-t) log(1-p)], p clipped to [eps, 1-eps]."""
    t = np.asarray(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise DimensionError(f"binary_cross_entropy: target shape {t.shape} != prediction shape {p.shape}")
    if p.size == 0:
        raise DimensionError("binary_cross_entropy: empty prediction")
    pc = np.clip(p.data, eps, 1.0 - eps)
    val = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).mean()
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    n = p.size

    def bw(g):
        return (np.where(inside, g * (pc - t) / (pc * (1.0 - pc)) / n, 0.0).astype(p.dtype),)

    return record("binary_cross_entropy", np.asarray(val, dtype=p.dtype), (p,), bw)


@register("cross_entropy")
def cross_entropy(probs: Tensor, labels, eps: float = 1e-12) -> Tensor:
    """Mean over samples of -log p[label] for an (N, K) probability matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    if probs.ndim != 2 or probs.shape[1] == 0 or probs.shape[0] == 0:
        raise DimensionError(f"cross_entropy: expects non-empty (N, K) probabilities, got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise DimensionError(f"cross_entropy: axis 0 mismatch, {labels.shape[0]} labels for {probs.shape[0]} rows")
    n = probs.shape[0]
    rows = np.arange(n)
    picked = np.maximum(probs.data[rows, labels], eps)
    val = -np.log(picked).mean()

    def bw(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(probs.data[rows, labels] > eps, -g / (picked * n), 0.0)
        return (gp,)

    return record("cross_entropy", np.asarray(val, dtype=probs.dtype), (probs,), bw)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics tracked by exponential moving average."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


@register("batch_norm")
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize over every axis except 1 (features for (N, C), channels for NCHW)."""
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm: expects (N, C) or (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: axis 1 has {c} channels, gamma/beta shapes {gamma.shape}/{beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)

    if training:
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean = (mom * state.running_mean + (1 - mom) * mu).astype(state.running_mean.dtype)
        state.running_var = (mom * state.running_var + (1 - mom) * unbiased).astype(state.running_var.dtype)
    else:
        m = None
        mu, var = state.running_mean, state.running_var

    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = (xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)).astype(x.dtype, copy=False)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = invstd.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * invstd.reshape(bshape)
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return record("batch_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolutions


def _check_conv(op: str, x: Tensor, w: Tensor, chan_axis_w: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: input must be NCHW, got rank {x.ndim}")
    if w.ndim != 4:
        raise DimensionError(f"{op}: kernel must be 4-D, got rank {w.ndim}")
    if x.shape[1] != w.shape[chan_axis_w]:
        raise DimensionError(
            f"{op}: channel axis mismatch, input axis 1 has {x.shape[1]} but kernel axis {chan_axis_w} has {w.shape[chan_axis_w]}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) padded array -> (N*ho*wo, C*kh*kw) patch matrix."""
    n, c = xp.shape[:2]
    s = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s[0], s[2] * stride, s[3] * stride, s[1], s[2] * dilation, s[3] * dilation),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def _scatter_windows(cols: np.ndarray, padded_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum patch entries back into a padded image."""
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else x[:, :, p:-p, p:-p]


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - ((k - 1) * dilation + 1)) // stride + 1


@register("conv2d")
def conv2d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with an (F, C, kh, kw) kernel."""
    _check_conv("conv2d", x, w, 1)
    if stride < 1 or dilation < 1 or padding < 0:
        raise UsageError(f"conv2d: need stride>=1, dilation>=1, padding>=0 (got {stride}, {dilation}, {padding})")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    for axis, size, k in ((2, h, kh), (3, wd, kw)):
        if (k - 1) * dilation + 1 > size + 2 * padding:
            raise DimensionError(f"conv2d: axis {axis}: dilated kernel extent {(k - 1) * dilation + 1} exceeds padded size {size + 2 * padding}")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    xp = np.ascontiguousarray(_pad(x.data, padding))
    if pointwise:
        cols = xp.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        cols = _windows(xp, kh, kw, stride, dilation, ho, wo)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            if pointwise:
                gx = gcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                gx = _crop(_scatter_windows(gcols, xp.shape, kh, kw, stride, dilation, ho, wo), padding)
        return gx, gw

    return record("conv2d", np.ascontiguousarray(out), (x, w), bw)


@register("conv2d_transpose")
def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input.

    ``x`` is (N, F, H, W) and ``w`` is (F, C, kh, kw), the same kernel a
    forward conv from C to F channels would use. Output is
    (N, C, (H-1)*stride - 2*padding + kh, ...).
    """
    _check_conv("conv2d_transpose", x, w, 0)
    if stride < 1 or padding < 0:
        raise UsageError(f"conv2d_transpose: need stride>=1, padding>=0 (got {stride}, {padding})")
    n, f, h, wd = x.shape
    _, c, kh, kw = w.shape
    hp = (h - 1) * stride + kh
    wp = (wd - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise DimensionError(f"conv2d_transpose: padding {padding} leaves empty output")
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, f)
    wmat = w.data.reshape(f, -1)
    # kernel == stride tiles the output without overlap: scatter is a reshape
    tiled = kh == kw == stride
    if tiled:
        padded = (xmat @ wmat).reshape(n, h, wd, c, kh, kw).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, hp, wp)
    else:
        padded = _scatter_windows(xmat @ wmat, (n, c, hp, wp), kh, kw, stride, 1, h, wd)
    out = np.ascontiguousarray(_crop(padded, padding))

    def bw(g):
        gp = _pad(g, padding)
        if tiled:
            gcols = gp.reshape(n, c, h, kh, wd, kw).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * wd, -1)
        else:
            gcols = _windows(np.ascontiguousarray(gp), kh, kw, stride, 1, h, wd)
        gx = (gcols @ wmat.T).reshape(n, h, wd, f).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xmat.T @ gcols).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return record("conv2d_transpose", out, (x, w), bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(function: Callable[..., Tensor], point, epsilon: float = 1e-4) -> float:
    """Compare backprop gradients with Richardson-extrapolated central differences.

    ``function`` takes one Tensor per array in ``point`` (a single array or a
    list of arrays) and returns a scalar Tensor. The numeric derivative
    combines steps ``epsilon`` and ``epsilon / 2`` so its truncation error is
    fourth order. Returns the maximum over all coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = function(*tensors)
    backward(tape, out, tensors)
    analytic = [t.grad for t in tensors]

    def evaluate(vals) -> float:
        return float(function(*[Tensor(v) for v in vals]).data)

    worst = 0.0
    for which, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            diffs = []
            for h in (epsilon, epsilon / 2):
                flat[i] = orig + h
                fp = evaluate(arrays)
                flat[i] = orig - h
                fm = evaluate(arrays)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    coord = np.unravel_index(i, base.shape)
                    raise GradCheckError(
                        f"non-finite evaluation at input {which}, coordinate {tuple(int(c) for c in coord)}")
                diffs.append((fp - fm) / (2 * h))
            numeric = (4 * diffs[1] - diffs[0]) / 3
            a = float(analytic[which].reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
