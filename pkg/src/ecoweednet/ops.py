"""Differentiable operations on :class:`~ecoweednet.tensor.Tensor`.

Convolution is cross-correlation (no kernel flip) computed through an
im2col matrix product. Generic arithmetic follows numpy broadcasting and
reduces gradients back with :func:`~ecoweednet.tensor.unbroadcast`; the
feature-map level :func:`elementwise` entry point is stricter and only
accepts equal shapes or per-channel scalars.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DegenerateChannelError, DimensionError
from .tensor import Tensor, as_tensor, record, unbroadcast

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "arctan",
    "maximum", "minimum", "clamp_min", "sum", "mean", "reshape", "transpose",
    "getitem", "concat", "matmul", "softmax", "log_softmax",
    "sigmoid", "silu", "symmetric_sigmoid", "activation", "elementwise",
    "conv2d", "batch_norm", "maxpool2d", "upsample_nearest", "concat_channels",
    "channel_moments", "bce_with_logits", "mac_counter",
]

# ---------------------------------------------------------------------------
# MAC instrumentation (used to cross-check the analytic accountant)

_mac_state = threading.local()


@contextlib.contextmanager
def mac_counter() -> Iterator[dict]:
    """Tally multiply-accumulates executed by conv2d and matmul.

    Yields a dict whose ``"macs"`` entry grows as ops run.
    """
    tally = {"macs": 0}
    stack = getattr(_mac_state, "stack", None)
    if stack is None:
        stack = _mac_state.stack = []
    stack.append(tally)
    try:
        yield tally
    finally:
        stack.remove(tally)


def _count_macs(n: int) -> None:
    for tally in getattr(_mac_state, "stack", ()):
        tally["macs"] += int(n)


# ---------------------------------------------------------------------------
# Arithmetic


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    if exponent == 2:
        return record(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return record(ad ** exponent, (a,), lambda g: (exponent * g * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def arctan(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.arctan(ad), (a,), lambda g: (g / (1.0 + ad * ad),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data

    def backward(g):
        return unbroadcast(np.where(pick_a, g, 0), a.shape), unbroadcast(np.where(pick_a, 0, g), b.shape)

    return record(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data <= b.data

    def backward(g):
        return unbroadcast(np.where(pick_a, g, 0), a.shape), unbroadcast(np.where(pick_a, 0, g), b.shape)

    return record(np.where(pick_a, a.data, b.data), (a, b), backward)


def clamp_min(a: Tensor, low: float) -> Tensor:
    keep = a.data > low
    return record(np.where(keep, a.data, np.asarray(low, a.dtype)), (a,), lambda g: (np.where(keep, g, 0),))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / builtins.max(count, 1))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Slicing and fancy indexing; gradients scatter back (with accumulation)."""
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            g[(slice(None),) * axis + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (both operands rank ≥ 2)."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2", axis="rank")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner sizes {ad.shape[-1]} != {bd.shape[-2]}", axis="inner")
    out = np.matmul(ad, bd)
    _count_macs(out.size * ad.shape[-1])

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# Activations


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def symmetric_sigmoid(a: Tensor) -> Tensor:
    """``sigmoid(x) - 1/2``: odd, bounded in (-1/2, 1/2)."""
    s = _sigmoid_np(a.data)
    # sigmoid(x) - 1/2 == tanh(x/2)/2, which is exactly odd in floating point
    out = 0.5 * np.tanh(0.5 * a.data)
    return record(out, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)
    return record(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def identity(a: Tensor) -> Tensor:
    return a


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "silu": silu,
    "symmetric_sigmoid": symmetric_sigmoid,
    "identity": identity,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def elementwise(x: Tensor, y, op: str) -> Tensor:
    """Feature-map ``mul``/``add`` restricted to equal shapes or per-channel scalars.

    ``y`` may be a full ``(N, C, H, W)`` map, a ``(C,)`` vector or a
    ``(1, C, 1, 1)`` tensor.
    """
    y = as_tensor(y, like=x)
    if x.ndim != 4:
        raise DimensionError(f"expected a rank-4 feature map, got shape {x.shape}", axis="rank")
    if y.shape != x.shape:
        c = x.shape[1]
        if y.shape == (c,):
            y = reshape(y, (1, c, 1, 1))
        elif y.shape != (1, c, 1, 1):
            for name, i in zip(("batch", "channels", "height", "width"), range(4)):
                if y.ndim == 4 and y.shape[i] != x.shape[i]:
                    raise DimensionError(f"shape {y.shape} incompatible with {x.shape}", axis=name)
            raise DimensionError(f"shape {y.shape} incompatible with {x.shape}", axis="rank")
    if op in ("mul", "⊙"):
        return mul(x, y)
    if op in ("add", "⊕"):
        return add(x, y)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# Convolution, normalization, pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s_n, s_c, s_h, s_w = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s_n, s_c, s_h, s_w, s_h * stride, s_w * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        hi = i + stride * (ho - 1) + 1
        for j in range(kw):
            wj = j + stride * (wo - 1) + 1
            out[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of an NCHW map with an ``(Cout, Cin/groups, k, k)`` kernel."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be rank 4, got shape {x.shape}", axis="rank")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be rank 4, got shape {weight.shape}", axis="rank")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or c % groups or cout % groups:
        raise DimensionError(f"groups={groups} does not divide channels {c}->{cout}", axis="channels")
    if cin_g * groups != c:
        raise DimensionError(
            f"input has {c} channels but weight expects {cin_g * groups}", axis="channels"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)", axis="channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1:
        raise DimensionError(f"kernel {kh} larger than padded height {h + 2 * padding}", axis="height")
    if wo < 1:
        raise DimensionError(f"kernel {kw} larger than padded width {w + 2 * padding}", axis="width")

    xd = x.data
    wd = weight.data.astype(xd.dtype, copy=False)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        xp_shape = xd.shape
        cols = xd.reshape(n, c, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        xp_shape = xp.shape
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    L = ho * wo
    kdim = cin_g * kh * kw
    og = cout // groups
    if groups == 1:
        w2 = wd.reshape(cout, kdim)
        out = np.matmul(w2, cols)
    else:
        cols_g = cols.reshape(n, groups, kdim, L)
        w_g = wd.reshape(groups, og, kdim)
        out = np.matmul(w_g, cols_g).reshape(n, cout, L)
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False)[:, None]
    _count_macs(n * cout * kdim * L)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(n, cout, L)
        gx = gw = gb = None
        if groups == 1:
            if weight.requires_grad:
                gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
            if x.requires_grad:
                gcols = np.matmul(w2.T, g3)
        else:
            gg = g3.reshape(n, groups, og, L)
            if weight.requires_grad:
                gw = np.einsum("ngol,ngkl->gok", gg, cols_g, optimize=True).reshape(weight.shape)
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(w_g, 1, 2), gg).reshape(n, c * kh * kw, L)
        if x.requires_grad:
            if pointwise:
                gx = gcols.reshape(xd.shape)
            else:
                gxp = _col2im(gcols, xp_shape, kh, kw, stride, ho, wo)
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out.reshape(n, cout, ho, wo), inputs, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.03,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional). In inference
    mode the frozen running statistics turn this into a per-channel affine.
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,):
        raise DimensionError(f"batch norm has {gamma.shape[0]} channels, input has {c}", axis="channels")
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = gd * xhat + bd
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        unbiased = var.reshape(c) * (m / builtins.max(m - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gg = gbeta = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=axes)
            if beta.requires_grad:
                gbeta = g.sum(axis=axes)
            if x.requires_grad:
                dxhat = g * gd
                gx = (inv / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            return gx, gg, gbeta

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv
        out = gd * xhat + bd

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = g * gd * inv if x.requires_grad else None
            return gx, gg, gbeta

    return record(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def maxpool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d input must be rank 4, got shape {x.shape}", axis="rank")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"pool window {k} larger than padded input {h}x{w}", axis="height")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf) if padding else xd
    s_n, s_c, s_h, s_w = xp.strides
    windows = as_strided(
        xp, shape=(n, c, ho, wo, k, k),
        strides=(s_n, s_c, s_h * stride, s_w * stride, s_h, s_w), writeable=False,
    ).reshape(n, c, ho, wo, k * k)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            hi = i + stride * (ho - 1) + 1
            for j in range(k):
                wj = j + stride * (wo - 1) + 1
                gxp[:, :, i:hi:stride, j:wj:stride] += np.where(arg == i * k + j, g, 0)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return record(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), backward)


def concat_channels(maps: Sequence[Tensor]) -> Tensor:
    maps = list(maps)
    ref = maps[0].shape
    for m in maps[1:]:
        if m.ndim != 4:
            raise DimensionError(f"concat input must be rank 4, got {m.shape}", axis="rank")
        for name, i in (("batch", 0), ("height", 2), ("width", 3)):
            if m.shape[i] != ref[i]:
                raise DimensionError(f"concat shapes {ref} and {m.shape} differ", axis=name)
    return concat(maps, axis=1)


# ---------------------------------------------------------------------------
# Statistics and losses


def channel_moments(x: Tensor, mode: str = "leave-one-out") -> tuple[Tensor, Tensor]:
    """Per-neuron leave-one-out or per-channel mean and variance.

    Leave-one-out moments exclude the neuron itself:
    ``mu_t = (S - t)/(M-1)`` and ``var_t = ((Q - t^2) - (M-1) mu_t^2)/(M-1)``
    with ``S``/``Q`` the channel sum and sum of squares. Values are centred
    on the channel mean first (the moments are shift-equivariant), which
    keeps the difference of sums well conditioned in single precision.

    Whole-channel mode returns ``(N, C, 1, 1)`` moments with the variance
    normalized by ``M - 1``, matching the usual SimAM reference code.
    """
    if x.ndim != 4:
        raise DimensionError(f"expected rank-4 feature map, got {x.shape}", axis="rank")
    m = x.shape[2] * x.shape[3]
    if mode in ("leave-one-out", "loo"):
        if m < 2:
            raise DegenerateChannelError(
                f"leave-one-out moments need H*W >= 2, got {x.shape[2]}x{x.shape[3]}"
            )
        centre = mean(x, axis=(2, 3), keepdims=True)
        xc = x - centre
        s = sum(xc, axis=(2, 3), keepdims=True)
        q = sum(xc * xc, axis=(2, 3), keepdims=True)
        mu_c = (s - xc) * (1.0 / (m - 1))
        var = ((q - xc * xc) - mu_c * mu_c * (m - 1)) * (1.0 / (m - 1))
        return mu_c + centre, clamp_min(var, 0.0)
    if mode in ("whole-channel", "whole"):
        mu = mean(x, axis=(2, 3), keepdims=True)
        d = x - mu
        var = sum(d * d, axis=(2, 3), keepdims=True) * (1.0 / builtins.max(m - 1, 1))
        return mu, var
    raise ValueError(f"unknown moments mode {mode!r}")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (targets are constants)."""
    x = logits.data
    z = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=x.dtype)
    out = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return record(out, (logits,), lambda g: (g * (s - z),))
