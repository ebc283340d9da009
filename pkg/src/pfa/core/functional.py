"""Differentiable operations over core.tensor.Tensor.

Convolutions are cross-correlations (no kernel flip). All ops cache only
what their backward closure needs; closures are dropped when the tape is
freed after backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, make_output


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_output(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_output(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return make_output(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_output(out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return make_output(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Numerically stable split over sign.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return make_output(out, (a,), bwd)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of x (N,C,*spatial) by one scalar from s (N,C)."""
    if s.data.shape != x.data.shape[:2]:
        raise ShapeError(f"scale_channels: scales {s.data.shape} do not match "
                         f"leading (batch, channel) dims of input {x.data.shape}")
    expand = s.data.reshape(s.data.shape + (1,) * (x.data.ndim - 2))
    xd = x.data
    spatial_axes = tuple(range(2, xd.ndim))

    def bwd(g):
        gx = g * expand
        gs = (g * xd).sum(axis=spatial_axes) if spatial_axes else g * xd
        return gx, gs

    return make_output(xd * expand, (x, s), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        if len(other) != len(base) or any(
                o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)):
            raise ShapeError(f"concat: incompatible shapes "
                             f"{[tuple(t.data.shape) for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(sizes)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return make_output(out, tensors, bwd)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of concat: slice x into consecutive chunks along axis."""
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to "
                         f"axis {axis} extent of {x.data.shape}")
    outs = []
    start = 0
    for size in sizes:
        outs.append(narrow(x, axis, start, size))
        start += size
    return outs


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    xshape = x.data.shape

    def bwd(g):
        full = np.zeros(xshape)
        full[idx] = g
        return (full,)

    return make_output(x.data[idx].copy(), (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.data.shape
    return make_output(x.data.reshape(tuple(shape)), (x,),
                       lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return make_output(np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy() if g.shape != shape else g,))


def mean_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    n = x.data.size
    return make_output(np.asarray(x.data.mean()), (x,),
                       lambda g: (np.broadcast_to(g / n, shape).copy(),))


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return make_output(x.data * f, (x,), lambda g: (g * f,))


# ---------------------------------------------------------------------------
# dense / convolution / pooling
# ---------------------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x (N,F) @ weight (out,F)^T + bias (out,)."""
    if x.data.ndim != 2:
        raise ShapeError(f"fully_connected: input must be (batch, features), got {x.data.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"fully_connected: weight {weight.data.shape} does not match "
                         f"input {x.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.data.shape} does not match "
                         f"weight {weight.data.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bwd(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return make_output(out, (x, weight, bias), bwd)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2D cross-correlation. x: (N,Cin,H,W), kernel: (Cout,Cin,kh,kw)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got input {x.data.shape}, "
                         f"kernel {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    cout, ck, kh, kw = kernel.data.shape
    if ck != cin:
        raise ShapeError(f"conv2d: channel mismatch between input {x.data.shape} "
                         f"and kernel {kernel.data.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel spatial dims must be odd, got {kernel.data.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kernel.data.shape} does not fit input "
                         f"{x.data.shape} with stride={stride}, padding={padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    kd = kernel.data
    out = np.zeros((n, cout, oh, ow))
    for i in range(kh):
        for j in range(kw):
            xv = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            # (Cout,Cin) x (N,Cin,OH,OW) -> (Cout,N,OH,OW)
            out += np.tensordot(kd[:, :, i, j], xv, axes=([1], [1])).transpose(1, 0, 2, 3)

    xshape = x.data.shape

    def bwd(g):
        dk = np.zeros_like(kd)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xv = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                dk[:, :, i, j] = np.tensordot(g, xv, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    np.tensordot(kd[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx.reshape(xshape), dk

    return make_output(out, (x, kernel), bwd)


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 3D cross-correlation. x: (N,Cin,D,H,W), kernel: (Cout,Cin,kd,kh,kw)."""
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError(f"conv3d: need 5-d input and kernel, got input {x.data.shape}, "
                         f"kernel {kernel.data.shape}")
    n, cin, d, h, w = x.data.shape
    cout, ck, kd_, kh, kw = kernel.data.shape
    if ck != cin:
        raise ShapeError(f"conv3d: channel mismatch between input {x.data.shape} "
                         f"and kernel {kernel.data.shape}")
    if kd_ % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv3d: kernel spatial dims must be odd, got {kernel.data.shape}")
    od = (d + 2 * padding - kd_) // stride + 1
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if od < 1 or oh < 1 or ow < 1:
        raise ShapeError(f"conv3d: kernel {kernel.data.shape} does not fit input "
                         f"{x.data.shape} with stride={stride}, padding={padding}")

    pad = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    kdata = kernel.data
    out = np.zeros((n, cout, od, oh, ow))
    for a in range(kd_):
        for i in range(kh):
            for j in range(kw):
                xv = xp[:, :, a:a + stride * od:stride,
                        i:i + stride * oh:stride, j:j + stride * ow:stride]
                out += np.tensordot(kdata[:, :, a, i, j], xv,
                                    axes=([1], [1])).transpose(1, 0, 2, 3, 4)

    xshape = x.data.shape

    def bwd(g):
        dk = np.zeros_like(kdata)
        dxp = np.zeros_like(xp)
        for a in range(kd_):
            for i in range(kh):
                for j in range(kw):
                    xv = xp[:, :, a:a + stride * od:stride,
                            i:i + stride * oh:stride, j:j + stride * ow:stride]
                    dk[:, :, a, i, j] = np.tensordot(g, xv, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                    dxp[:, :, a:a + stride * od:stride,
                        i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        np.tensordot(kdata[:, :, a, i, j], g,
                                     axes=([0], [1])).transpose(1, 0, 2, 3, 4)
        dx = dxp[:, :, pad:pad + d, pad:pad + h, pad:pad + w] if pad else dxp
        return dx.reshape(xshape), dk

    return make_output(out, (x, kernel), bwd)


def avg_pool(x: Tensor, window: int, dims: int) -> Tensor:
    """Mean over non-overlapping window^dims blocks. Extents must divide."""
    if dims not in (2, 3):
        raise ShapeError(f"avg_pool: dims must be 2 or 3, got {dims}")
    if x.data.ndim != dims + 2:
        raise ShapeError(f"avg_pool: expected {dims + 2}-d input for dims={dims}, "
                         f"got {x.data.shape}")
    spatial = x.data.shape[2:]
    if any(s % window for s in spatial):
        raise ShapeError(f"avg_pool: spatial extents {spatial} not divisible by "
                         f"window {window}")
    n, c = x.data.shape[:2]
    outsp = tuple(s // window for s in spatial)
    if dims == 2:
        v = x.data.reshape(n, c, outsp[0], window, outsp[1], window)
        out = v.mean(axis=(3, 5))
        inv = 1.0 / window ** 2

        def bwd(g):
            gx = np.broadcast_to(g[:, :, :, None, :, None] * inv,
                                 (n, c, outsp[0], window, outsp[1], window))
            return (gx.reshape(x.data.shape).copy(),)
    else:
        v = x.data.reshape(n, c, outsp[0], window, outsp[1], window, outsp[2], window)
        out = v.mean(axis=(3, 5, 7))
        inv = 1.0 / window ** 3

        def bwd(g):
            gx = np.broadcast_to(g[:, :, :, None, :, None, :, None] * inv,
                                 (n, c, outsp[0], window, outsp[1], window, outsp[2], window))
            return (gx.reshape(x.data.shape).copy(),)

    return make_output(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N,C,*spatial) -> (N,C)."""
    if x.data.ndim < 3:
        raise ShapeError(f"global_avg_pool: need at least one spatial axis, got {x.data.shape}")
    spatial_axes = tuple(range(2, x.data.ndim))
    count = int(np.prod(x.data.shape[2:]))
    out = x.data.mean(axis=spatial_axes)
    xshape = x.data.shape

    def bwd(g):
        ge = g.reshape(g.shape + (1,) * len(spatial_axes))
        return (np.broadcast_to(ge / count, xshape).copy(),)

    return make_output(out, (x,), bwd)


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of (N,C,H,W) by an integer factor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2d: need 4-d input, got {x.data.shape}")
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.data.shape

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_output(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not trained by SGD)."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(running_mean=np.zeros(channels), running_var=np.ones(channels),
                   momentum=momentum, eps=eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Per-channel normalization over batch and spatial axes (channel axis 1)."""
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: params gamma {gamma.data.shape} / beta "
                         f"{beta.data.shape} do not match input channels of {x.data.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape1 = (1, c) + (1,) * (x.data.ndim - 2)
    gd = gamma.data.reshape(shape1)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(shape1)) * inv_std.reshape(shape1)
        out = gd * xhat + beta.data.reshape(shape1)
        count = x.data.size // c

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gd
            t1 = dxhat.sum(axis=axes).reshape(shape1)
            t2 = (dxhat * xhat).sum(axis=axes).reshape(shape1)
            dx = (inv_std.reshape(shape1) / count) * (count * dxhat - t1 - xhat * t2)
            return dx, dgamma, dbeta

        return make_output(out, (x, gamma, beta), bwd)

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(shape1)) * inv_std.reshape(shape1)
    out = gd * xhat + beta.data.reshape(shape1)

    def bwd_eval(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = g * gd * inv_std.reshape(shape1)
        return dx, dgamma, dbeta

    return make_output(out, (x, gamma, beta), bwd_eval)
