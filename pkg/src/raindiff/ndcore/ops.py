"""Differentiable primitive ops.

Every op validates its shape rule up front (ShapeError names the
offending shapes), computes the forward value in numpy, and registers a
backward closure returning one gradient per parent (None for parents
outside the graph). No silent broadcasting: tensor-tensor ops demand
exact shape equality; the only shape-changing ops are the explicit
layout primitives (concat/crop/broadcast/upsample/slice).

Convolution layout is channels-first (B, C, H, W) with zero padding and
stride 1 or 2; its gather/scatter inner loops live in `kernels`.
"""

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, record

_GN_EPS = 1e-5


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


# -- elementwise arithmetic -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with python-float coefficients (the one permitted
    broadcast)."""
    scale = float(scale)
    return record(scale * x.data + x.dtype.type(shift), (x,), lambda g: (scale * g,))


# -- activations ------------------------------------------------------------


def silu(x: Tensor) -> Tensor:
    xd = x.data
    # sigmoid via numpy's vectorized tanh: far faster than exp/where forms
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return record(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


# -- reductions -------------------------------------------------------------


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return record(x.data.mean(), (x,), lambda g: (np.full_like(x.data, g / n),))


def sum_all(x: Tensor) -> Tensor:
    return record(x.data.sum(), (x,), lambda g: (np.full_like(x.data, g),))


def mean_squared_error(a: Tensor, b: Tensor) -> Tensor:
    """mean((a - b)^2) over all elements."""
    _check_same_shape("mean_squared_error", a, b)
    d = a.data - b.data
    n = d.size

    def bwd(g):
        ga = (2.0 / n) * g * d
        return ga, -ga

    return record((d * d).mean(), (a, b), bwd)


def mean_absolute_error(a: Tensor, b: Tensor) -> Tensor:
    """mean(|a - b|) over all elements; subgradient 0 at ties."""
    _check_same_shape("mean_absolute_error", a, b)
    d = a.data - b.data
    n = d.size

    def bwd(g):
        ga = g * np.sign(d) / n
        return ga, -ga

    return record(np.abs(d).mean(), (a, b), bwd)


# -- layout primitives ------------------------------------------------------


def _channel_axis(x):
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected rank 3 or 4, got shape {tuple(x.shape)}")
    return x.ndim - 3


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    axis = _channel_axis(parts[0])
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise ShapeError(
                f"concat_channels: ranks differ ({parts[0].ndim} vs {p.ndim})"
            )
        ref = list(parts[0].shape)
        cur = list(p.shape)
        ref[axis] = cur[axis] = -1
        if ref != cur:
            raise ShapeError(
                f"concat_channels: shapes {tuple(parts[0].shape)} and {tuple(p.shape)}"
                " differ outside the channel axis"
            )
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def concat_batch(parts) -> Tensor:
    parts = list(parts)
    for p in parts:
        if p.ndim != 4:
            raise ShapeError(f"concat_batch: expected rank 4, got {tuple(p.shape)}")
        if p.shape[1:] != parts[0].shape[1:]:
            raise ShapeError(
                f"concat_batch: shapes {tuple(parts[0].shape)} and {tuple(p.shape)}"
                " differ outside the batch axis"
            )
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=0))

    return record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"slice_batch: expected rank 4, got {tuple(x.shape)}")
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_batch: [{start}:{stop}] out of range for {tuple(x.shape)}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return record(x.data[start:stop], (x,), bwd)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop on the trailing two axes (rank 3 or 4)."""
    H, W = x.shape[-2], x.shape[-1]
    if not (0 <= top and top + height <= H and 0 <= left and left + width <= W):
        raise ShapeError(
            f"crop2d: window (top={top}, left={left}, {height}x{width}) exceeds {tuple(x.shape)}"
        )
    sl = (Ellipsis, slice(top, top + height), slice(left, left + width))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return record(x.data[sl], (x,), bwd)


def broadcast_spatial(v: Tensor, hw) -> Tensor:
    """Explicitly expand (B, C) to (B, C, H, W); gradient sums over H, W."""
    if v.ndim != 2:
        raise ShapeError(f"broadcast_spatial: expected rank 2, got {tuple(v.shape)}")
    H, W = hw
    out = np.broadcast_to(v.data[:, :, None, None], (*v.shape, H, W))
    return record(out, (v,), lambda g: (g.sum(axis=(2, 3)),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected rank 4, got {tuple(x.shape)}")
    B, C, H, W = x.shape

    def bwd(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return record(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), bwd)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} @ {tuple(b.shape)} do not conform")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return record(ad @ bd, (a, b), bwd)


def bias_add_rows(x: Tensor, b: Tensor) -> Tensor:
    """(M, N) + (N,) row bias; gradient of the bias sums over rows."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add_rows: shapes {tuple(x.shape)} + {tuple(b.shape)}")
    return record(x.data + b.data[None, :], (x, b), lambda g: (g, g.sum(axis=0)))


# -- convolution ------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D convolution (cross-correlation), stride 1 or 2.

    x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,) or None.
    Implemented as im2col + one batched GEMM; the backward pass reuses the
    saved columns for the weight gradient and scatter-adds for the input
    gradient.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: x {tuple(x.shape)} and w {tuple(w.shape)} must be rank 4")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: x has {Cin} channels but w expects {Cin_w}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if b is not None and b.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {tuple(b.shape)} != ({Cout},)")
    out_h, out_w = kernels.conv_out_hw(H, W, kh, kw, stride, pad)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} (pad {pad}) does not fit input {H}x{W}"
        )

    parents = (x, w) if b is None else (x, w, b)
    wmat = w.data.reshape(Cout, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0

    if pointwise:
        # 1x1 stride-1: the column matrix is just the input reshaped
        cols = x.data.reshape(B, Cin, -1)
        xp = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = kernels.im2col(xp, kh, kw, stride)  # (B, Cin*kh*kw, N)

    out = np.matmul(wmat, cols)  # (B, Cout, N)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(B, Cout, out_h, out_w)

    def bwd(g):
        go = g.reshape(B, Cout, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, go)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gxp = kernels.col2im(gcols, xp.shape, kh, kw, stride)
                gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
                gx = np.ascontiguousarray(gx)
        if b is not None and b.requires_grad:
            gb = go.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    return record(out, parents, bwd)


# -- normalization ----------------------------------------------------------


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int) -> Tensor:
    """Per-sample group normalization over (C/groups, H, W) blocks, then a
    per-channel scale and shift."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected rank 4, got {tuple(x.shape)}")
    B, C, H, W = x.shape
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"group_norm: gamma {tuple(gamma.shape)} / beta {tuple(beta.shape)} != ({C},)"
        )
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(_GN_EPS))
    xhat = ((xg - mu) * inv).reshape(B, C, H, W)
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxh = (g * gamma.data[:, None, None]).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (
                dxh
                - dxh.mean(axis=2, keepdims=True)
                - xh * (dxh * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(B, C, H, W)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), bwd)
