"""The four trainable networks: two conditional noise estimators (derain
and rain-generation directions) and two plain image-to-image generators.

Both are small channels-first U-Nets with shared structure:

  * 3 resolution levels, widths (32, 64, 128), 2 residual blocks each,
    stride-2 conv downsampling, nearest-neighbor 2x upsampling with skip
    concatenation, GroupNorm(8) + SiLU throughout.
  * The noise estimator takes 6 input channels (noisy image concatenated
    with its conditioning image along channels) plus a sinusoidal
    timestep embedding of width 128, projected per residual block.
  * The generator maps 3 -> 3 channels with a tanh output, so generated
    images stay inside the [-1, 1] value domain.

Parameters live in flat ordered dicts keyed "module.level.block.tensor"
(e.g. "enc1.res0.conv1.w"); the forward pass is driven entirely by which
keys exist, so a block whose keys are absent is skipped. The second conv
of every residual block is zero-initialized, which makes each block an
identity map on its trunk at initialization.

Spatial sizes must be divisible by 2^(levels-1) (4 for the default
3-level nets) so the decoder mirrors the encoder exactly.
"""

import math

import numpy as np

from . import ndcore as nd
from .ndcore import ShapeError, Tensor
from .ndcore.tensor import record

GN_GROUPS = 8
DEFAULT_WIDTHS = (32, 64, 128)
TIME_DIM = 128
_RES_BLOCKS = 2


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _normal(rng, shape, fan_in, dtype=np.float32):
    std = math.sqrt(2.0 / fan_in)
    return rng.standard_normal(shape, dtype=dtype) * dtype(std)


def _conv_params(rng, out, name, cout, cin, k, zero=False):
    if zero:
        w = np.zeros((cout, cin, k, k), dtype=np.float32)
    else:
        w = _normal(rng, (cout, cin, k, k), cin * k * k)
    out[f"{name}.w"] = Tensor(w, requires_grad=True)
    out[f"{name}.b"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)


def _gn_params(out, name, channels):
    out[f"{name}.g"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
    out[f"{name}.b"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)


def _linear_params(rng, out, name, fan_in, fan_out):
    out[f"{name}.w"] = Tensor(_normal(rng, (fan_in, fan_out), fan_in), requires_grad=True)
    out[f"{name}.b"] = Tensor(np.zeros(fan_out, np.float32), requires_grad=True)


def _res_params(rng, out, prefix, cin, cout, time_dim=None):
    _gn_params(out, f"{prefix}.gn1", cin)
    _conv_params(rng, out, f"{prefix}.conv1", cout, cin, 3)
    if time_dim is not None:
        _linear_params(rng, out, f"{prefix}.temb", time_dim, cout)
    _gn_params(out, f"{prefix}.gn2", cout)
    _conv_params(rng, out, f"{prefix}.conv2", cout, cout, 3, zero=True)
    if cin != cout:
        _conv_params(rng, out, f"{prefix}.skip", cout, cin, 1)


def _init_unet(rng, widths, in_ch, out_ch, time_dim):
    params = {}
    _conv_params(rng, params, "in.conv", widths[0], in_ch, 3)
    if time_dim is not None:
        _linear_params(rng, params, "temb.lin0", time_dim, time_dim)
        _linear_params(rng, params, "temb.lin1", time_dim, time_dim)

    c = widths[0]
    for lvl, w in enumerate(widths):
        for blk in range(_RES_BLOCKS):
            _res_params(rng, params, f"enc{lvl}.res{blk}", c, w, time_dim)
            c = w
        if lvl < len(widths) - 1:
            _conv_params(rng, params, f"down{lvl}.conv", w, w, 3)

    for lvl in range(len(widths) - 2, -1, -1):
        c = widths[lvl + 1] + widths[lvl]  # upsampled trunk + skip concat
        for blk in range(_RES_BLOCKS):
            _res_params(rng, params, f"dec{lvl}.res{blk}", c, widths[lvl], time_dim)
            c = widths[lvl]

    _gn_params(params, "out.gn", widths[0])
    _conv_params(rng, params, "out.conv", out_ch, widths[0], 3)
    return params


def init_noise_estimator(rng, widths=DEFAULT_WIDTHS, time_dim=TIME_DIM):
    """Conditional noise estimator: 6 input channels (noisy + condition).

    Widths must be divisible by GN_GROUPS and should leave at least two
    channels per group: with one channel per group the normalization
    cancels the per-channel time-embedding shift entirely.
    """
    return _init_unet(rng, widths, in_ch=6, out_ch=3, time_dim=time_dim)


def init_generator(rng, widths=DEFAULT_WIDTHS):
    """Plain 3->3 translation U-Net, tanh-bounded output."""
    return _init_unet(rng, widths, in_ch=3, out_ch=3, time_dim=None)


def param_count(params) -> int:
    return sum(t.size for t in params.values())


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t: int, dim: int = TIME_DIM) -> np.ndarray:
    """Geometric sin/cos features of an integer timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / (half - 1))
    args = float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(np.float32)


def _levels_of(params) -> int:
    lvl = 0
    while f"enc{lvl}.res0.conv1.w" in params:
        lvl += 1
    return lvl


def _res_block(params, prefix, h, temb_act=None):
    y = nd.group_norm(h, params[f"{prefix}.gn1.g"], params[f"{prefix}.gn1.b"], GN_GROUPS)
    y = nd.silu(y)
    y = nd.conv2d(y, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], pad=1)
    if temb_act is not None:
        proj = nd.bias_add_rows(
            nd.matmul(temb_act, params[f"{prefix}.temb.w"]), params[f"{prefix}.temb.b"]
        )
        y = nd.add(y, nd.broadcast_spatial(proj, (y.shape[2], y.shape[3])))
    y = nd.group_norm(y, params[f"{prefix}.gn2.g"], params[f"{prefix}.gn2.b"], GN_GROUPS)
    y = nd.silu(y)
    y = nd.conv2d(y, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], pad=1)
    if f"{prefix}.skip.w" in params:
        h = nd.conv2d(h, params[f"{prefix}.skip.w"], params[f"{prefix}.skip.b"])
    return nd.add(y, h)


def _run_unet(params, x, temb_act=None):
    levels = _levels_of(params)
    factor = 1 << (levels - 1)
    H, W = x.shape[2], x.shape[3]
    if H % factor or W % factor:
        raise ShapeError(
            f"spatial size {H}x{W} must be divisible by {factor} for {levels} levels"
        )

    h = nd.conv2d(x, params["in.conv.w"], params["in.conv.b"], pad=1)
    skips = []
    for lvl in range(levels):
        blk = 0
        while f"enc{lvl}.res{blk}.conv1.w" in params:
            h = _res_block(params, f"enc{lvl}.res{blk}", h, temb_act)
            blk += 1
        if lvl < levels - 1:
            skips.append(h)
            h = nd.conv2d(
                h, params[f"down{lvl}.conv.w"], params[f"down{lvl}.conv.b"], stride=2, pad=1
            )

    for lvl in range(levels - 2, -1, -1):
        h = nd.upsample_nearest2x(h)
        h = nd.concat_channels([h, skips[lvl]])
        blk = 0
        while f"dec{lvl}.res{blk}.conv1.w" in params:
            h = _res_block(params, f"dec{lvl}.res{blk}", h, temb_act)
            blk += 1

    h = nd.group_norm(h, params["out.gn.g"], params["out.gn.b"], GN_GROUPS)
    h = nd.silu(h)
    return nd.conv2d(h, params["out.conv.w"], params["out.conv.b"], pad=1)


def predict_noise(params, x_t: Tensor, cond: Tensor, t: int, schedule) -> Tensor:
    """Estimate the noise inside x_t given the conditioning image and the
    timestep. Accepts (3, H, W) or (B, 3, H, W); output matches x_t."""
    if x_t.shape != cond.shape:
        raise ShapeError(
            f"predict_noise: x_t {tuple(x_t.shape)} vs cond {tuple(cond.shape)}"
        )
    if x_t.shape[-3] != 3:
        raise ShapeError(f"predict_noise: expected 3 channels, got {tuple(x_t.shape)}")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 1..{schedule.T}")

    squeeze = x_t.ndim == 3
    if squeeze:
        x_t = _batch_of_one(x_t)
        cond = _batch_of_one(cond)

    B = x_t.shape[0]
    emb = Tensor(np.tile(sinusoidal_embedding(t, TIME_DIM), (B, 1)))
    temb = nd.bias_add_rows(nd.matmul(emb, params["temb.lin0.w"]), params["temb.lin0.b"])
    temb = nd.bias_add_rows(
        nd.matmul(nd.silu(temb), params["temb.lin1.w"]), params["temb.lin1.b"]
    )
    temb_act = nd.silu(temb)

    out = _run_unet(params, nd.concat_channels([x_t, cond]), temb_act)
    return _squeeze_batch(out) if squeeze else out


def generate(params, img: Tensor) -> Tensor:
    """Translate an image, output tanh-bounded to [-1, 1]. Accepts
    (3, H, W) or (B, 3, H, W); output matches the input shape."""
    if img.shape[-3] != 3:
        raise ShapeError(f"generate: expected 3 channels, got {tuple(img.shape)}")
    squeeze = img.ndim == 3
    if squeeze:
        img = _batch_of_one(img)
    out = nd.tanh(_run_unet(params, img))
    return _squeeze_batch(out) if squeeze else out


# rank-3 <-> rank-4 bridges that stay on the graph


def _batch_of_one(img: Tensor) -> Tensor:
    return record(img.data[None], (img,), lambda g: (g[0],))


def _squeeze_batch(x: Tensor) -> Tensor:
    return record(x.data[0], (x,), lambda g: (g[None],))
