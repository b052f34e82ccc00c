"""Hot inner kernels: im2col gather and col2im scatter-add.

Two interchangeable backends:

  * "numba"  — @njit loops compiled lazily per dtype. Deliberately
    single-threaded: the surrounding convolutions hand their GEMMs to
    multi-threaded BLAS, and an extra OpenMP pool fighting BLAS's
    spin-waiting threads costs far more than the gather itself.
  * "numpy"  — stride-trick gather / sliced scatter-add, no compilation.

The backend is chosen once at import from the RAINDIFF_NUMBA env var:
"0"/"off"/"false" forces numpy, "1"/"on"/"true" requires numba (import
error surfaces), anything else (default "auto") uses numba when it
imports. `set_backend` flips it at runtime for tests and benchmarks
(see benchmarks/bench_kernels.py for a side-by-side).

Both backends are deterministic: gathers write each element once, and
col2im accumulates in a fixed loop order.

Layout contract: inputs are C-contiguous (B, C, H, W); columns are
(B, C*kh*kw, out_h*out_w) with the row index ordered (c, kh, kw).
Padding is the caller's job — these kernels see padded arrays only.
"""

import os

import numpy as np

_ENV_FLAG = os.environ.get("RAINDIFF_NUMBA", "auto").strip().lower()

if _ENV_FLAG in ("0", "off", "false", "no"):
    _HAVE_NUMBA = False
else:
    # the sandboxed TBB build trips a warning; omp behaves identically here
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        if _ENV_FLAG in ("1", "on", "true", "yes"):
            raise
        _HAVE_NUMBA = False

_active_backend = "numba" if _HAVE_NUMBA else "numpy"


def backend() -> str:
    """Name of the kernel backend currently in use ("numba" or "numpy")."""
    return _active_backend


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime. Raises if numba was requested but unavailable."""
    global _active_backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active_backend = name


def conv_out_hw(H: int, W: int, kh: int, kw: int, stride: int, pad: int):
    """Output spatial extents for a zero-padded strided convolution."""
    return (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    # The stride-1 branches index with unit stride so LLVM can vectorize
    # the inner copy/accumulate; the generic branch covers stride 2.

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, cols):
        B, C, Hp, Wp = xp.shape
        out_h = (Hp - kh) // stride + 1
        out_w = (Wp - kw) // stride + 1
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        if stride == 1:
                            dst = cols[b, row]
                            for oh in range(out_h):
                                src = xp[b, c, oh + i]
                                base = oh * out_w
                                for ow in range(out_w):
                                    dst[base + ow] = src[ow + j]
                        else:
                            for oh in range(out_h):
                                ih = oh * stride + i
                                base = oh * out_w
                                for ow in range(out_w):
                                    cols[b, row, base + ow] = xp[b, c, ih, ow * stride + j]

    @njit(cache=True)
    def _col2im_nb(cols, kh, kw, stride, xp):
        # xp arrives zeroed; accumulation order is the fixed loop order
        B, C, Hp, Wp = xp.shape
        out_h = (Hp - kh) // stride + 1
        out_w = (Wp - kw) // stride + 1
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        if stride == 1:
                            src = cols[b, row]
                            for oh in range(out_h):
                                dst = xp[b, c, oh + i]
                                base = oh * out_w
                                for ow in range(out_w):
                                    dst[ow + j] += src[base + ow]
                        else:
                            for oh in range(out_h):
                                ih = oh * stride + i
                                base = oh * out_w
                                for ow in range(out_w):
                                    xp[b, c, ih, ow * stride + j] += cols[b, row, base + ow]

# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def _im2col_np(xp, kh, kw, stride):
    B, C, Hp, Wp = xp.shape
    out_h = (Hp - kh) // stride + 1
    out_w = (Wp - kw) // stride + 1
    sB, sC, sH, sW = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, kh, kw, out_h, out_w),
        strides=(sB, sC, sH, sW, stride * sH, stride * sW),
        writeable=False,
    )
    return windows.reshape(B, C * kh * kw, out_h * out_w)


def _col2im_np(cols, kh, kw, stride, xp):
    B, C, Hp, Wp = xp.shape
    out_h = (Hp - kh) // stride + 1
    out_w = (Wp - kw) // stride + 1
    cols = cols.reshape(B, C, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[
                :, :, i, j
            ]


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Gather sliding windows of a padded (B, C, Hp, Wp) array into
    (B, C*kh*kw, out_h*out_w) columns. Always returns a fresh contiguous array."""
    B, C, Hp, Wp = xp.shape
    out_h = (Hp - kh) // stride + 1
    out_w = (Wp - kw) // stride + 1
    if _active_backend == "numba":
        cols = np.empty((B, C * kh * kw, out_h * out_w), dtype=xp.dtype)
        _im2col_nb(xp, kh, kw, stride, cols)
        return cols
    return np.ascontiguousarray(_im2col_np(xp, kh, kw, stride))


def col2im(cols: np.ndarray, out_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add (B, C*kh*kw, N) columns back into a zeroed padded array
    of `out_shape` = (B, C, Hp, Wp). Adjoint of im2col."""
    xp = np.zeros(out_shape, dtype=cols.dtype)
    if _active_backend == "numba":
        _col2im_nb(np.ascontiguousarray(cols), kh, kw, stride, xp)
    else:
        _col2im_np(cols, kh, kw, stride, xp)
    return xp
