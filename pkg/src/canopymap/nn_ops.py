"""Dense tensor ops with hand-written backward passes.

Every op takes (batch, channels, height, width) arrays, preserves the input
dtype (float64 in gradient checks, float32 in training), and returns the
output together with a backward closure mapping the output gradient to the
input/parameter gradients. Convolution is stride-1 same-padded
cross-correlation, computed as one matrix multiply per kernel tap on the
zero-padded input: every multiply reads a contiguous buffer, so the heavy
work runs in BLAS without materializing an im2col patch matrix.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NumericalError

# When enabled, every op output is checked for NaN/Inf.
debug_check_finite = False


def _checked(name: str, arr: np.ndarray) -> np.ndarray:
    if debug_check_finite and not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in output of {name}")
    return arr


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: str = "same"):
    """Same-padded stride-1 cross-correlation.

    One GEMM per kernel tap against the flattened padded input; the tap
    result is a full padded frame and the output accumulates its shifted
    window. Backward mirrors this tap loop for both dx and dw.

    Args:
        x: input (B, Cin, H, W).
        w: kernels (Cout, Cin, kh, kw), odd kh/kw.
        b: bias (Cout,).

    Returns:
        (y, backward) with y shaped (B, Cout, H, W); backward(dy) gives
        (dx, dw, db).
    """
    if stride != 1 or padding != "same":
        raise ValueError("only stride=1 with same padding is implemented")
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    cout, cin, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"same padding requires odd kernel dims, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} != ({cout},)")
    bsz, _, h, wd = x.shape
    ph, pw = kh // 2, kw // 2
    hp, wp = h + 2 * ph, wd + 2 * pw
    dtype = np.result_type(x, w)
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xp_flat = xp.reshape(bsz, cin, hp * wp)
    # tap-major kernel copy: w_taps[i, j] is contiguous, so matmul stays in BLAS
    w_taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1).astype(dtype, copy=False))

    y = np.empty((bsz, cout, h, wd), dtype=dtype)
    y[:] = b[:, None, None]
    z = np.empty((bsz, cout, hp * wp), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            np.matmul(w_taps[i, j], xp_flat, out=z)
            y += z.reshape(bsz, cout, hp, wp)[:, :, i : i + h, j : j + wd]

    def backward(dy: np.ndarray):
        db = dy.sum(axis=(0, 2, 3))
        dy_flat = np.ascontiguousarray(dy, dtype=dtype).reshape(bsz, cout, h * wd)
        dw = np.empty_like(w, dtype=dtype)
        dxp = np.zeros_like(xp)
        g = np.empty((bsz, cin, h * wd), dtype=dtype)
        win = np.empty((bsz, cin, h, wd), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                win[:] = xp[:, :, i : i + h, j : j + wd]
                win_t = win.reshape(bsz, cin, h * wd).transpose(0, 2, 1)
                dw[:, :, i, j] = np.matmul(dy_flat, win_t).sum(axis=0)
                np.matmul(w_taps[i, j].T, dy_flat, out=g)
                dxp[:, :, i : i + h, j : j + wd] += g.reshape(bsz, cin, h, wd)
        return dxp[:, :, ph : ph + h, pw : pw + wd], dw, db

    return _checked("conv2d", y), backward


def maxpool2(x: np.ndarray):
    """2x2 max pooling, stride 2; backward routes the gradient to the argmax
    cell of each window (first cell wins ties)."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2 expects 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.reshape(bsz, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(dy: np.ndarray):
        dwin = np.zeros((bsz, c, ho, wo, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        return (
            dwin.reshape(bsz, c, ho, wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bsz, c, h, w)
        )

    return _checked("maxpool2", y), backward


def upsample_concat(x: np.ndarray, skip: np.ndarray):
    """Nearest-neighbor 2x upsample of x, concatenated with skip on the
    channel axis (upsampled channels first)."""
    if x.ndim != 4 or skip.ndim != 4:
        raise ValueError("upsample_concat expects 4-d inputs")
    bsz, c, h, w = x.shape
    if skip.shape[0] != bsz or skip.shape[2:] != (2 * h, 2 * w):
        raise ValueError(
            f"skip shape {skip.shape} incompatible with upsampled {(bsz, c, 2 * h, 2 * w)}"
        )
    up = x.repeat(2, axis=2).repeat(2, axis=3)
    y = np.concatenate([up, skip], axis=1)

    def backward(dy: np.ndarray):
        d_up = dy[:, :c]
        d_skip = dy[:, c:]
        dx = d_up.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5))
        return dx, d_skip

    return _checked("upsample_concat", y), backward


def relu(x: np.ndarray):
    y = np.maximum(x, 0)

    def backward(dy: np.ndarray):
        return dy * (x > 0)

    return _checked("relu", y), backward


def sigmoid(x: np.ndarray):
    y = expit(x)

    def backward(dy: np.ndarray):
        return dy * y * (1.0 - y)

    return _checked("sigmoid", y), backward


def linear(x: np.ndarray):
    def backward(dy: np.ndarray):
        return dy

    return x, backward
