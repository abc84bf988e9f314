"""Pure-numpy convolution kernels (im2col + batched matmul).

Pointwise (1x1, stride-1) convs skip the im2col copy entirely: the
input is already the column matrix.  Float inputs go through BLAS;
integer inputs stay in int64 end to end.  No compilation step, so this
backend also serves as the reference the numba backend is tested
against.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _cols(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """im2col: (B, C, Hp, Wp) -> (B, C*kh*kw, Ho*Wo) plus output dims."""
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        return x.reshape(b, c, ho * wo), ho, wo
    sb, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return win.reshape(b, c * kh * kw, ho * wo), ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, groups: int, stride: int, pad: int) -> np.ndarray:
    co, cig, kh, kw = w.shape
    g = groups
    cols, ho, wo = _cols(_pad_hw(x, pad), kh, kw, stride)
    b = x.shape[0]
    if g == 1:
        out = w.reshape(co, -1)[None] @ cols
        return np.ascontiguousarray(out.reshape(b, co, ho, wo))
    colsg = cols.reshape(b, g, cig * kh * kw, ho * wo)
    wg = w.reshape(g, co // g, cig * kh * kw)
    out = wg[None] @ colsg
    return np.ascontiguousarray(out.reshape(b, co, ho, wo))


def conv2d_grad_input(
    gout: np.ndarray, w: np.ndarray, groups: int, stride: int, pad: int, h_in: int, w_in: int
) -> np.ndarray:
    b, co, ho, wo = gout.shape
    _, cig, kh, kw = w.shape
    g = groups
    ci = cig * g
    goutg = gout.reshape(b, g, co // g, ho * wo)
    wg = w.reshape(g, co // g, cig * kh * kw)
    # columns of the input gradient: (B, g, Cig*kh*kw, Ho*Wo)
    gcols = np.swapaxes(wg, 1, 2)[None] @ goutg
    gcols = gcols.reshape(b, ci, kh, kw, ho, wo)
    gxp = np.zeros((b, ci, h_in + 2 * pad, w_in + 2 * pad), dtype=gout.dtype)
    # col2im: slices of gxp overlap across taps, so scatter one tap at a time.
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += gcols[
                :, :, u, v
            ]
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad : pad + h_in, pad : pad + w_in])


def conv2d_grad_weight(
    x: np.ndarray, gout: np.ndarray, groups: int, stride: int, pad: int, kh: int, kw: int
) -> np.ndarray:
    b, co, ho, wo = gout.shape
    g = groups
    cols, _, _ = _cols(_pad_hw(x, pad), kh, kw, stride)
    ci = x.shape[1]
    colsg = cols.reshape(b, g, (ci // g) * kh * kw, ho * wo)
    goutg = gout.reshape(b, g, co // g, ho * wo)
    gw = (goutg @ np.swapaxes(colsg, 2, 3)).sum(axis=0)
    return np.ascontiguousarray(gw.reshape(co, ci // g, kh, kw))
