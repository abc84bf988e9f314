"""Core NCHW tensor ops: convolution, pooling, batch norm.

Everything here is functional and dtype-strict: float paths run in
float64, integer paths in int64.  Layer objects with state live in
:mod:`mognet.blocks`; this module only validates shapes and dispatches
to the selected conv backend.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def _check_4d(x: np.ndarray, what: str) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{what} must be a 4-D (N, C, H, W) array, got ndim={getattr(x, 'ndim', None)}")


def conv_padding(padding: str, kh: int, kw: int) -> int:
    """Resolve a padding mode string to a symmetric pad width."""
    if padding == "valid":
        return 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"padding='same' requires odd kernel dims, got {kh}x{kw}")
        return (kh - 1) // 2
    raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    groups: int = 1,
    padding: str = "same",
    stride: int = 1,
) -> np.ndarray:
    """Grouped 2-D cross-correlation, bias-free.

    Parameters
    ----------
    x : (N, C_in, H, W) array, float or integer.
    w : (C_out, C_in // groups, kh, kw) array.  Integer inputs require
        integer weights; the result is then an exact int64 accumulator.
    """
    _check_4d(x, "conv2d input")
    _check_4d(w, "conv2d weight")
    if groups < 1:
        raise ConfigError(f"groups must be >= 1, got {groups}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    co, cig, kh, kw = w.shape
    ci = x.shape[1]
    if ci % groups != 0 or co % groups != 0:
        raise ConfigError(f"channels in={ci} out={co} must both divide by groups={groups}")
    if cig != ci // groups:
        raise ShapeError(f"weight expects {cig * groups} input channels, tensor has {ci}")
    pad = conv_padding(padding, kh, kw)
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"spatial size {x.shape[2:]} too small for {kh}x{kw} kernel")

    if np.issubdtype(x.dtype, np.integer):
        if not np.issubdtype(w.dtype, np.integer):
            raise ConfigError("integer conv2d input requires integer weights")
        return kernels.conv2d_forward(x.astype(np.int64, copy=False), w.astype(np.int64), groups, stride, pad)
    return kernels.conv2d_forward(
        x.astype(np.float64, copy=False), w.astype(np.float64, copy=False), groups, stride, pad
    )


def conv2d_grad_input(gout: np.ndarray, w: np.ndarray, groups: int, padding: str, stride: int, h_in: int, w_in: int) -> np.ndarray:
    pad = conv_padding(padding, w.shape[2], w.shape[3])
    return kernels.conv2d_grad_input(
        gout.astype(np.float64, copy=False), w.astype(np.float64, copy=False), groups, stride, pad, h_in, w_in
    )


def conv2d_grad_weight(x: np.ndarray, gout: np.ndarray, groups: int, padding: str, stride: int, kh: int, kw: int) -> np.ndarray:
    pad = conv_padding(padding, kh, kw)
    return kernels.conv2d_grad_weight(
        x.astype(np.float64, copy=False), gout.astype(np.float64, copy=False), groups, stride, pad, kh, kw
    )


def accumulator_bound(w: np.ndarray, in_bound: int) -> int:
    """Worst-case |accumulator| for integer conv: sum_{taps} |w| * in_bound."""
    per_out = np.abs(w.astype(np.int64)).sum(axis=(1, 2, 3))
    return int(per_out.max()) * int(in_bound)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pool.  Returns (pooled, argmax-cache).

    H and W must be even; anything else is a configuration mistake in
    the surrounding architecture, so it raises rather than truncating.
    """
    _check_4d(x, "maxpool2x2 input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(gout: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c, ho, wo = gout.shape
    gwin = np.zeros((b, c, ho, wo, 4), dtype=gout.dtype)
    np.put_along_axis(gwin, idx[..., None], gout[..., None], axis=-1)
    return gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean, (N, C, H, W) -> (N, C)."""
    _check_4d(x, "global_avg_pool input")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ShapeError("global_avg_pool needs non-empty spatial dims")
    return x.mean(axis=(2, 3))


@dataclass
class BNParams:
    """Per-channel batch-norm state (bias-free conv nets keep the only
    additive terms of the whole network here)."""

    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    eps: float = BN_EPS

    @classmethod
    def identity(cls, channels: int) -> "BNParams":
        return cls(
            gamma=np.ones(channels, dtype=np.float64),
            beta=np.zeros(channels, dtype=np.float64),
            moving_mean=np.zeros(channels, dtype=np.float64),
            moving_var=np.ones(channels, dtype=np.float64),
        )

    def copy(self) -> "BNParams":
        return BNParams(
            self.gamma.copy(), self.beta.copy(), self.moving_mean.copy(), self.moving_var.copy(), self.eps
        )


def bn_affine(p: BNParams) -> tuple[np.ndarray, np.ndarray]:
    """Fold inference-mode BN into a per-channel affine y = scale*x + shift.

    Every consumer of inference-mode BN (the real engine, the threshold
    fold, size reporting) must go through this helper so they all see
    bit-identical float64 coefficients.
    """
    scale = p.gamma / np.sqrt(p.moving_var + p.eps)
    shift = p.beta - p.moving_mean * scale
    return scale, shift


def batch_norm_inference(x: np.ndarray, p: BNParams) -> np.ndarray:
    _check_4d(x, "batch_norm input")
    scale, shift = bn_affine(p)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batch_norm_train(x: np.ndarray, p: BNParams) -> tuple[np.ndarray, dict]:
    """Batch-statistics forward pass. Updates moving stats in place and
    returns (y, cache) where cache feeds :func:`batch_norm_backward`.

    Written as a fused affine y = a*x + b per channel (these layers sit
    on the hot path, so passes over the activation tensor are budgeted).
    """
    _check_4d(x, "batch_norm input")
    b, c, h, w = x.shape
    n = b * h * w
    if n == 0:
        raise ShapeError("batch_norm_train on an empty batch")
    mean = x.sum(axis=(0, 2, 3)) / n
    sq = np.einsum("bchw,bchw->c", x, x) / n
    var = np.maximum(sq - mean * mean, 0.0)  # biased variance
    inv_std = 1.0 / np.sqrt(var + p.eps)
    a = p.gamma * inv_std
    y = x * a[None, :, None, None]
    y += (p.beta - mean * a)[None, :, None, None]
    p.moving_mean *= BN_MOMENTUM
    p.moving_mean += (1.0 - BN_MOMENTUM) * mean
    p.moving_var *= BN_MOMENTUM
    p.moving_var += (1.0 - BN_MOMENTUM) * var
    cache = {"x": x, "mean": mean, "var": var, "inv_std": inv_std, "gamma": p.gamma, "n": n}
    return y, cache


def batch_norm_backward(gy: np.ndarray, cache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (gx, dgamma, dbeta) for the batch-statistics forward.

    gx is assembled as a per-channel affine combination A*gy + B*x + C,
    which is algebraically the usual batch-norm backward with xhat
    eliminated (saves materialising it in the cache).
    """
    x = cache["x"]
    mean = cache["mean"]
    inv_std = cache["inv_std"]
    gamma = cache["gamma"]
    n = cache["n"]
    dbeta = gy.sum(axis=(0, 2, 3))
    sxy = np.einsum("bchw,bchw->c", gy, x)
    dgamma = (sxy - mean * dbeta) * inv_std
    a = gamma * inv_std
    coef_x = -a * inv_std * dgamma / n
    const = -a * dbeta / n - coef_x * mean
    gx = gy * a[None, :, None, None]
    gx += x * coef_x[None, :, None, None]
    gx += const[None, :, None, None]
    return gx, dgamma, dbeta
