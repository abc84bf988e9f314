"""Activation and weight quantizers plus their straight-through gradients.

Conventions that the rest of the package leans on:

* ``round_half_away`` rounds ties away from zero (``np.round`` rounds to
  even, which is the wrong convention here).
* k-bit activations live on the codebook {0, 1, ..., 2^k - 1} / (2^k - 1).
  ``qrelu_levels`` produces the integer level; every consumer that cares
  about bit-exactness (the real-valued engine, the threshold fold) calls
  this one function so they can never disagree.
* Ternary weight codes are {-1, 0, +1}; binary codes are {-1, +1} with
  sign(0) = +1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateDistributionError, ShapeError


def _check_k(k: int) -> int:
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigError(f"bit width k must be an integer >= 1, got {k!r}")
    return int(k)


def levels_of(k: int) -> int:
    """Top level of the k-bit codebook, 2^k - 1."""
    return (1 << _check_k(k)) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def qrelu_levels(x: np.ndarray, k: int) -> np.ndarray:
    """Integer quantization level of the k-bit hard-sigmoid activation.

    k == 1 degenerates to a step function 1_{x > 0}; for k > 1 the level
    is round(x * (2^k - 1)) saturated into [0, 2^k - 1].  (The round is
    half-away-from-zero; ``floor(v + 0.5)`` coincides with it on v >= 0
    and everything negative saturates to 0 anyway.)
    """
    k = _check_k(k)
    x = np.asarray(x, dtype=np.float64)
    if k == 1:
        return (x > 0).astype(np.float64)
    top = float(levels_of(k))
    lv = np.array(x)  # copy; keeps 0-d inputs ndarray so the in-place ops hold
    lv *= top
    lv += 0.5
    np.floor(lv, out=lv)
    np.clip(lv, 0.0, top, out=lv)
    return lv


def qrelu_forward(x: np.ndarray, k: int) -> np.ndarray:
    """k-bit quantized activation, output on the codebook in [0, 1]."""
    k = _check_k(k)
    lv = qrelu_levels(x, k)
    if k == 1:
        return lv
    lv /= float(levels_of(k))
    return lv


def ste_mask(x: np.ndarray) -> np.ndarray:
    """Straight-through gradient mask 1_{|x| <= 1} (0/1 boolean array;
    multiplying a float gradient by it applies the gate)."""
    return np.abs(np.asarray(x, dtype=np.float64)) <= 1.0


qrelu_backward = ste_mask


def bitshift_forward(y: np.ndarray, k: int) -> np.ndarray:
    """Halve a codebook value by an integer shift of its level.

    For k > 1 the level is shifted right (floor); k == 1 instead rounds
    the half up, which makes the operator an OR gate on sums of two
    binary codewords.  Inputs are expected to be integer multiples of
    1/(2^k - 1) (sums of codebook values are); the level is snapped with
    rint first so float noise from upstream arithmetic cannot move a
    value across the floor boundary.
    """
    k = _check_k(k)
    y = np.asarray(y, dtype=np.float64)
    if k == 1:
        half = np.array(y)
        half *= 0.5
        np.ceil(half, out=half)
        return half
    top = float(levels_of(k))
    lv = np.array(y)
    lv *= top
    np.rint(lv, out=lv)
    lv *= 0.5
    np.floor(lv, out=lv)
    lv /= top
    return lv


def bitshift_backward(y: np.ndarray) -> np.ndarray:
    """The halving op is treated as identity by the straight-through rule."""
    return np.ones_like(np.asarray(y, dtype=np.float64))


def ternary_quantize(w: np.ndarray, s: float) -> np.ndarray:
    """Balanced ternary code: clip(round(w / s), -1, +1) with s > 0."""
    if not s > 0:
        raise ConfigError(f"ternary step size must be positive, got {s}")
    w = np.asarray(w, dtype=np.float64)
    return np.clip(round_half_away(w / s), -1.0, 1.0)


def binarize(w: np.ndarray) -> np.ndarray:
    """Binary code {-1, +1} with the zero tie broken towards +1."""
    w = np.asarray(w, dtype=np.float64)
    return np.where(w >= 0.0, 1.0, -1.0)


def compute_tertiles(w: np.ndarray) -> tuple[float, float]:
    """First and second tertile of the flattened weights.

    Sorted-order statistics at indices floor(N/3) and floor(2N/3); needs
    at least 3 elements to be meaningful.
    """
    flat = np.sort(np.asarray(w, dtype=np.float64).ravel())
    n = flat.size
    if n < 3:
        raise ShapeError(f"tertiles need at least 3 elements, got {n}")
    return float(flat[n // 3]), float(flat[(2 * n) // 3])


def update_step_size(q1: float, q2: float) -> float:
    """Step size |q1| + |q2| from the current tertiles.

    Raises :class:`DegenerateDistributionError` when both tertiles are
    exactly zero (more than a third of the weights collapsed onto 0);
    callers keep the previous step size in that case.
    """
    s = abs(q1) + abs(q2)
    if s == 0.0:
        raise DegenerateDistributionError(
            "both tertiles are zero; step size undefined for a collapsed distribution"
        )
    return float(s)


@dataclass
class TernarySpec:
    """Per-layer ternary quantization state: step size and the tertiles
    it was derived from."""

    s: float = 1.0
    q1: float = 0.0
    q2: float = 0.0

    def refresh(self, w: np.ndarray) -> bool:
        """Recompute tertiles and step size from ``w``.

        Returns True if the step size was updated, False if the
        distribution was degenerate and the old step size was kept.
        """
        self.q1, self.q2 = compute_tertiles(w)
        try:
            self.s = update_step_size(self.q1, self.q2)
            return True
        except DegenerateDistributionError:
            return False
