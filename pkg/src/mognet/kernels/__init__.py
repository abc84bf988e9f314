"""Convolution backend selection.

Two interchangeable implementations of the hot convolution loops live here:

* ``numba`` -- jitted direct loops (default whenever numba imports cleanly);
* ``numpy`` -- stride-trick im2col + matmul, no compilation step.

Pick one with the ``MOGNET_BACKEND`` environment variable before import,
or at runtime with :func:`set_backend`.  Integer results are identical
across backends; float results differ only by summation order.
"""
from __future__ import annotations

import os

from ..errors import ConfigError
from . import numpy_backend

try:
    from . import numba_backend

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba_backend = None  # type: ignore[assignment]
    _HAVE_NUMBA = False

_BACKENDS = {"numpy": numpy_backend}
if _HAVE_NUMBA:
    _BACKENDS["numba"] = numba_backend

_active = numpy_backend


def set_backend(name: str) -> None:
    """Switch the conv backend at runtime ("numba" or "numpy")."""
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ConfigError(
            f"unknown backend {name!r}; available: {sorted(_BACKENDS)}"
        ) from None


def active_backend() -> str:
    return _active.NAME


def conv2d_forward(x, w, groups, stride, pad):
    return _active.conv2d_forward(x, w, groups, stride, pad)


def conv2d_grad_input(gout, w, groups, stride, pad, h_in, w_in):
    return _active.conv2d_grad_input(gout, w, groups, stride, pad, h_in, w_in)


def conv2d_grad_weight(x, gout, groups, stride, pad, kh, kw):
    return _active.conv2d_grad_weight(x, gout, groups, stride, pad, kh, kw)


def _initial_backend() -> str:
    requested = os.environ.get("MOGNET_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ConfigError(
                f"MOGNET_BACKEND={requested!r} not recognised; available: {sorted(_BACKENDS)}"
            )
        return requested
    return "numba" if _HAVE_NUMBA else "numpy"


set_backend(_initial_backend())
