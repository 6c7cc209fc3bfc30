"""Hot sampling kernels behind a backend switch.

``sample_columns`` builds the (deformable) im2col matrix: for every sample
``n``, channel ``c``, kernel point ``k`` and output position ``p`` it stores
``mod[n, k, p] * X[n, c](coords[n, k, :, p])`` with trilinear, zero-padded
sampling. ``scatter_columns`` is its adjoint with respect to the input, the
sampling coordinates and the modulation.
"""

from __future__ import annotations

import numpy as np

from .. import _backend
from . import _numpy

if _backend.HAS_NUMBA:
    from . import _numba
else:  # pragma: no cover
    _numba = None


def _impl(backend):
    name = backend or _backend.active_backend()
    return _numba if name == "numba" else _numpy


def _prepare(x, coords, mod):
    N = x.shape[0]
    K, P = coords.shape[1], coords.shape[3]
    if coords.shape != (N, K, 3, P):
        raise ValueError(f"coords must be (N, K, 3, P), got {coords.shape}")
    x = np.ascontiguousarray(x)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if mod is None:
        mod = np.ones((N, K, P))
    else:
        mod = np.ascontiguousarray(mod, dtype=np.float64)
        if mod.shape != (N, K, P):
            raise ValueError(f"modulation must be {(N, K, P)}, got {mod.shape}")
    return x, coords, mod


def sample_columns(x, coords, mod=None, backend=None):
    """Return float64 columns of shape ``(N, C, K, P)``."""
    x, coords, mod = _prepare(x, coords, mod)
    N, C = x.shape[:2]
    K, P = coords.shape[1], coords.shape[3]
    cols = np.empty((N, C, K, P))
    _impl(backend).sample_columns(x, coords, mod, cols)
    return cols


def scatter_columns(x, coords, grad_cols, mod=None, backend=None):
    """Adjoint of :func:`sample_columns`.

    Returns ``(grad_x, grad_coords, grad_mod)`` in float64.
    """
    x, coords, mod = _prepare(x, coords, mod)
    grad_cols = np.ascontiguousarray(grad_cols, dtype=np.float64)
    N, C = x.shape[:2]
    K, P = coords.shape[1], coords.shape[3]
    if grad_cols.shape != (N, C, K, P):
        raise ValueError(f"grad_cols must be {(N, C, K, P)}, got {grad_cols.shape}")
    grad_x = np.zeros(x.shape)
    grad_coords = np.empty((N, K, 3, P))
    grad_mod = np.empty((N, K, P))
    _impl(backend).scatter_columns(x, coords, mod, grad_cols, grad_x, grad_coords, grad_mod)
    return grad_x, grad_coords, grad_mod
