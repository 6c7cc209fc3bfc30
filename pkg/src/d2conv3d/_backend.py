"""Kernel backend selection.

The sampling kernels exist twice: numba-compiled loop nests and a vectorised
pure-numpy fallback. ``D2CONV_BACKEND`` (``numba`` or ``numpy``) picks the
default at import time; ``D2CONV_DISABLE_NUMBA=1`` forces the fallback.
``D2CONV_NUM_THREADS`` sets the numba worker count.
"""

from __future__ import annotations

import contextlib
import os

# TBB in this image is too old for numba; avoid the warning and pick a portable layer.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAS_NUMBA = False

BACKENDS = ("numba", "numpy")


def _env_default() -> str:
    if os.environ.get("D2CONV_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return "numpy"
    name = os.environ.get("D2CONV_BACKEND", "numba").strip().lower()
    if name not in BACKENDS:
        raise ValueError(f"D2CONV_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        return "numpy"
    return name


_active = _env_default()


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _active = name


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch the kernel backend."""
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def num_threads() -> int:
    if not HAS_NUMBA:
        return 1
    return numba.get_num_threads()


def _apply_thread_env() -> None:
    raw = os.environ.get("D2CONV_NUM_THREADS")
    if raw and HAS_NUMBA:
        n = max(1, min(int(raw), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)


_apply_thread_env()
