"""Numeric hot kernels: compiled core with a pure-numpy fallback.

The backend is chosen once at import time: the compiled extension if it was
built, else the numpy fallback. ``DGDF_KERNELS=python|compiled`` forces a
specific backend (raising if a forced compiled backend is unavailable).
"""
from __future__ import annotations

import os

from . import _numpy as _python_backend

try:
    from . import _core as _compiled_backend
except ImportError:  # extension not built
    _compiled_backend = None


def available_backends() -> list[str]:
    names = ["python"]
    if _compiled_backend is not None:
        names.append("compiled")
    return names


def get_backend(name: str):
    if name == "python":
        return _python_backend
    if name == "compiled":
        if _compiled_backend is None:
            raise RuntimeError("compiled kernel core is not built")
        return _compiled_backend
    raise ValueError(f"unknown kernel backend: {name!r}")


_forced = os.environ.get("DGDF_KERNELS", "").strip().lower()
if _forced:
    active = get_backend(_forced)
    ACTIVE_NAME = _forced
elif _compiled_backend is not None:
    active = _compiled_backend
    ACTIVE_NAME = "compiled"
else:
    active = _python_backend
    ACTIVE_NAME = "python"

conv2d_forward = active.conv2d_forward
conv2d_backward = active.conv2d_backward
segment_sum = active.segment_sum
