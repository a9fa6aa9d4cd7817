"""Central finite differences, kept independent of the tape."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], t: Tensor, flat_index: int, h: float = 1e-5) -> float:
    """d f / d t.data.flat[flat_index] by central difference; ``t`` is restored afterwards."""
    flat = t.data.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + h
    fp = f()
    flat[flat_index] = old - h
    fm = f()
    flat[flat_index] = old
    return (fp - fm) / (2 * h)


def grad_error(analytic: float, numeric: float, abs_floor: float = 1e-6) -> float:
    """Relative error, or 0 when both values sit under ``abs_floor`` of each other near zero."""
    diff = abs(analytic - numeric)
    if diff < abs_floor:
        return 0.0
    return diff / max(abs(analytic), abs(numeric))
