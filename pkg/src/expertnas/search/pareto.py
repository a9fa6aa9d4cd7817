"""Dominance utilities; every objective is maximized."""

from __future__ import annotations

import numpy as np


def dominates(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.all(a >= b) and np.any(a > b))


def dominated_mask(F: np.ndarray) -> np.ndarray:
    """``mask[j]`` is True when some row of ``F`` dominates row ``j``."""
    F = np.asarray(F, dtype=np.float64)
    if len(F) == 0:
        return np.zeros(0, dtype=bool)
    ge = np.all(F[:, None, :] >= F[None, :, :], axis=2)
    gt = np.any(F[:, None, :] > F[None, :, :], axis=2)
    return np.any(ge & gt, axis=0)


def pareto_indices(F: np.ndarray) -> np.ndarray:
    return np.flatnonzero(~dominated_mask(F))


def non_dominated_ranks(F: np.ndarray) -> np.ndarray:
    """Front number per row, 1 for the non-dominated set."""
    F = np.asarray(F, dtype=np.float64)
    ranks = np.zeros(len(F), dtype=np.int64)
    remaining = np.arange(len(F))
    r = 1
    while remaining.size:
        front = ~dominated_mask(F[remaining])
        ranks[remaining[front]] = r
        remaining = remaining[~front]
        r += 1
    return ranks
