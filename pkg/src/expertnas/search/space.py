"""Search space over per-layer expert counts under a parameter-count constraint."""

from __future__ import annotations

import numpy as np

from ..model import ArchitectureEncoding, ModelConfig, count_params, ffn_params, router_params

MAX_SAMPLE_RETRIES = 10_000


class InfeasibleBoundsError(ValueError):
    """No encoding of the space satisfies the parameter bounds."""


def default_bounds(config: ModelConfig, low: float = 1.0, high: float = 2.5) -> tuple[int, int]:
    base = count_params(ArchitectureEncoding.uniform(config.n_layers, 1), config)
    return int(round(low * base)), int(round(high * base))


def in_bounds(encoding: ArchitectureEncoding, config: ModelConfig, bounds: tuple[int, int]) -> bool:
    n = count_params(encoding, config)
    return bounds[0] <= n <= bounds[1]


def check_feasible(config: ModelConfig, bounds: tuple[int, int]) -> None:
    """Raise unless some total expert count lands inside ``bounds``.

    Layers are identical, so the count depends only on the total number of
    experts and grows linearly with it.
    """
    lo, hi = bounds
    if lo > hi:
        raise InfeasibleBoundsError(f"min_params {lo} exceeds max_params {hi}")
    L, E = config.n_layers, config.max_experts
    base = count_params(ArchitectureEncoding.uniform(L, 1), config)
    step = ffn_params(config) + router_params(1, config)
    for total in range(L, L * E + 1):
        if lo <= base + (total - L) * step <= hi:
            return
    raise InfeasibleBoundsError(
        f"no encoding has a parameter count in [{lo}, {hi}] "
        f"(space spans {base}..{base + (L * E - L) * step})")


def sample_encoding(rng: np.random.Generator, bounds: tuple[int, int], config: ModelConfig) -> ArchitectureEncoding:
    check_feasible(config, bounds)
    for _ in range(MAX_SAMPLE_RETRIES):
        enc = ArchitectureEncoding(rng.integers(1, config.max_experts + 1, size=config.n_layers))
        if in_bounds(enc, config, bounds):
            return enc
    raise InfeasibleBoundsError(f"no in-bounds encoding after {MAX_SAMPLE_RETRIES} draws for bounds {bounds}")


def mutate(parent: ArchitectureEncoding, rng: np.random.Generator, config: ModelConfig,
           bounds: tuple[int, int] | None = None, max_retries: int = 1000) -> ArchitectureEncoding:
    """Resample one uniformly chosen layer to a different expert count."""
    E = config.max_experts
    if E < 2:
        raise ValueError("mutation needs max_experts >= 2")
    counts = list(parent.expert_counts)
    for _ in range(max_retries):
        layer = int(rng.integers(len(counts)))
        choices = [v for v in range(1, E + 1) if v != counts[layer]]
        child = counts.copy()
        child[layer] = int(choices[int(rng.integers(len(choices)))])
        enc = ArchitectureEncoding(child)
        if bounds is None or in_bounds(enc, config, bounds):
            return enc
    raise InfeasibleBoundsError(f"no in-bounds mutation of {parent} after {max_retries} tries")
