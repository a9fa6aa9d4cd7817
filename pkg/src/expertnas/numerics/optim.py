"""Bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
              names: list[str] | None = None) -> list[np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        label = names[i] if names else f"param[{i}]"
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"{label}: gradient {g.shape} / moments {state.m[i].shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {label}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.m[i] + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        out.append(p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
    return out


class Adam:
    """Stateful wrapper that updates :class:`Tensor` parameters in place."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        names = [p.name or f"param[{i}]" for i, p in enumerate(self.params)]
        new = adam_step([p.data for p in self.params], grads, self.state, names)
        for p, d in zip(self.params, new):
            p.data = d
