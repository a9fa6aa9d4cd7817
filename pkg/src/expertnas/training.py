"""Minibatch Adam training for :class:`~expertnas.model.MoEModel`."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .data import Split
from .model import MoEModel
from .numerics import Adam, NonFiniteError, Tape, backward

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train(model: MoEModel, split: Split, cfg: TrainConfig) -> list[float]:
    """Train in place; returns the mean loss of each epoch."""
    rng = np.random.default_rng([cfg.seed, 7919])
    opt = Adam(model.parameters(), lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    n = len(split)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    result = model.forward(split.images[idx])
                    loss = model.loss(result, split.labels[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                backward(loss, tape)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, batch {batches}: {exc}") from exc
            total += value
            batches += 1
        history.append(total / max(batches, 1))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    return history
