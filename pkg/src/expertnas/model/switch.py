"""Top-1 routed Switch-FFN layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import ContractError, ShapeError, Tensor, ops


@dataclass
class Router:
    weight: Tensor  # (d_model, n_experts)
    bias: Tensor  # (n_experts,)
    active_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n = self.weight.shape[1]
        if self.active_mask is None:
            self.active_mask = np.ones(n, dtype=bool)
        self.active_mask = np.asarray(self.active_mask, dtype=bool)
        if self.bias.shape != (n,) or self.active_mask.shape != (n,):
            raise ShapeError(f"router with {n} experts has bias {self.bias.shape}, mask {self.active_mask.shape}")

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]

    def active(self) -> np.ndarray:
        idx = np.flatnonzero(self.active_mask)
        if idx.size == 0:
            raise ContractError("router has no active experts")
        return idx


@dataclass
class Expert:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(ops.gelu(ops.linear(x, self.w1, self.b1)), self.w2, self.b2)


GATE_MODES = ("full", "renormalized")


@dataclass
class SwitchFFNLayer:
    """Router plus expert set.

    ``gate_mode`` decides the gate once experts are masked: ``"full"`` keeps
    the router's probability for the chosen expert under its complete
    distribution (tokens that keep their expert are unaffected by pruning),
    ``"renormalized"`` rescales the probabilities over the active experts.
    Expert choice is the active-set argmax in both modes.
    """

    router: Router
    experts: list[Expert]
    gate_mode: str = "full"

    def __post_init__(self):
        if len(self.experts) != self.router.n_experts:
            raise ShapeError(f"{len(self.experts)} experts for a router over {self.router.n_experts}")
        shapes = {tuple(t.shape for t in e.tensors()) for e in self.experts}
        if len(shapes) > 1:
            raise ShapeError("experts within a layer must share shapes")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")

    @property
    def n_active(self) -> int:
        return int(self.router.active_mask.sum())


def route(router: Router, token, gate_mode: str = "full") -> tuple[int, float, np.ndarray]:
    """Route one token: (expert index, gate probability, distribution over all experts).

    The returned distribution is renormalized over active experts and is
    zero at masked slots; argmax ties go to the lowest expert index. With
    ``gate_mode="full"`` the gate is instead the chosen expert's probability
    under the unmasked softmax.
    """
    active = router.active()
    x = np.asarray(token.data if isinstance(token, Tensor) else token, dtype=np.float64)
    if x.shape != (router.weight.shape[0],):
        raise ShapeError(f"token shape {x.shape} does not match router width {router.weight.shape[0]}")
    logits = x @ router.weight.data[:, active] + router.bias.data[active]
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    j = int(np.argmax(p))
    dist = np.zeros(router.n_experts)
    dist[active] = p
    gate = float(p[j])
    if gate_mode == "full":
        all_logits = x @ router.weight.data + router.bias.data
        ea = np.exp(all_logits - all_logits.max())
        gate = float(ea[active[j]] / ea.sum())
    return int(active[j]), gate, dist


@dataclass
class SwitchOutput:
    out: Tensor  # (T, d_model)
    expert_index: np.ndarray  # (T,) chosen global expert index per token
    gate: np.ndarray  # (T,) gate probability per token
    aux_loss: Tensor  # scalar load-balance loss


def switch_ffn_forward(layer: SwitchFFNLayer, tokens: Tensor) -> SwitchOutput:
    router = layer.router
    d = router.weight.shape[0]
    if tokens.ndim != 2 or tokens.shape[1] != d:
        raise ShapeError(f"switch layer expects (T, {d}) tokens, got {tokens.shape}")
    active = router.active()
    n_tok = tokens.shape[0]
    pruned = active.size < router.n_experts
    if layer.gate_mode == "full" and pruned:
        probs_all = ops.softmax(ops.linear(tokens, router.weight, router.bias))
        probs = ops.take_cols(probs_all, active)
    else:
        logits = ops.linear(tokens, ops.take_cols(router.weight, active), ops.take_cols(router.bias, active))
        probs = ops.softmax(logits)
    local = np.argmax(probs.data, axis=1)
    gate = ops.pick(probs, local)

    pieces = []
    for j, e in enumerate(active):
        rows = np.flatnonzero(local == j)
        if rows.size:
            pieces.append((rows, layer.experts[e](ops.take_rows(tokens, rows, unique=True))))
    mixed = ops.scatter_rows(pieces, n_tok, d)
    out = ops.mul(mixed, ops.reshape(gate, (n_tok, 1)))

    n_act = active.size
    fraction = np.bincount(local, minlength=n_act) / n_tok
    mean_prob = ops.mean(probs, axis=0)
    aux = ops.scale(ops.sum(ops.mul(mean_prob, fraction)), float(n_act))
    return SwitchOutput(out, active[local], gate.data.copy(), aux)
