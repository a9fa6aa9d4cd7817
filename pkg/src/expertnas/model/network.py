"""Patch-embed + attention-block stack with a Switch-FFN in every block."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..numerics import ContractError, NonFiniteError, ShapeError, Tensor, no_grad, ops
from .switch import Expert, Router, SwitchFFNLayer, switch_ffn_forward


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    channels: int = 1
    patch: int = 4
    d_model: int = 32
    d_hidden: int = 64
    n_heads: int = 4
    n_layers: int = 9
    n_classes: int = 2
    max_experts: int = 8
    aux_coef: float = 0.01
    use_aux: bool = True
    gate_mode: str = "full"

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ArchitectureEncoding:
    """Per-layer expert counts."""

    expert_counts: tuple[int, ...]

    def __init__(self, expert_counts):
        object.__setattr__(self, "expert_counts", tuple(int(e) for e in expert_counts))
        if not self.expert_counts:
            raise ValueError("encoding must have at least one layer")
        if any(e < 1 for e in self.expert_counts):
            raise ValueError(f"every layer needs at least one expert: {self.expert_counts}")

    def __len__(self) -> int:
        return len(self.expert_counts)

    def __iter__(self):
        return iter(self.expert_counts)

    def __getitem__(self, i):
        return self.expert_counts[i]

    def __str__(self) -> str:
        return ",".join(map(str, self.expert_counts))

    @classmethod
    def parse(cls, text: str) -> "ArchitectureEncoding":
        try:
            return cls(int(t) for t in text.split(","))
        except ValueError:
            raise ValueError(f"cannot parse encoding {text!r}; expected comma-separated integers") from None

    @classmethod
    def uniform(cls, n_layers: int, n_experts: int = 1) -> "ArchitectureEncoding":
        return cls([n_experts] * n_layers)

    def validate(self, config: ModelConfig) -> None:
        if len(self) != config.n_layers:
            raise ValueError(f"encoding has {len(self)} layers, model has {config.n_layers}")
        if max(self.expert_counts) > config.max_experts:
            raise ValueError(f"encoding {self} exceeds max_experts={config.max_experts}")


def ffn_params(config: ModelConfig) -> int:
    return 2 * config.d_model * config.d_hidden + config.d_model + config.d_hidden


def router_params(n_experts: int, config: ModelConfig) -> int:
    return config.d_model * n_experts + n_experts


def backbone_params(config: ModelConfig) -> int:
    d = config.d_model
    embed = config.patch_dim * d + d + config.n_tokens * d
    attn = 4 * (d * d + d)
    norms = 4 * d
    head = 2 * d + d * config.n_classes + config.n_classes
    return embed + config.n_layers * (attn + norms) + head


def count_params(encoding, config: ModelConfig, active=None) -> int:
    """Exact parameter count.

    ``active`` gives per-layer active expert counts after pruning. Pruned
    experts drop their FFN weights; their router columns are dropped too
    under renormalized gating but kept under full gating, where the gate of
    the surviving experts still depends on them.
    """
    counts = encoding.expert_counts if isinstance(encoding, ArchitectureEncoding) else tuple(encoding)
    active = counts if active is None else tuple(active)
    per = ffn_params(config)
    total = backbone_params(config)
    for slots, live in zip(counts, active):
        total += live * per + router_params(live if config.gate_mode == "renormalized" else slots, config)
    return total


@dataclass
class AttentionBlock:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    switch: SwitchFFNLayer

    ATTN_FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b")


@dataclass
class RoutingTrace:
    """Chosen experts for a batch: ``tokens[b, l, t]`` and the per-image mode ``per_image[b, l]``."""

    tokens: np.ndarray
    groups: np.ndarray | None = None

    @property
    def per_image(self) -> np.ndarray:
        B, L, _ = self.tokens.shape
        out = np.zeros((B, L), dtype=np.int64)
        for b in range(B):
            for l in range(L):
                # bincount argmax: most frequent expert, lowest index on ties
                out[b, l] = int(np.argmax(np.bincount(self.tokens[b, l])))
        return out


@dataclass
class ForwardResult:
    logits: Tensor
    trace: RoutingTrace
    aux_loss: Tensor
    layer_aux: list[float] = field(default_factory=list)


def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor.wrap(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor.wrap(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)


class MoEModel:
    def __init__(self, config: ModelConfig, encoding: ArchitectureEncoding, seed: int = 0,
                 _init: bool = True):
        encoding.validate(config)
        self.config = config
        self.encoding = encoding
        self.seed = seed
        if _init:
            self._initialize(np.random.default_rng(seed))

    def _initialize(self, rng: np.random.Generator) -> None:
        c = self.config
        d, h = c.d_model, c.d_hidden
        # residual-branch output projections start small so the stack begins near identity
        resid = 1.0 / math.sqrt(2 * c.n_layers)
        self.embed_w = _normal(rng, (c.patch_dim, d), 1 / math.sqrt(c.patch_dim), "embed.w")
        self.embed_b = _const(0.0, (d,), "embed.b")
        self.pos = _normal(rng, (c.n_tokens, d), 0.02, "embed.pos")
        self.blocks: list[AttentionBlock] = []
        for i, n_exp in enumerate(self.encoding):
            p = f"block{i}."
            attn = {}
            for nm in ("q", "k", "v", "o"):
                std = (resid if nm == "o" else 1.0) / math.sqrt(d)
                attn["w" + nm] = _normal(rng, (d, d), std, p + "attn.w" + nm)
                attn["b" + nm] = _const(0.0, (d,), p + "attn.b" + nm)
            router = Router(_normal(rng, (d, n_exp), 0.02, p + "router.w"),
                            _const(0.0, (n_exp,), p + "router.b"))
            experts = [
                Expert(_normal(rng, (d, h), 1 / math.sqrt(d), p + f"expert{e}.w1"),
                       _const(0.0, (h,), p + f"expert{e}.b1"),
                       _normal(rng, (h, d), resid / math.sqrt(h), p + f"expert{e}.w2"),
                       _const(0.0, (d,), p + f"expert{e}.b2"))
                for e in range(n_exp)
            ]
            self.blocks.append(AttentionBlock(
                ln1_g=_const(1.0, (d,), p + "ln1.g"), ln1_b=_const(0.0, (d,), p + "ln1.b"),
                ln2_g=_const(1.0, (d,), p + "ln2.g"), ln2_b=_const(0.0, (d,), p + "ln2.b"),
                switch=SwitchFFNLayer(router, experts, c.gate_mode), **attn))
        self.lnf_g = _const(1.0, (d,), "final_ln.g")
        self.lnf_b = _const(0.0, (d,), "final_ln.b")
        self.head_w = _normal(rng, (d, c.n_classes), 1 / math.sqrt(d), "head.w")
        self.head_b = _const(0.0, (c.n_classes,), "head.b")

    # -- parameter bookkeeping -------------------------------------------------

    def named_tensors(self, include_pruned: bool = False) -> list[tuple[str, Tensor]]:
        """Every parameter tensor in a fixed order.

        Router tensors keep their pruned columns (they are masked at routing
        time); pruned experts are skipped unless ``include_pruned``.
        """
        out = [("embed.w", self.embed_w), ("embed.b", self.embed_b), ("embed.pos", self.pos)]
        for i, blk in enumerate(self.blocks):
            p = f"block{i}."
            for f in AttentionBlock.ATTN_FIELDS:
                out.append((p + f, getattr(blk, f)))
            r = blk.switch.router
            out.append((p + "router.w", r.weight))
            out.append((p + "router.b", r.bias))
            for e, ex in enumerate(blk.switch.experts):
                if include_pruned or r.active_mask[e]:
                    for nm, t in zip(("w1", "b1", "w2", "b2"), ex.tensors()):
                        out.append((p + f"expert{e}.{nm}", t))
        out += [("final_ln.g", self.lnf_g), ("final_ln.b", self.lnf_b),
                ("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def active_counts(self) -> list[int]:
        return [blk.switch.n_active for blk in self.blocks]

    def masks(self) -> list[np.ndarray]:
        return [blk.switch.router.active_mask for blk in self.blocks]

    def parameter_count(self) -> int:
        """Live parameter count after pruning, following the gating rule of :func:`count_params`."""
        return count_params(self.encoding, self.config, self.active_counts())

    # -- forward ---------------------------------------------------------------

    def _attention(self, blk: AttentionBlock, x: Tensor) -> Tensor:
        B, T, d = x.shape
        H = self.config.n_heads
        dh = d // H

        def heads(w, b):
            return ops.transpose(ops.reshape(ops.linear(x, w, b), (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(blk.wq, blk.bq), heads(blk.wk, blk.bk), heads(blk.wv, blk.bv)
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ops.matmul(ops.softmax(scores), v)
        merged = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (B, T, d))
        return ops.linear(merged, blk.wo, blk.bo)

    def forward(self, images) -> ForwardResult:
        c = self.config
        x_img = images if isinstance(images, Tensor) else Tensor.wrap(np.asarray(images, dtype=np.float64))
        if x_img.ndim != 4 or x_img.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise ShapeError(f"expected (B, {c.image_size}, {c.image_size}, {c.channels}) images, got {x_img.shape}")
        B, T, d = x_img.shape[0], c.n_tokens, c.d_model
        x = ops.add(ops.linear(ops.patchify(x_img, c.patch), self.embed_w, self.embed_b), self.pos)
        token_idx = np.zeros((B, len(self.blocks), T), dtype=np.int64)
        aux_terms = []
        for i, blk in enumerate(self.blocks):
            x = ops.add(x, self._attention(blk, ops.layer_norm(x, blk.ln1_g, blk.ln1_b)))
            h = ops.reshape(ops.layer_norm(x, blk.ln2_g, blk.ln2_b), (B * T, d))
            sw = switch_ffn_forward(blk.switch, h)
            x = ops.add(x, ops.reshape(sw.out, (B, T, d)))
            if not np.all(np.isfinite(x.data)):
                raise NonFiniteError(f"non-finite activations in block {i}")
            token_idx[:, i, :] = sw.expert_index.reshape(B, T)
            aux_terms.append(sw.aux_loss)
        pooled = ops.mean(ops.layer_norm(x, self.lnf_g, self.lnf_b), axis=1)
        logits = ops.linear(pooled, self.head_w, self.head_b)
        aux = aux_terms[0]
        for a in aux_terms[1:]:
            aux = ops.add(aux, a)
        aux = ops.scale(aux, 1.0 / len(aux_terms))
        return ForwardResult(logits, RoutingTrace(token_idx), aux, [a.item() for a in aux_terms])

    def loss(self, result: ForwardResult, labels) -> Tensor:
        ce = ops.cross_entropy(result.logits, labels)
        if self.config.use_aux and self.config.aux_coef:
            return ops.add(ce, ops.scale(result.aux_loss, self.config.aux_coef))
        return ce

    def predict(self, images: np.ndarray, batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
        """Class predictions and token-level routing indices for a stack of images."""
        preds, traces = [], []
        with no_grad():
            for s in range(0, len(images), batch_size):
                r = self.forward(images[s:s + batch_size])
                preds.append(np.argmax(r.logits.data, axis=1))
                traces.append(r.trace.tokens)
        if not preds:
            L, T = len(self.blocks), self.config.n_tokens
            return np.zeros(0, dtype=np.int64), np.zeros((0, L, T), dtype=np.int64)
        return np.concatenate(preds), np.concatenate(traces)


def model_forward(model: MoEModel, batch) -> tuple[Tensor, RoutingTrace, Tensor]:
    r = model.forward(batch)
    return r.logits, r.trace, r.aux_loss


def check_prunable(model: MoEModel, layer: int, expert: int) -> None:
    if not 0 <= layer < len(model.blocks):
        raise ContractError(f"layer {layer} out of range")
    mask = model.blocks[layer].switch.router.active_mask
    if not 0 <= expert < mask.size or not mask[expert]:
        raise ContractError(f"expert {expert} in layer {layer} is not active")
    if mask.sum() <= 1:
        raise ContractError(f"expert {expert} is the last active expert of layer {layer}")
