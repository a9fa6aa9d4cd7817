"""Checkpoint serialization on top of :mod:`expertnas.blobfile`.

Pruned experts are not written (nor their router columns under
renormalized gating); the stored active masks let the loader put every
surviving tensor back in its slot.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .. import blobfile
from ..blobfile import BlobError, FormatError, TruncatedError, VersionError
from .network import ArchitectureEncoding, MoEModel, ModelConfig

__all__ = [
    "BlobError",
    "CheckpointShapeError",
    "FormatError",
    "TruncatedError",
    "VersionError",
    "load_checkpoint",
    "model_id",
    "save_checkpoint",
]


class CheckpointShapeError(BlobError):
    """Manifest config, masks and tensor directory disagree."""


def _drops_router_columns(config: ModelConfig) -> bool:
    return config.gate_mode == "renormalized"


def _export_tensors(model: MoEModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, t in model.named_tensors():
        arr = t.data
        if _drops_router_columns(model.config) and (name.endswith("router.w") or name.endswith("router.b")):
            layer = int(name[len("block"):name.index(".")])
            arr = arr[..., model.blocks[layer].switch.router.active_mask]
        out.append((name, arr))
    return out


def save_checkpoint(model: MoEModel) -> bytes:
    meta = {
        "kind": "moe_model",
        "config": model.config.to_dict(),
        "encoding": list(model.encoding.expert_counts),
        "masks": [[bool(b) for b in m] for m in model.masks()],
        "seed": int(model.seed),
    }
    return blobfile.encode(meta, _export_tensors(model))


def model_id(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:12]


def load_checkpoint(blob: bytes) -> MoEModel:
    manifest, arrays = blobfile.decode(blob)
    if manifest.get("kind") != "moe_model":
        raise FormatError(f"container holds {manifest.get('kind')!r}, not a model checkpoint")
    try:
        config = ModelConfig(**manifest["config"])
        encoding = ArchitectureEncoding(manifest["encoding"])
        masks = [np.asarray(m, dtype=bool) for m in manifest["masks"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointShapeError(f"inconsistent checkpoint manifest: {exc}") from None
    if len(masks) != len(encoding) or len(encoding) != config.n_layers:
        raise CheckpointShapeError("mask list, encoding and n_layers disagree")
    for i, (m, n) in enumerate(zip(masks, encoding)):
        if m.shape != (n,) or not m.any():
            raise CheckpointShapeError(f"layer {i}: mask {m.tolist()} invalid for {n} experts")

    # build a correctly shaped skeleton, then overwrite every tensor
    model = MoEModel(config, encoding, seed=int(manifest.get("seed", 0)))
    for blk, m in zip(model.blocks, masks):
        blk.switch.router.active_mask = m.copy()
    expected = {name: t for name, t in model.named_tensors()}
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointShapeError(f"tensor directory mismatch; missing={missing[:3]} extra={extra[:3]}")
    for name, t in expected.items():
        arr = arrays[name]
        if _drops_router_columns(config) and (name.endswith("router.w") or name.endswith("router.b")):
            layer = int(name[len("block"):name.index(".")])
            mask = masks[layer]
            if arr.shape[-1] != mask.sum() or arr.shape[:-1] != t.shape[:-1]:
                raise CheckpointShapeError(f"{name}: stored shape {arr.shape} vs mask {mask.tolist()}")
            full = np.zeros(t.shape)
            full[..., mask] = arr
            arr = full
        elif arr.shape != t.shape:
            raise CheckpointShapeError(f"{name}: stored shape {arr.shape}, expected {t.shape}")
        t.data = np.array(arr, dtype=np.float64, order="C")
    # pruned experts carry no weights
    for blk in model.blocks:
        sw = blk.switch
        for e, ex in enumerate(sw.experts):
            if not sw.router.active_mask[e]:
                for p in ex.tensors():
                    p.data = np.zeros(p.shape)
    return model


def load_checkpoint_file(path) -> MoEModel:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


def clone(model: MoEModel) -> MoEModel:
    return load_checkpoint(save_checkpoint(model))


def copy_into(dst: MoEModel, src: MoEModel) -> None:
    """Overwrite ``dst`` parameters and masks with those of ``src`` (same architecture)."""
    for (n1, t1), (n2, t2) in zip(dst.named_tensors(include_pruned=True), src.named_tensors(include_pruned=True)):
        assert n1 == n2
        t1.data = t2.data.copy()
    for b1, b2 in zip(dst.blocks, src.blocks):
        b1.switch.router.active_mask = b2.switch.router.active_mask.copy()


def tensor_count(blob: bytes) -> int:
    """Number of scalars stored in a checkpoint (its exact parameter count)."""
    _, arrays = blobfile.decode(blob)
    return int(sum(a.size for a in arrays.values()))
