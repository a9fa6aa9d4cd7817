"""Versioned tensor container shared by checkpoints and dataset archives.

Layout (all integers little-endian)::

    b"MOEN" | u32 version | u32 manifest_len | manifest (UTF-8 JSON) | f64 blobs

The manifest carries a ``tensors`` list of ``{"name", "shape", "offset"}``
entries; offsets are byte offsets into the blob section, which holds the
tensors concatenated in manifest order as little-endian float64.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MOEN"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class BlobError(ValueError):
    """Base class for container decoding failures."""


class FormatError(BlobError):
    """Bad magic bytes or an unparseable manifest."""


class VersionError(BlobError):
    """The container was written by an unknown format version."""


class TruncatedError(BlobError):
    """The byte stream ends before the declared content."""


def encode(meta: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["tensors"] = entries
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"container is {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, mlen = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (reader supports {VERSION})")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise TruncatedError("container truncated inside manifest")
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise FormatError("manifest lacks a tensor directory")
    data = memoryview(blob)[start + mlen:]
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        try:
            name, shape, off = entry["name"], tuple(int(s) for s in entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed tensor entry {entry!r}") from None
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > len(data):
            raise TruncatedError(f"tensor {name!r} extends past the end of the container")
        arr = np.frombuffer(data[off:off + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        out[name] = arr
    return manifest, out
