"""Checkpoint container.

Layout: ``b"MSMCKPT1"``, a little-endian uint32 header length, a UTF-8 JSON
header, the float32 little-endian tensor payloads back to back, and a
SHA-256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .network import Model, ModelConfig

MAGIC = b"MSMCKPT1"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


def _encode(config: dict, tensors: Dict[str, np.ndarray], seed: int, extra: Optional[dict]) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"version": FORMAT_VERSION, "config": config, "seed": seed,
                         "tensors": directory, "extra": extra or {}}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def _decode(raw: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if len(raw) < len(MAGIC) + 4 + _DIGEST:
        raise CheckpointError("checkpoint truncated")
    if raw[:8] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("digest mismatch: checkpoint is corrupted or truncated")
    (hlen,) = struct.unpack("<I", body[8:12])
    try:
        header = json.loads(body[12:12 + hlen])
    except ValueError:
        raise CheckpointError("unreadable checkpoint header") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = body[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        start = entry["offset"]
        if start + n > len(payload):
            raise CheckpointError(f"tensor {entry['name']} runs past the payload")
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=start).reshape(shape).copy()
    return header, tensors


def save_checkpoint(model: Model, path: str, extra_tensors: Optional[Dict[str, np.ndarray]] = None,
                    extra: Optional[dict] = None) -> None:
    """Write atomically (temp file + rename)."""
    tensors = dict(model.state_dict())
    for name, arr in (extra_tensors or {}).items():
        tensors[name] = arr
    data = _encode(model.cfg.to_dict(), tensors, model.seed, extra)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return _decode(fh.read())


def load_checkpoint(path: str, with_extra: bool = False):
    """Rebuild the model; with ``with_extra`` also return (header, extra tensors)."""
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as err:
        raise CheckpointError(f"invalid model config in checkpoint: {err}") from None
    model = Model(cfg, seed=int(header.get("seed", 0)))
    names = {n for n, _ in model.named_parameters()}
    state = {k: v for k, v in tensors.items() if k in names}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as err:
        raise CheckpointError(str(err)) from None
    if with_extra:
        return model, header, {k: v for k, v in tensors.items() if k not in names}
    return model
