"""Checkpoint archive: manifest + little-endian float32 payload + config + SHA-256.

Layout::

    b"SGCK" | u32 version | u32 header_len | header (UTF-8 JSON) | payload | sha256(all preceding bytes)

The header holds ``entries`` (ordered name/shape/dtype/offset/nbytes), the
config text and free-form ``meta``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SGCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_archive(path, tensors: dict, config_text: str = "", meta: dict | None = None):
    """Write ``tensors`` (name -> tensor, order preserved) atomically to ``path``."""
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"entries": entries, "config": config_text, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(body + digest)
    os.replace(tmp, path)


def load_archive(path):
    """Returns (tensors, config_text, meta); verifies magic, version and checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < 44 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, header_len = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported archive version {version}")
    header = json.loads(body[12 : 12 + header_len].decode("utf-8"))
    payload = body[12 + header_len :]
    tensors = {}
    for e in header["entries"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, header["config"], header["meta"]


def save_module(path, module, config_text="", meta=None, extra: dict | None = None):
    tensors = {f"model.{k}": v for k, v in module.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    save_archive(path, tensors, config_text, meta)


def load_module(path, module, strict=True):
    """Load ``model.*`` entries into ``module``; returns (other_entries, config_text, meta)."""
    tensors, config_text, meta = load_archive(path)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if strict and (missing or unexpected):
        raise CheckpointError(f"{path}: missing {missing[:3]} unexpected {unexpected[:3]}")
    other = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return other, config_text, meta
