"""Binary checkpoint format.

Layout::

    b"USFM" | u16 version | u32 header length | UTF-8 JSON header | float32 payload

The header carries the model config, free-form run metadata (config file,
seed) and an ordered directory of ``{name, shape, offset}`` entries; offsets
are in bytes from the start of the payload.  All integers and floats are
little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .tensor import Tensor
from .vit_mae import ModelConfig, VitMae, position_buffers

MAGIC = b"USFM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model: VitMae, meta: Optional[dict[str, Any]] = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(raw: bytes) -> tuple[VitMae, dict[str, Any]]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    if len(raw) < 10:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = raw[10 + hlen :]
    config = ModelConfig(**header["config"])
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float32), requires_grad=True)
    buffers = position_buffers(config)
    if not any(n.startswith("decoder.") for n in params):
        buffers = {n: b for n, b in buffers.items() if not n.startswith("decoder.")}
    return VitMae(config, params, buffers), header.get("meta", {})


def save_checkpoint(path, model: VitMae, meta: Optional[dict[str, Any]] = None) -> Path:
    """Write atomically: the file only appears under ``path`` once complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, meta))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[VitMae, dict[str, Any]]:
    return decode_checkpoint(Path(path).read_bytes())
