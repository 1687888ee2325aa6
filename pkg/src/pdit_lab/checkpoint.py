"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PDIT" | u32 version | u32 header_len | header JSON (utf-8) | payload | u32 crc32(payload)

The header is ``{"arch", "config_hash", "model_config", "tensors": {name:
{"shape", "offset", "length"}}}`` with offsets/lengths in bytes relative to
the payload start. The payload is the concatenation of each tensor's
little-endian float32 buffer in header order.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes
from .tensor import Tensor

MAGIC = b"PDIT"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


def dumps(params: ModelParams) -> bytes:
    table = {}
    chunks = []
    offset = 0
    for name, t in params.tensors.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        table[name] = {"shape": list(t.shape), "offset": offset, "length": len(buf)}
        chunks.append(buf)
        offset += len(buf)
    header = {
        "arch": params.config.arch,
        "config_hash": params.config.digest(),
        "model_config": asdict(params.config),
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(chunks)
    return (MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def loads(blob: bytes) -> ModelParams:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 12 + hlen
    if len(blob) < start + 4:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[12:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from None
    payload = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch (corrupt or truncated payload)")
    try:
        config = ModelConfig(**header["model_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad model config in header: {e}") from None
    if config.digest() != header.get("config_hash"):
        raise CheckpointError("config hash mismatch")
    expected = {name: shape for name, shape, _ in param_shapes(config)}
    table = header.get("tensors", {})
    if set(table) != set(expected):
        raise CheckpointError("tensor table does not match the model config")
    spans = sorted((e["offset"], e["offset"] + e["length"]) for e in table.values())
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError("overlapping tensor extents")
    tensors = {}
    for name, _, _ in param_shapes(config):
        entry = table[name]
        shape = tuple(entry["shape"])
        off, length = entry["offset"], entry["length"]
        if shape != tuple(expected[name]) or length != 4 * int(np.prod(shape)):
            raise CheckpointError(f"bad shape/length for {name}")
        if off < 0 or off + length > len(payload):
            raise CheckpointError(f"tensor {name} out of bounds")
        arr = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off).reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return ModelParams(config, tensors)


def save(params: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(params))
    os.replace(tmp, path)
    return path


def load(path) -> ModelParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from None
    return loads(blob)
