"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"PDESCKPT"
    version      uint32    currently 1
    fingerprint  uint32 length + utf-8 bytes
    metadata     uint32 length + utf-8 canonical JSON
    n_blocks     uint32
    block *      kind uint8 (0 = parameter, 1 = optimizer state)
                 name uint16 length + utf-8 bytes
                 ndim uint8, dims uint32 * ndim
                 values float64 little-endian, row-major

The same container is used for raw descriptor-map dumps (parameter blocks only).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PDESCKPT"
VERSION = 1
PARAM, OPTIM = 0, 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    fingerprint: str = ""
    metadata: dict = field(default_factory=dict)


def _write_str(buf, text: str, fmt: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack(fmt, len(raw)))
    buf.write(raw)


def _read(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw


def _read_str(buf, fmt: str) -> str:
    (n,) = struct.unpack(fmt, _read(buf, struct.calcsize(fmt)))
    return _read(buf, n).decode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, ckpt.fingerprint, "<I")
    _write_str(buf, json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")), "<I")
    blocks = [(PARAM, k, v) for k, v in ckpt.params.items()]
    blocks += [(OPTIM, k, v) for k, v in ckpt.optimizer.items()]
    buf.write(struct.pack("<I", len(blocks)))
    for kind, name, value in blocks:
        arr = np.ascontiguousarray(value, dtype="<f8")
        buf.write(struct.pack("<B", kind))
        _write_str(buf, name, "<H")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fingerprint = _read_str(buf, "<I")
    metadata = json.loads(_read_str(buf, "<I"))
    (n_blocks,) = struct.unpack("<I", _read(buf, 4))
    params, optim = {}, {}
    for _ in range(n_blocks):
        (kind,) = struct.unpack("<B", _read(buf, 1))
        name = _read_str(buf, "<H")
        (ndim,) = struct.unpack("<B", _read(buf, 1))
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(_read(buf, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if kind == PARAM:
            params[name] = values
        elif kind == OPTIM:
            optim[name] = values
        else:
            raise CheckpointError(f"unknown block kind {kind}")
    return Checkpoint(params, optim, fingerprint, metadata)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
