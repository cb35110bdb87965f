"""Binary checkpoint container for model parameters and run metadata.

Layout (all integers little-endian)::

    b"CNDY"  u16 version
    u32 metadata length, metadata as UTF-8 JSON object
    u32 tensor count, then per tensor:
        u16 name length, UTF-8 name, u8 rank, rank x u32 extents,
        prod(extents) x float32 values (NCHW row-major)
    u32 CRC-32 of every preceding byte

Tensor names are ``<slot>/<parameter path>``, e.g. ``generator/conv1.conv.weight``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .nn import Module

MAGIC = b"CNDY"
VERSION = 1
LAYOUT = "NCHW"


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, message: str, tensor: str):
        super().__init__(message)
        self.tensor = tensor


@dataclass
class Checkpoint:
    metadata: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION

    def slots(self) -> list[str]:
        seen: list[str] = []
        for name in self.tensors:
            slot = name.split("/", 1)[0]
            if slot not in seen:
                seen.append(slot)
        return seen

    def slot(self, name: str) -> "OrderedDict[str, np.ndarray]":
        prefix = name + "/"
        out = OrderedDict((k[len(prefix):], v) for k, v in self.tensors.items() if k.startswith(prefix))
        if not out:
            raise CheckpointMismatchError(f"checkpoint has no slot {name!r} (has {self.slots()})", name)
        return out

    def restore(self, slot: str, module: Module) -> Module:
        module.load_state_dict(self.slot(slot))
        return module


def encode(models: Mapping[str, Module], metadata: dict | None = None,
           extra: Mapping[str, Mapping[str, np.ndarray]] | None = None) -> bytes:
    meta = dict(metadata or {})
    meta.setdefault("layout", LAYOUT)
    table: list[tuple[str, np.ndarray]] = []
    for slot, module in models.items():
        table += [(f"{slot}/{n}", a) for n, a in module.state_dict().items()]
    for slot, arrays in (extra or {}).items():
        table += [(f"{slot}/{n}", np.asarray(a)) for n, a in arrays.items()]

    parts = [MAGIC, struct.pack("<H", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(table))]
    for name, arr in table:
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", buf[4:6])
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if len(buf) < 10:
        raise CorruptCheckpointError("checkpoint is truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(6)
    try:
        (meta_len,) = r.unpack("<I")
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
        (count,) = r.unpack("<I")
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode("utf-8")
            (rank,) = r.unpack("<B")
            shape = r.unpack(f"<{rank}I")
            n = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as exc:
        raise CorruptCheckpointError(f"checkpoint is corrupt: {exc}") from exc
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    if r.pos != len(body):
        raise CorruptCheckpointError("checkpoint has trailing bytes")
    return Checkpoint(metadata, tensors, version)


def save_checkpoint(path: str | os.PathLike, models: Mapping[str, Module], metadata: dict | None = None,
                    extra: Mapping[str, Mapping[str, np.ndarray]] | None = None) -> Path:
    """Write atomically: a crash never leaves a partial file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(models, metadata, extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode(Path(path).read_bytes())
