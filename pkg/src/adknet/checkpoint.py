"""Binary checkpoint container.

Layout (all integers little-endian ``u32``)::

    b"ADKN" | version | len + model-config JSON | len + metadata JSON
    | record count | records...

Each record is ``len + UTF-8 name | rank | extents... | float32 LE payload``.
Records are named ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
JSON sections are written with sorted keys, so equal states give equal bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ModelConfig, ModelParams
from .optim import AdamState

MAGIC = b"ADKN"
VERSION = 1


class CheckpointError(ValueError):
    """Bad magic, unsupported version or truncated checkpoint."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _blob(raw: bytes) -> bytes:
    return _u32(len(raw)) + raw


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = _blob(name.encode()) + _u32(arr.ndim) + b"".join(_u32(n) for n in arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    records = [(f"param/{n}", p.data) for n, p in ckpt.params.items()]
    if ckpt.adam is not None:
        for n in ckpt.params:
            if n in ckpt.adam.m:
                records.append((f"adam.m/{n}", ckpt.adam.m[n]))
                records.append((f"adam.v/{n}", ckpt.adam.v[n]))
    meta = dict(ckpt.meta)
    if ckpt.adam is not None:
        meta["adam_step"] = ckpt.adam.step
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_u32(VERSION))
    out.write(_blob(_json(ckpt.config.to_dict())))
    out.write(_blob(_json(meta)))
    out.write(_u32(len(records)))
    for name, arr in records:
        out.write(_record(name, arr))
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def loads(raw: bytes, dtype=None) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"not an ADKN checkpoint (magic {magic!r})")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = ModelConfig.from_dict(json.loads(r.blob()))
        meta = json.loads(r.blob())
    except (json.JSONDecodeError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    count = r.u32()
    params: ModelParams = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.blob().decode()
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, pname = name.partition("/")
        if kind == "param":
            params[pname] = T.parameter(arr, dtype=dtype or np.float32)
        elif kind == "adam.m":
            m[pname] = arr
        elif kind == "adam.v":
            v[pname] = arr
        else:
            raise CheckpointError(f"unknown record {name!r}")
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after the last record")
    adam = None
    if "adam_step" in meta:
        adam = AdamState(step=meta.pop("adam_step"), m=m, v=v)
    return Checkpoint(config, params, adam, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load_checkpoint(path, dtype=None) -> Checkpoint:
    return loads(Path(path).read_bytes(), dtype=dtype)
