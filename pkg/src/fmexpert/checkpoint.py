"""Binary checkpoint container for named parameter blocks.

Layout (all integers little-endian)::

    b"FMCK"  u32 format
    [format 2 only]  u32 tag_len, tag bytes (utf-8)   -- expert's pinned FM version
    u32 n_blocks
    per block: u32 name_len, name bytes, u32 rows, u32 cols, u64 counter,
               rows*cols f64 values, row-major

Format 1 carries no tag and is used for foundation-model checkpoints.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from fmexpert.tensor import ParamSet

MAGIC = b"FMCK"


class CheckpointError(ValueError):
    pass


def dumps(params: ParamSet, tag: str | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    if tag is None:
        buf.write(struct.pack("<I", 1))
    else:
        raw = tag.encode()
        buf.write(struct.pack("<II", 2, len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<I", len(params)))
    for name in params:
        arr = np.ascontiguousarray(params.array(name), dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<IIQ", arr.shape[0], arr.shape[1], params.counters[name]))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> tuple[ParamSet, str | None]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (fmt,) = r.unpack("<I")
    tag = None
    if fmt == 2:
        (n,) = r.unpack("<I")
        tag = r.take(n).decode()
    elif fmt != 1:
        raise CheckpointError(f"unsupported checkpoint format {fmt}")
    (count,) = r.unpack("<I")
    blocks, counters = {}, {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        rows, cols, counter = r.unpack("<IIQ")
        vals = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        blocks[name] = vals.astype(np.float64)
        counters[name] = counter
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last block")
    return ParamSet(blocks, counters), tag


def save(path: str | os.PathLike, params: ParamSet, tag: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(params, tag))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[ParamSet, str | None]:
    return loads(Path(path).read_bytes())
