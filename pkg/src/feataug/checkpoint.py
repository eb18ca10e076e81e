"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FACN"                      magic
    u8   version
    u32  n, n bytes              descriptor JSON (config, network specs)
    u32  n, n bytes              state JSON (step, bank cursor/fill, rng)
    u32  count                   named tensor blobs, sorted by name:
        u16 n, n bytes           name (utf-8)
        u8  ndim, u32 * ndim     shape
        f32 * prod(shape)        values

JSON is written with sorted keys and no whitespace, so serialization is
a pure function of the contents and load -> save reproduces the bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FACN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    descriptors: dict
    state: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<B", VERSION)
        for blob in (self.descriptors, self.state):
            raw = json.dumps(blob, sort_keys=True, separators=(",", ":")).encode()
            out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", len(self.tensors))
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype="<f4")
            raw_name = name.encode()
            out += struct.pack("<H", len(raw_name)) + raw_name
            out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic bytes")
        if len(data) < 5:
            raise CheckpointError("truncated checkpoint")
        (version,) = struct.unpack_from("<B", data, 4)
        if version != VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
        pos = 5
        try:
            blobs = []
            for _ in range(2):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                blobs.append(json.loads(data[pos : pos + n].decode()))
                pos += n
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
            tensors = {}
            for _ in range(count):
                (n,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos : pos + n].decode()
                pos += n
                (ndim,) = struct.unpack_from("<B", data, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", data, pos)
                pos += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                if pos + 4 * size > len(data):
                    raise CheckpointError("truncated tensor data")
                tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
                pos += 4 * size
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint: {e}") from None
        if pos != len(data):
            raise CheckpointError("trailing bytes after checkpoint payload")
        return cls(blobs[0], blobs[1], tensors)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
