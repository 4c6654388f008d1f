"""Versioned binary checkpoint I/O.

Layout (all integers little-endian):

    magic "MEDU" | u32 format_version | u64 header_len | header (UTF-8 JSON config)
    then, per parameter, in model parameter order:
    u32 name_len | name (UTF-8) | u32 rank | rank * u64 dims | raw f32 values (LE)

Parameters are stored in float32; training math stays float64, so a save/load
cycle round-trips bit-exactly at storage precision. Writes go to a temp file and
are renamed into place so an interrupted run never leaves a partial file.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import Model, ModelConfig, init_model

MAGIC = b"MEDU"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint I/O failures."""


class CheckpointParseError(CheckpointError):
    """Malformed or truncated checkpoint; message includes the byte offset."""


class CheckpointVersionError(CheckpointError):
    """The file's format_version is not supported."""


class CheckpointIntegrityError(CheckpointError):
    """The header config disagrees with the stored parameter arrays."""


def save_checkpoint(model: Model, path) -> None:
    header = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(header)), header]
    for name, p in model.params.items():
        name_b = name.encode("utf-8")
        arr = p.data.astype("<f4")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise CheckpointParseError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte offset {self.off}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointParseError(f"bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    version = r.u32("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format_version {version} (this build reads {FORMAT_VERSION})"
        )
    header_len = r.u64("header length")
    header = r.take(header_len, "header")
    try:
        config = ModelConfig.from_dict(json.loads(header.decode("utf-8")))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointParseError(f"unreadable header at byte offset 16: {e}") from e

    arrays: dict[str, np.ndarray] = {}
    while r.off < len(blob):
        name_len = r.u32("parameter name length")
        name = r.take(name_len, "parameter name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name!r}")
        if rank > 8:
            raise CheckpointParseError(f"implausible rank {rank} for {name!r} at byte offset {r.off - 4}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name!r}"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * count, f"values of {name!r}")
        if name in arrays:
            raise CheckpointParseError(f"duplicate parameter {name!r} at byte offset {r.off}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)

    model = init_model(config)
    expected = {name: p.shape for name, p in model.params.items()}
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointIntegrityError(
            f"parameter set does not match header config (missing {missing}, unexpected {extra})"
        )
    for name, arr in arrays.items():
        if arr.shape != expected[name]:
            raise CheckpointIntegrityError(
                f"parameter {name!r} has shape {arr.shape}, header config implies {expected[name]}"
            )
        model.params[name].data[...] = arr
    return model
