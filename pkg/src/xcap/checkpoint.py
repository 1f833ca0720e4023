"""Binary named-tensor checkpoints.

Layout (all little-endian)::

    b"XCAP"  u16 version  u32 vocab_size  u32 tensor_count
    per tensor: u16 name_len, name (utf-8), u8 rank, u32 dims[rank], float32 data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .captioner import CaptionerParams, ModelConfig

MAGIC = b"XCAP"
VERSION = 1
_HEADER = struct.Struct("<4sHII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: CaptionerParams, path: str | Path) -> None:
    params.validate()
    chunks = [_HEADER.pack(MAGIC, VERSION, params.config.vocab_size, len(params.arrays))]
    for name, array in params.arrays.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise EOFError
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path, vocab_size: int | None = None,
                    config: ModelConfig | None = None) -> CaptionerParams:
    """Read a checkpoint, optionally checking it against an expected vocabulary or model geometry."""
    reader = _Reader(Path(path).read_bytes())
    try:
        magic, version, stored_k, count = reader.unpack(_HEADER.format)
    except EOFError:
        raise CheckpointError(f"{path}: truncated header") from None
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    if vocab_size is not None and stored_k != vocab_size:
        raise CheckpointError(
            f"{path}: checkpoint vocabulary size K={stored_k} does not match expected K={vocab_size}")

    expected_names = list(ModelConfig().shapes())
    arrays: dict[str, np.ndarray] = {}
    name = None
    try:
        for _ in range(count):
            name = None
            (length,) = reader.unpack("<H")
            name = reader.take(length).decode("utf-8")
            (rank,) = reader.unpack("<B")
            dims = reader.unpack(f"<{rank}I")
            size = int(np.prod(dims, dtype=np.int64))
            arrays[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    except EOFError:
        missing = [n for n in expected_names if n not in arrays]
        where = f"while reading {name!r}" if name else f"after {len(arrays)} tensor(s)"
        raise CheckpointError(f"{path}: truncated {where}; missing tensors: {', '.join(missing)}") from None
    if reader.pos != len(reader.buf):
        raise CheckpointError(f"{path}: {len(reader.buf) - reader.pos} trailing bytes")

    missing = [n for n in expected_names if n not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing tensors: {', '.join(missing)}")
    try:
        stored = ModelConfig.from_shapes({k: v.shape for k, v in arrays.items()})
        params = CaptionerParams(stored, arrays)
        params.validate()
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: inconsistent tensor shapes: {exc}") from None
    if stored.vocab_size != stored_k:
        raise CheckpointError(f"{path}: header K={stored_k} but embedding table has K={stored.vocab_size}")
    if config is not None and stored != config:
        wrong = [n for n, shape in config.shapes().items() if arrays[n].shape != shape]
        raise CheckpointError(f"{path}: shape mismatch against model definition in {', '.join(wrong)}")
    return params
