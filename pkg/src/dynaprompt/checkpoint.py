"""Bit-specified named-tensor checkpoint files.

Layout (all integers little-endian):

    8 bytes   magic "UDCPCKPT"
    u32       format version (currently 1)
    u64       tensor count
    per tensor, in ascending name order:
        u16   name length, then that many UTF-8 bytes
        u8    rank
        u64 * rank  extents
        f64 * prod(extents)  row-major payload
    u64       FNV-1a (64-bit) checksum of every preceding byte

The config snapshot rides along as the reserved tensor "__config__": its
UTF-8 JSON bytes stored one byte per f64 element, which keeps the container
format uniform.  Usage counters are stored as f64 (exact below 2**53).
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .config import ModelConfig
from .pools import IntegrityError

__all__ = ["save_checkpoint", "load_checkpoint", "fnv1a64",
           "MAGIC", "VERSION", "CONFIG_KEY"]

MAGIC = b"UDCPCKPT"
VERSION = 1
CONFIG_KEY = "__config__"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, state: int = _FNV_OFFSET) -> int:
    h = state
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _config_tensor(config: ModelConfig) -> np.ndarray:
    raw = config.to_json().encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _config_from_tensor(arr: np.ndarray) -> ModelConfig:
    raw = arr.astype(np.uint8).tobytes()
    return ModelConfig.from_json(raw.decode("utf-8"))


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray]):
    """Write tensors (plus the config snapshot) and the trailing checksum."""
    if CONFIG_KEY in tensors:
        raise ValueError(f"{CONFIG_KEY!r} is reserved")
    entries = dict(tensors)
    entries[CONFIG_KEY] = _config_tensor(config)

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d input must stay rank 0
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor rank too large: {arr.ndim}")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.astype("<f8").tobytes())
    payload = buf.getvalue()
    checksum = fnv1a64(payload)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Read and checksum-verify a checkpoint; returns (config, tensors)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 + 8 + 8:
        raise IntegrityError("checkpoint truncated")
    payload, trailer = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", trailer)
    if fnv1a64(payload) != stored:
        raise IntegrityError("checkpoint checksum mismatch")

    view = memoryview(payload)
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(view):
            raise IntegrityError("checkpoint truncated inside a record")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise IntegrityError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<Q", take(8))

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        n_elem = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * n_elem), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)  # own, writable copy
    if off != len(view):
        raise IntegrityError("trailing bytes after the last tensor")

    config_arr = tensors.pop(CONFIG_KEY, None)
    if config_arr is None:
        raise IntegrityError("checkpoint lacks the config snapshot")
    return _config_from_tensor(config_arr), tensors
