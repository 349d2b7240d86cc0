"""Versioned binary container for named tensors.

Layout: magic "CMAD", format version (u32 LE), tensor count (u32 LE); then per
tensor a u32-length-prefixed UTF-8 name, rank (u32), extents (u64 each) and a
little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CMAD"
FORMAT_VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a CMAD checkpoint")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
            n_values = 1
            for ext in shape:
                n_values *= ext
            payload = _read_exact(fh, 4 * n_values, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        return out


def validate_against(tensors: dict[str, np.ndarray],
                     expected_shapes: dict[str, tuple[int, ...]]) -> None:
    """Fail loudly when the checkpoint's names or shapes do not match the model."""
    missing = sorted(set(expected_shapes) - set(tensors))
    extra = sorted(set(tensors) - set(expected_shapes))
    if missing or extra:
        raise CheckpointError(f"checkpoint name mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, shape in expected_shapes.items():
        got = tuple(tensors[name].shape)
        if got != tuple(shape):
            raise CheckpointError(f"checkpoint shape mismatch for {name!r}: {got} vs expected {tuple(shape)}")
