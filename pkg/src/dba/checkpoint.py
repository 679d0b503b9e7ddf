"""Binary tensor checkpoints in the "DBA1" layout.

Layout, little-endian throughout::

    b"DBA1"  u32 count
    count x ( u16 name_len, name utf-8, u8 rank, rank x u32 extent, f64 payload )

Writes go to a temporary sibling and are renamed into place. Loads parse the
whole file before returning anything, so a damaged file never yields a
partial state. Model hyper-parameters live in a JSON sidecar
(``<path>.json``) because the binary layout carries only tensors.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DBA1"


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() below is C order
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(size, what):
        nonlocal pos
        if pos + size > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {size} bytes at offset {pos}, have {len(buf) - pos})")
        chunk = buf[pos:pos + size]
        pos += size
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a DBA1 checkpoint")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
        try:
            name = take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {i}: name is not utf-8") from exc
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(8 * size, f"payload of {name}")
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, encode(tensors))
    if meta is not None:
        _atomic_write(sidecar(path), json.dumps(meta, indent=2, sort_keys=True).encode())


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)


def load_meta(path) -> dict:
    try:
        return json.loads(sidecar(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint metadata for {path}: {exc}") from exc


def check_shapes(tensors: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    """Raise :class:`CheckpointError` naming every missing, extra or misshaped tensor."""
    bad = []
    for name, shape in expected.items():
        if name not in tensors:
            bad.append(f"{name} (missing)")
        elif tuple(tensors[name].shape) != tuple(shape):
            bad.append(f"{name} (has {tuple(tensors[name].shape)}, expected {tuple(shape)})")
    bad += [f"{name} (unexpected)" for name in tensors if name not in expected]
    if bad:
        raise CheckpointError("checkpoint does not match model: " + ", ".join(bad))
