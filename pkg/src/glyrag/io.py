"""Binary containers for checkpoints and retrieval indexes, each with a JSON sidecar.

Checkpoint layout (little-endian)::

    b"GRCK" | u32 version | u32 tensor count
    per tensor: u16 name length | utf-8 name | u8 ndim | u64 * ndim shape | f64 data

Index layout::

    b"GRIX" | u32 version | u64 rows | u32 embedding width | u32 target width
    f64 embeddings (rows x width) | f64 targets (rows x target width)

The sidecar is ``<file>.json``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

VERSION = 1


class ArtifactError(RuntimeError):
    pass


class HashMismatchError(ArtifactError):
    pass


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing artifact {path}") from exc


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict) -> None:
    parts = [b"GRCK", struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C-ordered; keeps 0-d shapes
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(Path(path), b"".join(parts))
    write_json(sidecar_path(path), meta)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing checkpoint {path}") from exc
    try:
        state = _parse_checkpoint(buf, path)
    except (struct.error, ValueError) as exc:
        raise ArtifactError(f"{path}: truncated or corrupt checkpoint") from exc
    return state, read_json(sidecar_path(path))


def _parse_checkpoint(buf: bytes, path) -> dict[str, np.ndarray]:
    if buf[:4] != b"GRCK":
        raise ArtifactError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ArtifactError(f"{path}: unsupported version {version}")
    off = 12
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off: off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(buf):
        raise ValueError("trailing bytes")
    return state


def save_index_arrays(path, z: np.ndarray, y: np.ndarray, meta: dict) -> None:
    z = np.ascontiguousarray(z, dtype="<f8")
    y = np.ascontiguousarray(y, dtype="<f8")
    head = b"GRIX" + struct.pack("<IQII", VERSION, z.shape[0], z.shape[1], y.shape[1])
    _atomic_write(Path(path), head + z.tobytes() + y.tobytes())
    write_json(sidecar_path(path), meta)


def load_index_arrays(path) -> tuple[np.ndarray, np.ndarray, dict]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing index {path}") from exc
    try:
        z, y = _parse_index(buf, path)
    except (struct.error, ValueError) as exc:
        raise ArtifactError(f"{path}: truncated or corrupt index") from exc
    return z, y, read_json(sidecar_path(path))


def _parse_index(buf: bytes, path) -> tuple[np.ndarray, np.ndarray]:
    if buf[:4] != b"GRIX":
        raise ArtifactError(f"{path}: not an index")
    version, rows, width, tw = struct.unpack_from("<IQII", buf, 4)
    if version != VERSION:
        raise ArtifactError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IQII")
    z = np.frombuffer(buf, "<f8", rows * width, off).reshape(rows, width).astype(np.float64)
    off += 8 * rows * width
    y = np.frombuffer(buf, "<f8", rows * tw, off).reshape(rows, tw).astype(np.float64)
    if off + 8 * rows * tw != len(buf):
        raise ValueError("trailing bytes")
    return z, y
