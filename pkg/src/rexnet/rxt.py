"""RXT1 binary tensor files and named-parameter checkpoints.

Tensor file layout: b"RXT1", u32 rank, rank x u32 dims, little-endian f64 payload.
A checkpoint is a directory holding one ``<name>.rxt`` per parameter plus
``manifest.json`` listing names, files and shapes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"RXT1"


class RXTFormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype="<f8")  # tobytes below is C-ordered; keeps 0-d shapes
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise RXTFormatError("bad magic, not an RXT1 tensor")
    if len(blob) < 8:
        raise RXTFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    off = 8 + 4 * rank
    if len(blob) < off:
        raise RXTFormatError("truncated shape")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != off + 8 * count:
        raise RXTFormatError(f"payload size {len(blob) - off} does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f8", offset=off, count=count).reshape(shape).astype(np.float64)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(directory, named: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    entries = []
    for name in sorted(named):
        fname = f"{name}.rxt"
        save_tensor(directory / fname, named[name])
        entries.append({"name": name, "file": fname, "shape": list(np.shape(named[name]))})
    manifest = json.dumps({"format": "RXT1", "tensors": entries}, indent=1, sort_keys=True) + "\n"
    atomic_write_bytes(directory / "manifest.json", manifest.encode())


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for entry in manifest["tensors"]:
        arr = load_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise RXTFormatError(f"{entry['file']}: shape {arr.shape} disagrees with manifest {entry['shape']}")
        out[entry["name"]] = arr
    return out
