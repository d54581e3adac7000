"""UBT1 tensor files and parameter directories.

Layout: magic ``UBT1``, little-endian u32 rank, rank u32 dims, then
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"UBT1"


class TensorFormatError(ValueError):
    pass


def encode(array) -> bytes:
    a = np.array(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("missing UBT1 magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 4 * n:
        raise TensorFormatError(f"payload size mismatch for shape {dims}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode(array))


def read_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_params(directory, params: Mapping[str, np.ndarray]) -> None:
    """Write one UBT1 file per tensor plus ``index.json`` {name: {file, shape}}."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, value in params.items():
        fname = name.replace("/", "__") + ".ubt"
        write_tensor(d / fname, value)
        index[name] = {"file": fname, "shape": list(np.shape(value))}
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_params(directory, dtype=np.float64) -> dict[str, np.ndarray]:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    out = {}
    for name, entry in index.items():
        a = read_tensor(d / entry["file"])
        if list(a.shape) != list(entry["shape"]):
            raise TensorFormatError(f"{name}: shape {a.shape} != index {entry['shape']}")
        out[name] = a.astype(dtype)
    return out
