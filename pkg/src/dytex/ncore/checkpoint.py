"""Binary checkpoint files for named tensors.

Format (little-endian): magic ``DYTX``, u16 version, u32 tensor count,
then per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims,
float32 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DYTX"
VERSION = 1


def save_tensors(path: str | Path, named: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(named)))
        for name, arr in named.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a DYTX checkpoint")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported DYTX version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            buf = fh.read(4 * n)
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
        return out
