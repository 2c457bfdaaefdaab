"""Binary checkpoint container for named tensors.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic bytes b"S2GC"
    4       4     u32 format version (currently 1)
    8       4     u32 tensor count

followed by one record per tensor, in the order written:

    u16  name length in bytes
    ...  name, UTF-8
    u8   ndim
    u32  extent per dimension (ndim of them)
    ...  row-major float32 little-endian payload (prod(extents) values)

Values are stored in 32-bit precision regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"S2GC"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, tensor in tensors.items():
            raw = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", raw.ndim))
            fh.write(struct.pack(f"<{raw.ndim}I", *raw.shape) if raw.ndim else b"")
            fh.write(np.ascontiguousarray(raw).tobytes())


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(data.copy())
    return tensors
