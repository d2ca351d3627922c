"""Checkpoint container: named float64 arrays in one little-endian file.

Layout:
    magic      4 bytes  b"RWCK"
    version    u8       1
    count      u32      number of entries
    entries    count ×  { name_len u16, name utf-8, ndim u8, extents u32×ndim,
                          payload float64×prod(extents), row-major }
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"RWCK"
VERSION = 1


def save_checkpoint(path: Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``arrays`` (insertion order preserved) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    logger.debug(f"Wrote {len(arrays)} arrays to {path}")


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    """Read a container written by ``save_checkpoint``.

    Raises:
        CheckpointError: Missing file, bad magic/version, or truncated payload
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {blob[:4]!r})")
    offset = 4

    def take(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    version, count = take("<BI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        (raw_name,) = take(f"<{name_len}s")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if shape else 1
        (payload,) = take(f"<{8 * n}s")
        arrays[raw_name.decode("utf-8")] = (
            np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        )
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after {count} entries")
    logger.debug(f"Loaded {count} arrays from {path}")
    return arrays
