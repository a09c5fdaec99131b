"""Binary container for named tensors (checkpoints, cached features).

Layout, all little-endian:

    magic   4 bytes  b"SQTC"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated:
        name_len u16, name utf-8
        dtype    u8   1 = float64, 2 = int64
        ndim     u8
        dims     u64 * ndim
        payload  row-major raw bytes
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SQTC"
VERSION = 1

_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_FOR_KIND = {"f": 1, "i": 2}


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        try:
            tag = _TAG_FOR_KIND[array.dtype.kind]
        except KeyError:
            raise CheckpointError(
                f"unsupported dtype {array.dtype} for tensor {name!r}")
        array = np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag])
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", tag, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    path.write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, ndim = struct.unpack_from("<BB", data, offset)
            offset += 2
            dims = struct.unpack_from(f"<{ndim}Q", data, offset)
            offset += 8 * ndim
            dtype = _DTYPE_TAGS[tag]
            nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64)) \
                if ndim else dtype.itemsize
            payload = data[offset:offset + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError(f"truncated payload for {name!r}")
            offset += nbytes
        except struct.error as err:
            raise CheckpointError(f"truncated container: {err}") from None
        except KeyError:
            raise CheckpointError(f"unknown dtype tag {tag}") from None
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out
