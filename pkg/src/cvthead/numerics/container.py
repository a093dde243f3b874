"""CVTH weight container: the on-disk format for model assets and trained weights.

Layout (all integers little-endian):
    magic  b"CVTH"
    u32    version (currently 1)
    u32    entry count
    per entry:
        u16    name length, then UTF-8 name
        u8     dtype (0 = float32)
        u8     ndim
        u32    each dim
        raw    row-major little-endian float32 payload
"""
from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"CVTH"
VERSION = 1
DTYPE_F32 = 0

_MAX_NDIM = 8
_MAX_NAME = 4096


def save_container(path, entries: Mapping[str, np.ndarray]) -> None:
    """Write named float32 arrays; entry order follows the mapping order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            # np.array (not ascontiguousarray) so 0-d shapes survive
            a = np.array(arr, dtype="<f4", order="C", copy=False)
            nb = name.encode("utf-8")
            if len(nb) > _MAX_NAME:
                raise FormatError(f"entry name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", DTYPE_F32, a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.tobytes(order="C"))


def load_container(path) -> dict[str, np.ndarray]:
    """Read a CVTH file back into {name: float32 array}; raises FormatError on damage."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated file while reading {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a CVTH container")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (count,) = struct.unpack("<I", take(4, "entry count"))

    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"entry {i} name is not valid UTF-8") from e
        dtype, ndim = struct.unpack("<BB", take(2, f"entry {name!r} header"))
        if dtype != DTYPE_F32:
            raise FormatError(f"entry {name!r} has unknown dtype {dtype}")
        if ndim > _MAX_NDIM:
            raise FormatError(f"entry {name!r} has implausible ndim {ndim}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"entry {name!r} dims"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = take(4 * n_elem, f"entry {name!r} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}")
        entries[name] = arr
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after last entry")
    return entries
