"""Binary serialization: the WDT1 tensor container and a named-section
archive for parameter sets.

Container layout: magic ``WDT1``, u32 rank, u64 dims, little-endian f64
payload in row-major order. Archive layout: magic ``WDA1``, u32 section
count, then per section a u16 name length, UTF-8 name, and one container.
"""

import struct

import numpy as np

from .errors import ConfigurationError

MAGIC = b"WDT1"
ARCHIVE_MAGIC = b"WDA1"


def dump_tensor(fh, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.astype("<f8").tobytes())


def load_tensor(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise ConfigurationError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ConfigurationError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        dump_tensor(fh, arr)


def read_tensor(path):
    with open(path, "rb") as fh:
        return load_tensor(fh)


def save_archive(path, named_arrays):
    """Write an ordered mapping of name -> array."""
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            dump_tensor(fh, arr)


def load_archive(path):
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ARCHIVE_MAGIC:
            raise ConfigurationError(f"bad archive magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            out[name] = load_tensor(fh)
    return out
