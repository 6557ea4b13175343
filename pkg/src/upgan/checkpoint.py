"""Named-tensor archive.

Layout (all integers little-endian)::

    b"UPGN"  u32 version  u64 n_entries
    per entry: u32 name_len, utf-8 name, u32 rank, u64 dims[rank],
               float32 payload (row-major)

Entries are written in sorted name order so equal contents give equal bytes.
"""
import struct

import numpy as np

MAGIC = b"UPGN"
VERSION = 1


class ArchiveError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(data):
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ArchiveError("bad magic")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise ArchiveError("truncated archive")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    (count,) = take("<Q")
    out = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(view):
            raise ArchiveError("truncated archive")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + size > len(view):
            raise ArchiveError("truncated archive")
        arr = np.frombuffer(view[pos:pos + size], dtype="<f4").reshape(dims)
        pos += size
        out[name] = arr.astype(np.float64)
    if pos != len(view):
        raise ArchiveError("trailing bytes after last entry")
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
