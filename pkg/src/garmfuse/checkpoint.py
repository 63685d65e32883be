"""Flat binary parameter files (magic RADF).

Layout, all little-endian:
    magic  b"RADF"
    u32    version (currently 1)
    u32    record count
    repeat per record:
        u32    name byte length
        bytes  UTF-8 name
        u32    rank
        u64[]  extents
        f32[]  row-major values

Values are always stored as 32-bit floats; round-trips are bit-exact.
"""

import struct

import numpy as np

MAGIC = b"RADF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_arrays(arrays):
    """Serialize an ordered name->array mapping to bytes."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", data.ndim)
        for ext in data.shape:
            out += struct.pack("<Q", ext)
        out += data.tobytes()
    return bytes(out)


def load_arrays(blob):
    """Parse bytes back into an ordered name->float32 array mapping."""
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 12
    arrays = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            if len(blob) < pos + nlen:
                raise struct.error("name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
            pos += 8 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = pos + 4 * n
            if end > len(blob):
                raise struct.error("payload")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos = end
        except struct.error as exc:
            raise CheckpointError(
                f"truncated record at byte {pos} ({exc})"
            ) from None
        arrays[name] = arr.copy()
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last record")
    return arrays


def save(path, arrays):
    blob = dump_arrays(arrays)
    with open(path, "wb") as fh:
        fh.write(blob)


def load(path):
    with open(path, "rb") as fh:
        return load_arrays(fh.read())
