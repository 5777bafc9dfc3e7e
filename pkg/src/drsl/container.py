"""Versioned binary container used for checkpoints and adversarial-batch dumps.

Layout (all integers little-endian)::

    b"DRSL"                magic
    u32                    format version
    u32 + bytes            JSON metadata (sorted keys, UTF-8)
    u32                    number of arrays
    per array, in insertion order:
        u16 + bytes        name (UTF-8)
        u8                 ndim
        u32 * ndim         shape
        f8 * prod(shape)   data, row-major
"""

import io
import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"DRSL"
VERSION = 1


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(meta, arrays):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(payload):
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("container is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic: not a DRSL container")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (n_meta,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(n_meta)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise FormatError("trailing bytes after the last array")
    return meta, arrays


def write(path, meta, arrays):
    atomic_write_bytes(path, encode(meta, arrays))


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
