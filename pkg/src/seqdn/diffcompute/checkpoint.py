"""Binary parameter checkpoints.

Layout (little-endian)::

    b"DCKP"  u8 version=1  u32 n_tensors
    repeated: u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f64 data[prod(dims)]
    u32 meta_len, meta (utf-8 JSON object, may be empty)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    mb = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(mb)))
    parts.append(mb)
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    try:
        version, count = struct.unpack_from("<BI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 9
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).copy()
            off += 8 * n
        (mlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        meta = json.loads(buf[off : off + mlen].decode("utf-8")) if mlen else {}
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(tensors, meta))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
