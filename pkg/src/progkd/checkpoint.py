"""Binary checkpoint format.

Layout (all little-endian)::

    b"DFTN" | u16 version
    per record: u16 name length | utf-8 name | u8 rank | rank x u32 extents | f32 data

The trailing u32 is a CRC32 over everything before it.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DFTN"
VERSION = 1


class CheckpointError(IOError):
    """Raised for unreadable, truncated or corrupt checkpoint files."""


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic or too short)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC mismatch, file is corrupt")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    off = 6
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(body):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            if off > len(body):
                raise ValueError("record runs past end of file")
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed record ({exc})") from exc
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    return decode(blob, str(path))


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over the encoded form; equal digests mean bit-identical tensors."""
    return hashlib.sha256(encode(tensors)).hexdigest()
