"""Versioned binary container for feature caches and checkpoints.

Layout (little-endian)::

    magic   4 bytes  b"AFTB"
    version u16
    kind    4 bytes  e.g. b"FEAT", b"CKPT"
    hash    16 bytes ASCII config hash
    count   u32      number of entries
    entries, each:  u32 body length | body | u32 CRC-32 of body

and each body is ``u16 key length | key | u32 meta length | JSON meta |
array bytes`` where the meta records the array's dtype and shape.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"AFTB"
VERSION = 1
_HEADER = struct.Struct("<4sH4s16sI")


class ContainerError(ValueError):
    """Malformed or foreign container file."""


class ChecksumError(ContainerError):
    """An entry failed its CRC check or was cut short."""


class HashMismatch(ContainerError):
    """The container was written under a different configuration."""


@dataclass
class Entry:
    key: str
    array: np.ndarray
    meta: dict


def _encode(entry: Entry) -> bytes:
    arr = np.ascontiguousarray(entry.array)
    meta = dict(entry.meta)
    meta["dtype"] = arr.dtype.str
    meta["shape"] = list(arr.shape)
    key = entry.key.encode("utf-8")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    return struct.pack("<H", len(key)) + key + struct.pack("<I", len(meta_bytes)) + meta_bytes + arr.tobytes()


def _decode(body: bytes) -> Entry:
    (klen,) = struct.unpack_from("<H", body, 0)
    key = body[2:2 + klen].decode("utf-8")
    (mlen,) = struct.unpack_from("<I", body, 2 + klen)
    start = 6 + klen
    meta = json.loads(body[start:start + mlen])
    arr = np.frombuffer(body[start + mlen:], dtype=np.dtype(meta.pop("dtype"))).reshape(meta.pop("shape"))
    return Entry(key, arr.copy(), meta)


def write_container(path, kind: str, config_hash: str, entries: Iterable[Entry]) -> None:
    entries = list(entries)
    parts = [_HEADER.pack(MAGIC, VERSION, kind.encode()[:4].ljust(4), config_hash.encode()[:16].ljust(16),
                          len(entries))]
    for entry in entries:
        body = _encode(entry)
        parts.append(struct.pack("<I", len(body)))
        parts.append(body)
        parts.append(struct.pack("<I", zlib.crc32(body)))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_header(path) -> tuple[str, str, int]:
    raw = Path(path).read_bytes()[: _HEADER.size]
    if len(raw) < _HEADER.size:
        raise ChecksumError(f"{path}: truncated header")
    magic, version, kind, chash, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: not a container file (magic {magic!r})")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    return kind.decode().strip(), chash.decode().strip(), count


def read_container(path, kind: str, expected_hash: str | None = None) -> list[Entry]:
    """Read and verify every entry; raise on hash mismatch or corruption."""
    data = Path(path).read_bytes()
    file_kind, chash, count = read_header(path)
    if file_kind != kind:
        raise ContainerError(f"{path}: expected a {kind} container, found {file_kind}")
    if expected_hash is not None and chash != expected_hash[:16]:
        raise HashMismatch(f"{path}: written with config hash {chash}, expected {expected_hash[:16]}")
    pos = _HEADER.size
    out = []
    for i in range(count):
        if pos + 4 > len(data):
            raise ChecksumError(f"{path}: entry #{i} missing (file truncated)")
        (length,) = struct.unpack_from("<I", data, pos)
        body = data[pos + 4:pos + 4 + length]
        crc_at = pos + 4 + length
        name = _peek_key(body) or f"#{i}"
        if len(body) < length or crc_at + 4 > len(data):
            raise ChecksumError(f"{path}: entry {name} truncated")
        (crc,) = struct.unpack_from("<I", data, crc_at)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{path}: checksum mismatch in entry {name}")
        out.append(_decode(body))
        pos = crc_at + 4
    return out


def _peek_key(body: bytes) -> str | None:
    try:
        (klen,) = struct.unpack_from("<H", body, 0)
        if 2 + klen > len(body):
            return None
        return body[2:2 + klen].decode("utf-8")
    except (struct.error, UnicodeDecodeError):
        return None
