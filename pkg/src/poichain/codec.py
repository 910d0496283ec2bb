"""Canonical byte encoding shared by every signed, hashed or transmitted structure.

A record is a sequence of fields in declaration order.  Each field is written
as a 4-byte big-endian length followed by the raw bytes.  Decoding is strict:
trailing bytes, short reads and non-canonical scalars are all errors, so
``encode(decode(b)) == b`` holds for every accepted input.
"""

from __future__ import annotations

import struct
from typing import Iterable, Optional, Sequence

_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class CodecError(ValueError):
    """Raised when bytes do not decode under the canonical rules."""


def encode(*fields: bytes) -> bytes:
    parts = []
    for f in fields:
        parts.append(_LEN.pack(len(f)))
        parts.append(f)
    return b"".join(parts)


def encode_list(items: Iterable[bytes]) -> bytes:
    return encode(*items)


def decode(data: bytes, count: Optional[int] = None) -> list[bytes]:
    """Split ``data`` into its length-prefixed fields.

    If ``count`` is given the record must contain exactly that many fields.
    """
    out = []
    pos = 0
    end = len(data)
    mv = memoryview(data)
    while pos < end:
        if end - pos < 4:
            raise CodecError(f"truncated length prefix at offset {pos}")
        (n,) = _LEN.unpack_from(data, pos)
        pos += 4
        if n > end - pos:
            raise CodecError(f"field of {n} bytes overruns record at offset {pos}")
        out.append(bytes(mv[pos:pos + n]))
        pos += n
    if count is not None and len(out) != count:
        raise CodecError(f"expected {count} fields, found {len(out)}")
    return out


def u64(n: int) -> bytes:
    if n < 0 or n >= 1 << 64:
        raise CodecError(f"integer {n} outside u64 range")
    return _U64.pack(n)


def read_u64(b: bytes) -> int:
    if len(b) != 8:
        raise CodecError(f"u64 field must be 8 bytes, got {len(b)}")
    return _U64.unpack(b)[0]


def text(s: str) -> bytes:
    return s.encode("utf-8")


def read_text(b: bytes) -> str:
    try:
        return b.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CodecError(f"invalid UTF-8 field: {exc}") from None


def optional(payload: Optional[bytes]) -> bytes:
    # b"" means absent; a present value carries a 0x01 marker so that an
    # empty payload is still distinguishable from absence.
    if payload is None:
        return b""
    return b"\x01" + payload


def read_optional(b: bytes) -> Optional[bytes]:
    if not b:
        return None
    if b[0] != 1:
        raise CodecError("bad optional marker")
    return b[1:]


def fixed(b: bytes, size: int, what: str = "field") -> bytes:
    if len(b) != size:
        raise CodecError(f"{what} must be {size} bytes, got {len(b)}")
    return b


def read_frames(data: bytes) -> list[bytes]:
    """Split a length-prefixed frame stream (the chain persistence format)."""
    frames = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < 4:
            raise CodecError(f"truncated frame header at byte offset {pos}")
        (n,) = _LEN.unpack_from(data, pos)
        if n > len(data) - pos - 4:
            raise CodecError(f"truncated frame at byte offset {pos}: header claims {n} bytes, "
                             f"{len(data) - pos - 4} remain")
        frames.append(data[pos + 4:pos + 4 + n])
        pos += 4 + n
    return frames


def write_frames(frames: Sequence[bytes]) -> bytes:
    return encode(*frames)
