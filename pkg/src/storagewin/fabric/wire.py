"""Frame codec for the socket transport.

Request frame (little-endian, 24-byte header)::

    magic "SW" | version u8 | opcode u8 | window_id u64 | offset u64 | payload_len u32 | payload

Reply::

    status u8 | payload_len u32 | payload
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..errors import BadMagic, BadVersion, Truncated

MAGIC = b"SW"
VERSION = 1

_HEADER = struct.Struct("<2sBBQQI")
_REPLY = struct.Struct("<BI")
HEADER_SIZE = _HEADER.size
REPLY_HEADER_SIZE = _REPLY.size
MAX_PAYLOAD = 0xFFFFFFFF

_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


class Opcode(enum.IntEnum):
    PUT = 1
    GET = 2
    ACC_SUM = 3
    FAO = 4
    CAS = 5
    LOCK = 6
    UNLOCK = 7
    SYNC = 8
    BARRIER = 9
    ATTR = 10


class Status(enum.IntEnum):
    OK = 0
    UNSUPPORTED = 1


@dataclass(frozen=True)
class Frame:
    opcode: int
    window_id: int = 0
    offset: int = 0
    payload: bytes = b""
    version: int = VERSION


def encode_frame(f: Frame) -> bytes:
    return _HEADER.pack(MAGIC, f.version, f.opcode, f.window_id, f.offset,
                        len(f.payload)) + bytes(f.payload)


def decode_header(buf: bytes) -> tuple[int, int, int, int, int]:
    """Validate a header; returns (version, opcode, window_id, offset, payload_len)."""
    if len(buf) < 2 or buf[:2] != MAGIC:
        if len(buf) < 2:
            raise Truncated(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
        raise BadMagic(f"bad magic {bytes(buf[:2])!r}")
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
    _, version, opcode, wid, offset, plen = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    return version, opcode, wid, offset, plen


def decode_frame(buf: bytes) -> Frame:
    version, opcode, wid, offset, plen = decode_header(buf)
    end = HEADER_SIZE + plen
    if len(buf) < end:
        raise Truncated(f"payload_len {plen} but only {len(buf) - HEADER_SIZE} bytes follow")
    return Frame(opcode, wid, offset, bytes(buf[HEADER_SIZE:end]), version)


def encode_reply(status: int, payload: bytes = b"") -> bytes:
    return _REPLY.pack(status, len(payload)) + bytes(payload)


def decode_reply(buf: bytes) -> tuple[int, bytes]:
    if len(buf) < REPLY_HEADER_SIZE:
        raise Truncated("short reply header")
    status, plen = _REPLY.unpack_from(buf)
    if len(buf) < REPLY_HEADER_SIZE + plen:
        raise Truncated("short reply payload")
    return status, bytes(buf[REPLY_HEADER_SIZE:REPLY_HEADER_SIZE + plen])


# -- payload helpers --------------------------------------------------------

def pack_i64(v: int) -> bytes:
    return _I64.pack(v)


def unpack_i64(b: bytes) -> int:
    return _I64.unpack(b)[0]


def pack_u64(v: int) -> bytes:
    return _U64.pack(v)


def unpack_u64(b: bytes) -> int:
    return _U64.unpack(b)[0]


def pack_i64s(values) -> bytes:
    return struct.pack(f"<{len(values)}q", *values)


def unpack_i64s(b: bytes) -> list[int]:
    if len(b) % 8:
        raise Truncated("int64 array length not a multiple of 8")
    return list(struct.unpack(f"<{len(b) // 8}q", b))


def pack_chunks(chunks) -> bytes:
    return b"".join(_U32.pack(len(c)) + c for c in chunks)


def unpack_chunks(b: bytes) -> list[bytes]:
    out, i = [], 0
    while i < len(b):
        if i + 4 > len(b):
            raise Truncated("chunk length cut short")
        (n,) = _U32.unpack_from(b, i)
        i += 4
        if i + n > len(b):
            raise Truncated("chunk body cut short")
        out.append(bytes(b[i:i + n]))
        i += n
    return out


def pack_attributes(attrs: dict[str, str]) -> bytes:
    chunks = []
    for k, v in attrs.items():
        chunks += [k.encode(), v.encode()]
    return pack_chunks(chunks)


def unpack_attributes(b: bytes) -> dict[str, str]:
    chunks = unpack_chunks(b)
    if len(chunks) % 2:
        raise Truncated("attribute key without value")
    return {chunks[i].decode(): chunks[i + 1].decode() for i in range(0, len(chunks), 2)}


def pack_barrier(rank: int, data: bytes) -> bytes:
    return _U32.pack(rank) + data


def unpack_barrier(b: bytes) -> tuple[int, bytes]:
    if len(b) < 4:
        raise Truncated("barrier payload without rank")
    return _U32.unpack_from(b)[0], bytes(b[4:])
