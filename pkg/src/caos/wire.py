"""Binary framing for client/server messages.

Frame: length u32 | type u8 | body, all integers little-endian. The length
field counts the type byte plus the body. Sealed blocks travel with their
own u32 length prefix so the codec stays independent of store geometry.

Every read response and write request carries exactly two sealed blocks:
the per-access transfer is two records each way, independent of store size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import ProtocolError

MAX_FRAME = 64 * 1024 * 1024  # sanity bound; bulk-init frames stay well below

T_INFO_REQ = 0x00
T_INFO_RESP = 0x01
T_READ_REQ = 0x02
T_READ_RESP = 0x03
T_WRITE_REQ = 0x04
T_WRITE_ACK = 0x05
T_ERR = 0x06
T_BULK_INIT = 0x07


class ErrCode(IntEnum):
    LOCKED = 1
    STALE_TOKEN = 2
    BAD_POSITION = 3
    NOT_INITIALIZED = 4


@dataclass(frozen=True)
class InfoReq:
    pass


@dataclass(frozen=True)
class InfoResp:
    N: int
    ct_size: int
    block_size: int


@dataclass(frozen=True)
class ReadReq:
    p1: int
    p2: int

    def __post_init__(self):
        if self.p1 == self.p2:
            raise ProtocolError(f"read request with equal positions {self.p1}")


@dataclass(frozen=True)
class ReadResp:
    token: int
    sealed1: bytes
    sealed2: bytes


@dataclass(frozen=True)
class WriteReq:
    token: int
    p1: int
    sealed1: bytes
    p2: int
    sealed2: bytes


@dataclass(frozen=True)
class WriteAck:
    pass


@dataclass(frozen=True)
class Err:
    code: ErrCode


@dataclass(frozen=True)
class BulkInit:
    start_p: int
    sealed: tuple[bytes, ...] = field(default_factory=tuple)


Message = InfoReq | InfoResp | ReadReq | ReadResp | WriteReq | WriteAck | Err | BulkInit


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def encode_message(m: Message) -> bytes:
    if isinstance(m, InfoReq):
        body, t = b"", T_INFO_REQ
    elif isinstance(m, InfoResp):
        body, t = struct.pack("<QII", m.N, m.ct_size, m.block_size), T_INFO_RESP
    elif isinstance(m, ReadReq):
        body, t = struct.pack("<QQ", m.p1, m.p2), T_READ_REQ
    elif isinstance(m, ReadResp):
        body = struct.pack("<Q", m.token) + _blob(m.sealed1) + _blob(m.sealed2)
        t = T_READ_RESP
    elif isinstance(m, WriteReq):
        body = (
            struct.pack("<Q", m.token)
            + struct.pack("<Q", m.p1) + _blob(m.sealed1)
            + struct.pack("<Q", m.p2) + _blob(m.sealed2)
        )
        t = T_WRITE_REQ
    elif isinstance(m, WriteAck):
        body, t = b"", T_WRITE_ACK
    elif isinstance(m, Err):
        body, t = struct.pack("<B", int(m.code)), T_ERR
    elif isinstance(m, BulkInit):
        parts = [struct.pack("<QI", m.start_p, len(m.sealed))]
        parts.extend(_blob(s) for s in m.sealed)
        body, t = b"".join(parts), T_BULK_INIT
    else:
        raise ProtocolError(f"cannot encode {type(m).__name__}")
    return struct.pack("<I", len(body) + 1) + bytes([t]) + body


class _Reader:
    __slots__ = ("buf", "off")

    def __init__(self, buf: bytes, off: int):
        self.buf = buf
        self.off = off

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.off + s.size > len(self.buf):
            raise ProtocolError("frame truncated", offset=self.off)
        vals = s.unpack_from(self.buf, self.off)
        self.off += s.size
        return vals if len(vals) > 1 else vals[0]

    def blob(self) -> bytes:
        n = self.take("<I")
        if self.off + n > len(self.buf):
            raise ProtocolError("frame truncated inside blob", offset=self.off)
        b = self.buf[self.off : self.off + n]
        self.off += n
        return b


def decode_message(frame: bytes) -> Message:
    """Decode one complete frame (including its length prefix).

    Rejects truncation, trailing garbage and unknown types, reporting the
    byte offset where decoding stopped.
    """
    if len(frame) < 5:
        raise ProtocolError("frame shorter than header", offset=len(frame))
    (length,) = struct.unpack_from("<I", frame, 0)
    if length > MAX_FRAME:
        raise ProtocolError(f"declared frame length {length} exceeds limit", offset=0)
    if len(frame) != 4 + length:
        raise ProtocolError(
            f"frame is {len(frame)} bytes, header declares {4 + length}", offset=4
        )
    t = frame[4]
    r = _Reader(frame, 5)

    if t == T_INFO_REQ:
        m: Message = InfoReq()
    elif t == T_INFO_RESP:
        N, ct_size, block_size = r.take("<QII")
        m = InfoResp(N, ct_size, block_size)
    elif t == T_READ_REQ:
        p1, p2 = r.take("<QQ")
        if p1 == p2:
            raise ProtocolError(f"read request with equal positions {p1}", offset=5)
        m = ReadReq(p1, p2)
    elif t == T_READ_RESP:
        token = r.take("<Q")
        m = ReadResp(token, r.blob(), r.blob())
    elif t == T_WRITE_REQ:
        token = r.take("<Q")
        p1 = r.take("<Q")
        s1 = r.blob()
        p2 = r.take("<Q")
        s2 = r.blob()
        m = WriteReq(token, p1, s1, p2, s2)
    elif t == T_WRITE_ACK:
        m = WriteAck()
    elif t == T_ERR:
        code = r.take("<B")
        try:
            m = Err(ErrCode(code))
        except ValueError:
            raise ProtocolError(f"unknown error code {code}", offset=5) from None
    elif t == T_BULK_INIT:
        start_p, count = r.take("<QI")
        m = BulkInit(start_p, tuple(r.blob() for _ in range(count)))
    else:
        raise ProtocolError(f"unknown message type 0x{t:02x}", offset=4)

    if r.off != len(frame):
        raise ProtocolError(f"{len(frame) - r.off} trailing bytes", offset=r.off)
    return m


def read_frame(recv_exact) -> bytes:
    """Assemble one frame from a `recv_exact(n) -> bytes` callable."""
    head = recv_exact(4)
    (length,) = struct.unpack("<I", head)
    if length > MAX_FRAME:
        raise ProtocolError(f"declared frame length {length} exceeds limit", offset=0)
    return head + recv_exact(length)
