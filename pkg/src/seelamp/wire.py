"""Packet definitions and the little-endian binary codec.

Layout of every packet::

    header  = type:u8 seq:u32 src:u32 origin:u32 ttl:u8 timestamp:u64   (22 bytes)
    body    = fields in declaration order

Positions are two float64, booleans one byte, optional values a presence
byte followed by the value, lists a u16 count followed by the items.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Union

from .geometry import Position

WIRE_FORMAT = 1  # bump on any layout change
BROADCAST = 0xFFFFFFFF
NO_HOPS = 0xFF  # hop count unknown / not in tree
UNICAST_TTL = 64
MAX_U32 = 0xFFFFFFFF


class MalformedPacket(ValueError):
    pass


class MsgType(enum.IntEnum):
    LOCN = 1
    LACK = 2
    MGREQ = 3
    MGRPL = 4
    GRAFT = 5
    ALARM = 6
    LEAVE = 7
    TREE_UPDATE = 8
    STOP_SEARCH = 9
    DATA = 10


class AlarmKind(enum.IntEnum):
    LEAVING = 1
    POWER_LOW = 2
    ROOT_HANDOFF = 3
    BACKUP_APPOINT = 4
    BACKUP_RELEASE = 5


@dataclass(frozen=True, slots=True)
class Locn:
    pos: Position


@dataclass(frozen=True, slots=True)
class Lack:
    ack_pos: Position
    src: int
    src_pos: Position


@dataclass(frozen=True, slots=True)
class DirectedTarget:
    """Where a directional search copy is heading.

    `tm` is the tree member learned from a request table, `waypoint` the
    zone node this copy is currently being relayed to.
    """
    tm: int
    tm_pos: Position
    waypoint: int


@dataclass(frozen=True, slots=True)
class Mgreq:
    group: int
    rq: int
    rq_pos: Position
    join_flag: bool
    rq_hops: int = NO_HOPS
    target: Optional[DirectedTarget] = None


@dataclass(frozen=True, slots=True)
class Mgrpl:
    group: int
    tm: int
    tm_pos: Position
    rq: int
    rq_pos: Position
    leader: int = BROADCAST
    tm_hops: int = NO_HOPS


@dataclass(frozen=True, slots=True)
class Graft:
    group: int
    from_node: int
    to_node: int


@dataclass(frozen=True, slots=True)
class Alarm:
    group: int
    kind: AlarmKind
    successor: Optional[int] = None


@dataclass(frozen=True, slots=True)
class Leave:
    group: int


@dataclass(frozen=True, slots=True)
class TreeUpdate:
    group: int
    path: tuple[int, ...]

    def __post_init__(self):
        if not self.path:
            raise ValueError("TREE_UPDATE path must be non-empty")
        if len(set(self.path)) != len(self.path):
            raise ValueError(f"TREE_UPDATE path has duplicates: {self.path}")


@dataclass(frozen=True, slots=True)
class StopSearch:
    group: int
    rq: int


@dataclass(frozen=True, slots=True)
class Data:
    group: int
    payload: bytes

    @property
    def payload_len(self) -> int:
        return len(self.payload)


Body = Union[Locn, Lack, Mgreq, Mgrpl, Graft, Alarm, Leave, TreeUpdate,
             StopSearch, Data]

_TYPE_OF = {
    Locn: MsgType.LOCN, Lack: MsgType.LACK, Mgreq: MsgType.MGREQ,
    Mgrpl: MsgType.MGRPL, Graft: MsgType.GRAFT, Alarm: MsgType.ALARM,
    Leave: MsgType.LEAVE, TreeUpdate: MsgType.TREE_UPDATE,
    StopSearch: MsgType.STOP_SEARCH, Data: MsgType.DATA,
}


@dataclass(frozen=True, slots=True)
class Packet:
    seq: int
    src: int
    origin: int
    ttl: int
    timestamp: int
    body: Body

    @property
    def msg_type(self) -> MsgType:
        return _TYPE_OF[type(self.body)]

    @property
    def key(self) -> tuple[int, int]:
        """Duplicate-suppression key."""
        return (self.origin, self.seq)

    def relayed(self, src: int, ttl: Optional[int] = None) -> "Packet":
        """Copy for retransmission by `src`, ttl decremented unless given."""
        return Packet(self.seq, src, self.origin,
                      self.ttl - 1 if ttl is None else ttl,
                      self.timestamp, self.body)

    def with_body(self, body: Body) -> "Packet":
        return Packet(self.seq, self.src, self.origin, self.ttl,
                      self.timestamp, body)


# -- encoding ---------------------------------------------------------------

_HEADER = struct.Struct("<BIIIBQ")
_POS = struct.Struct("<dd")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
HEADER_SIZE = _HEADER.size


def _check_u32(value: int, name: str) -> None:
    if not 0 <= value <= MAX_U32:
        raise ValueError(f"{name}={value} does not fit in 32 bits")


class _Writer:
    __slots__ = ("parts",)

    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int):
        self.parts.append(_U8.pack(v))

    def u16(self, v: int):
        self.parts.append(_U16.pack(v))

    def u32(self, v: int):
        self.parts.append(_U32.pack(v))

    def pos(self, p: Position):
        self.parts.append(_POS.pack(p.x, p.y))

    def raw(self, b: bytes):
        self.parts.append(b)


def _encode_body(w: _Writer, body: Body) -> None:
    t = type(body)
    if t is Locn:
        w.pos(body.pos)
    elif t is Lack:
        w.pos(body.ack_pos)
        w.u32(body.src)
        w.pos(body.src_pos)
    elif t is Mgreq:
        w.u32(body.group)
        w.u32(body.rq)
        w.pos(body.rq_pos)
        w.u8(1 if body.join_flag else 0)
        w.u8(body.rq_hops)
        if body.target is None:
            w.u8(0)
        else:
            w.u8(1)
            w.u32(body.target.tm)
            w.pos(body.target.tm_pos)
            w.u32(body.target.waypoint)
    elif t is Mgrpl:
        w.u32(body.group)
        w.u32(body.tm)
        w.pos(body.tm_pos)
        w.u32(body.rq)
        w.pos(body.rq_pos)
        w.u32(body.leader)
        w.u8(body.tm_hops)
    elif t is Graft:
        w.u32(body.group)
        w.u32(body.from_node)
        w.u32(body.to_node)
    elif t is Alarm:
        w.u32(body.group)
        w.u8(int(body.kind))
        if body.successor is None:
            w.u8(0)
        else:
            w.u8(1)
            w.u32(body.successor)
    elif t is Leave:
        w.u32(body.group)
    elif t is TreeUpdate:
        if not body.path or len(set(body.path)) != len(body.path):
            raise ValueError("TREE_UPDATE path must be non-empty and duplicate-free")
        w.u32(body.group)
        w.u16(len(body.path))
        for hop in body.path:
            w.u32(hop)
    elif t is StopSearch:
        w.u32(body.group)
        w.u32(body.rq)
    elif t is Data:
        w.u32(body.group)
        w.u16(len(body.payload))
        w.raw(bytes(body.payload))
    else:
        raise TypeError(f"not a packet body: {body!r}")


def encode(p: Packet) -> bytes:
    w = _Writer()
    try:
        w.raw(_HEADER.pack(p.msg_type, p.seq, p.src, p.origin, p.ttl, p.timestamp))
        _encode_body(w, p.body)
    except struct.error as exc:
        raise ValueError(f"field out of range in {p!r}: {exc}") from exc
    return b"".join(w.parts)



def encoded_size(p: Packet) -> int:
    """Byte length of `encode(p)`, without building the bytes."""
    body = p.body
    t = type(body)
    if t is Data:
        return HEADER_SIZE + 6 + len(body.payload)
    if t is TreeUpdate:
        return HEADER_SIZE + 6 + 4 * len(body.path)
    if t is Mgreq:
        return HEADER_SIZE + 27 + (0 if body.target is None else 24)
    if t is Alarm:
        return HEADER_SIZE + 6 + (0 if body.successor is None else 4)
    return HEADER_SIZE + _FIXED_SIZES[t]


_FIXED_SIZES = {Locn: 16, Lack: 36, Mgrpl: 49, Graft: 12, Leave: 4,
                StopSearch: 8}


class _Reader:
    __slots__ = ("buf", "off")

    def __init__(self, buf: bytes, off: int = 0):
        self.buf = buf
        self.off = off

    def _take(self, s: struct.Struct):
        if self.off + s.size > len(self.buf):
            raise MalformedPacket(f"truncated at byte {self.off}")
        vals = s.unpack_from(self.buf, self.off)
        self.off += s.size
        return vals

    def u8(self) -> int:
        return self._take(_U8)[0]

    def u16(self) -> int:
        return self._take(_U16)[0]

    def u32(self) -> int:
        return self._take(_U32)[0]

    def flag(self) -> bool:
        v = self.u8()
        if v > 1:
            raise MalformedPacket(f"bad boolean byte {v}")
        return bool(v)

    def pos(self) -> Position:
        x, y = self._take(_POS)
        try:
            return Position(x, y)
        except ValueError as exc:
            raise MalformedPacket(str(exc)) from exc

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise MalformedPacket(f"truncated payload at byte {self.off}")
        out = bytes(self.buf[self.off:self.off + n])
        self.off += n
        return out


def _decode_body(r: _Reader, mtype: int) -> Body:
    if mtype == MsgType.LOCN:
        return Locn(r.pos())
    if mtype == MsgType.LACK:
        return Lack(r.pos(), r.u32(), r.pos())
    if mtype == MsgType.MGREQ:
        group, rq, rq_pos, jf, hops = r.u32(), r.u32(), r.pos(), r.flag(), r.u8()
        target = None
        if r.flag():
            target = DirectedTarget(r.u32(), r.pos(), r.u32())
        return Mgreq(group, rq, rq_pos, jf, hops, target)
    if mtype == MsgType.MGRPL:
        return Mgrpl(r.u32(), r.u32(), r.pos(), r.u32(), r.pos(), r.u32(), r.u8())
    if mtype == MsgType.GRAFT:
        return Graft(r.u32(), r.u32(), r.u32())
    if mtype == MsgType.ALARM:
        group, kind = r.u32(), r.u8()
        try:
            kind = AlarmKind(kind)
        except ValueError:
            raise MalformedPacket(f"unknown alarm kind {kind}") from None
        successor = r.u32() if r.flag() else None
        return Alarm(group, kind, successor)
    if mtype == MsgType.LEAVE:
        return Leave(r.u32())
    if mtype == MsgType.TREE_UPDATE:
        group, n = r.u32(), r.u16()
        path = tuple(r.u32() for _ in range(n))
        try:
            return TreeUpdate(group, path)
        except ValueError as exc:
            raise MalformedPacket(str(exc)) from exc
    if mtype == MsgType.STOP_SEARCH:
        return StopSearch(r.u32(), r.u32())
    if mtype == MsgType.DATA:
        group, n = r.u32(), r.u16()
        return Data(group, r.raw(n))
    raise MalformedPacket(f"unknown msg_type {mtype}")


def decode(buf: bytes) -> Packet:
    r = _Reader(bytes(buf))
    mtype, seq, src, origin, ttl, ts = r._take(_HEADER)
    body = _decode_body(r, mtype)
    if r.off != len(r.buf):
        raise MalformedPacket(f"{len(r.buf) - r.off} trailing bytes")
    return Packet(seq, src, origin, ttl, ts, body)
