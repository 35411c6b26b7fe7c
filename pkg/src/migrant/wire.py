"""Length-prefixed binary framing for client-server and server-server links.

Every frame encodes as a 4-byte big-endian length prefix followed by a 1-byte
kind and a kind-specific body; the prefix counts everything after itself.
Total frame size (prefix included) is capped at 1 MiB.  Field encodings:
strings are a 2-byte big-endian length plus UTF-8 bytes, integers are
big-endian fixed width, an ordering key is epoch(8) followed by seq(8),
message ids are 16 raw bytes.  The full format, with a worked hex example per
frame kind, is documented in docs/protocol.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .core import OrderKey

MAX_FRAME = 1 << 20  # total encoded size, length prefix included

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_KEY = struct.Struct(">QQ")


class MalformedFrame(Exception):
    """Undecodable input; the connection carrying it must be closed."""


class OversizeFrame(Exception):
    """Frame would exceed the 1 MiB encoding cap."""


# connection roles (CONNECT)
ROLE_CLIENT = 0
ROLE_SERVER = 1

# PUBNACK reasons
NACK_NOT_COORDINATOR = 1
NACK_TIMEOUT = 2
NACK_ELECTION_FAILED = 3
NACK_UNAVAILABLE = 4

# CLOSE reasons
CLOSE_PROTOCOL_VIOLATION = 1
CLOSE_SLOW_CONSUMER = 2
CLOSE_FENCED = 3
CLOSE_SHUTDOWN = 4
CLOSE_CONNECTION_LIMIT = 5


@dataclass(frozen=True, slots=True)
class Connect:
    role: int = ROLE_CLIENT
    server_id: int = 0  # meaningful only for ROLE_SERVER


@dataclass(frozen=True, slots=True)
class Connack:
    server_id: int


@dataclass(frozen=True, slots=True)
class Subscribe:
    topic: str
    resume: OrderKey  # (0,0) = live only, no replay


@dataclass(frozen=True, slots=True)
class Suback:
    topic: str


@dataclass(frozen=True, slots=True)
class Publish:
    topic: str
    msg_id: bytes
    payload: bytes = field(repr=False)
    ack_requested: bool = True


@dataclass(frozen=True, slots=True)
class Puback:
    msg_id: bytes


@dataclass(frozen=True, slots=True)
class Pubnack:
    msg_id: bytes
    reason: int
    owner_hint: int = 0  # server id + 1; 0 = no hint


@dataclass(frozen=True, slots=True)
class Notify:
    topic: str
    key: OrderKey
    msg_id: bytes
    payload: bytes = field(repr=False)


@dataclass(frozen=True, slots=True)
class Recover:
    topic: str
    after: OrderKey


@dataclass(frozen=True, slots=True)
class RecoverEnd:
    topic: str
    truncated: bool


@dataclass(frozen=True, slots=True)
class Ping:
    pass


@dataclass(frozen=True, slots=True)
class Pong:
    pass


@dataclass(frozen=True, slots=True)
class Replicate:
    group: int
    topic: str
    key: OrderKey
    msg_id: bytes
    payload: bytes = field(repr=False)


@dataclass(frozen=True, slots=True)
class ReplAck:
    group: int
    topic: str
    key: OrderKey
    msg_id: bytes


@dataclass(frozen=True, slots=True)
class CoordGossip:
    group: int
    server: int
    epoch: int


@dataclass(frozen=True, slots=True)
class ReconcileReq:
    group: int
    # last known key per topic at the requester; topics absent here but
    # present at the responder are returned in full
    entries: tuple[tuple[str, OrderKey], ...]


@dataclass(frozen=True, slots=True)
class ReconcileRsp:
    group: int
    done: bool
    messages: tuple[tuple[str, OrderKey, bytes, bytes], ...]  # topic, key, msg_id, payload
    truncated: tuple[str, ...] = ()  # topics whose history had evicted entries


@dataclass(frozen=True, slots=True)
class Close:
    reason: int


@dataclass(frozen=True, slots=True)
class KvReq:
    blob: bytes = field(repr=False)


@dataclass(frozen=True, slots=True)
class KvRsp:
    blob: bytes = field(repr=False)


Frame = (
    Connect | Connack | Subscribe | Suback | Publish | Puback | Pubnack
    | Notify | Recover | RecoverEnd | Ping | Pong | Replicate | ReplAck
    | CoordGossip | ReconcileReq | ReconcileRsp | Close | KvReq | KvRsp
)

KIND_OF = {
    Connect: 1, Connack: 2, Subscribe: 3, Suback: 4, Publish: 5,
    Puback: 6, Pubnack: 7, Notify: 8, Recover: 9, RecoverEnd: 10,
    Ping: 11, Pong: 12, Replicate: 13, ReplAck: 14, CoordGossip: 15,
    ReconcileReq: 16, ReconcileRsp: 17, Close: 18, KvReq: 19, KvRsp: 20,
}
CLASS_OF = {k: c for c, k in KIND_OF.items()}
ALL_FRAME_CLASSES = tuple(KIND_OF)


def _pack_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise OversizeFrame("string field exceeds 65535 bytes")
    out += _U16.pack(len(raw))
    out += raw


def _pack_blob16(out: bytearray, b: bytes) -> None:
    if len(b) > 0xFFFF:
        raise OversizeFrame("payload exceeds 65535 bytes")
    out += _U16.pack(len(b))
    out += b


def _pack_msg_id(out: bytearray, b: bytes) -> None:
    if len(b) != 16:
        raise ValueError("msg_id must be 16 bytes")
    out += b


def _pack_key(out: bytearray, k: OrderKey) -> None:
    out += _KEY.pack(k.epoch, k.seq)


class _Reader:
    """Cursor over a frame body; every read checks the remaining length."""

    __slots__ = ("buf", "off")

    def __init__(self, buf: bytes, off: int = 0):
        self.buf = buf
        self.off = off

    def _take(self, n: int) -> bytes:
        end = self.off + n
        if end > len(self.buf):
            raise MalformedFrame("truncated frame body")
        chunk = self.buf[self.off:end]
        self.off = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def key(self) -> OrderKey:
        e, s = _KEY.unpack(self._take(16))
        return OrderKey(e, s)

    def string(self) -> str:
        n = self.u16()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame("invalid UTF-8 in string field") from exc

    def blob16(self) -> bytes:
        return self._take(self.u16())

    def msg_id(self) -> bytes:
        return self._take(16)

    def rest(self) -> bytes:
        chunk = self.buf[self.off:]
        self.off = len(self.buf)
        return chunk

    def expect_end(self) -> None:
        if self.off != len(self.buf):
            raise MalformedFrame("trailing bytes after frame body")


def encode_frame(f: Frame) -> bytes:
    """Serialize a frame; deterministic byte string."""
    kind = KIND_OF.get(type(f))
    if kind is None:
        raise TypeError(f"not a frame: {f!r}")
    body = bytearray()
    if kind == 1:
        body += _U8.pack(f.role)
        body += _U32.pack(f.server_id)
    elif kind == 2:
        body += _U32.pack(f.server_id)
    elif kind == 3:
        _pack_str(body, f.topic)
        _pack_key(body, f.resume)
    elif kind == 4:
        _pack_str(body, f.topic)
    elif kind == 5:
        body += _U8.pack(1 if f.ack_requested else 0)
        _pack_str(body, f.topic)
        _pack_msg_id(body, f.msg_id)
        _pack_blob16(body, f.payload)
    elif kind == 6:
        _pack_msg_id(body, f.msg_id)
    elif kind == 7:
        _pack_msg_id(body, f.msg_id)
        body += _U8.pack(f.reason)
        body += _U32.pack(f.owner_hint)
    elif kind == 8:
        _pack_str(body, f.topic)
        _pack_key(body, f.key)
        _pack_msg_id(body, f.msg_id)
        _pack_blob16(body, f.payload)
    elif kind == 9:
        _pack_str(body, f.topic)
        _pack_key(body, f.after)
    elif kind == 10:
        _pack_str(body, f.topic)
        body += _U8.pack(1 if f.truncated else 0)
    elif kind in (11, 12):
        pass
    elif kind == 13:
        body += _U32.pack(f.group)
        _pack_str(body, f.topic)
        _pack_key(body, f.key)
        _pack_msg_id(body, f.msg_id)
        _pack_blob16(body, f.payload)
    elif kind == 14:
        body += _U32.pack(f.group)
        _pack_str(body, f.topic)
        _pack_key(body, f.key)
        _pack_msg_id(body, f.msg_id)
    elif kind == 15:
        body += _U32.pack(f.group)
        body += _U32.pack(f.server)
        body += _U64.pack(f.epoch)
    elif kind == 16:
        body += _U32.pack(f.group)
        body += _U16.pack(len(f.entries))
        for topic, after in f.entries:
            _pack_str(body, topic)
            _pack_key(body, after)
    elif kind == 17:
        body += _U32.pack(f.group)
        body += _U8.pack(1 if f.done else 0)
        body += _U16.pack(len(f.messages))
        for topic, key, msg_id, payload in f.messages:
            _pack_str(body, topic)
            _pack_key(body, key)
            _pack_msg_id(body, msg_id)
            _pack_blob16(body, payload)
        body += _U16.pack(len(f.truncated))
        for topic in f.truncated:
            _pack_str(body, topic)
    elif kind == 18:
        body += _U8.pack(f.reason)
    else:  # 19, 20
        body += f.blob
    out = _U32.pack(len(body) + 1) + _U8.pack(kind) + bytes(body)
    if len(out) > MAX_FRAME:
        raise OversizeFrame(f"encoded frame is {len(out)} bytes")
    return out


def _decode_body(kind: int, body: bytes) -> Frame:
    r = _Reader(body)
    if kind == 1:
        f: Frame = Connect(role=r.u8(), server_id=r.u32())
    elif kind == 2:
        f = Connack(server_id=r.u32())
    elif kind == 3:
        f = Subscribe(topic=r.string(), resume=r.key())
    elif kind == 4:
        f = Suback(topic=r.string())
    elif kind == 5:
        ack = r.u8() == 1
        f = Publish(topic=r.string(), msg_id=r.msg_id(), payload=r.blob16(),
                    ack_requested=ack)
    elif kind == 6:
        f = Puback(msg_id=r.msg_id())
    elif kind == 7:
        f = Pubnack(msg_id=r.msg_id(), reason=r.u8(), owner_hint=r.u32())
    elif kind == 8:
        f = Notify(topic=r.string(), key=r.key(), msg_id=r.msg_id(),
                   payload=r.blob16())
    elif kind == 9:
        f = Recover(topic=r.string(), after=r.key())
    elif kind == 10:
        f = RecoverEnd(topic=r.string(), truncated=r.u8() == 1)
    elif kind == 11:
        f = Ping()
    elif kind == 12:
        f = Pong()
    elif kind == 13:
        f = Replicate(group=r.u32(), topic=r.string(), key=r.key(),
                      msg_id=r.msg_id(), payload=r.blob16())
    elif kind == 14:
        f = ReplAck(group=r.u32(), topic=r.string(), key=r.key(),
                    msg_id=r.msg_id())
    elif kind == 15:
        f = CoordGossip(group=r.u32(), server=r.u32(), epoch=r.u64())
    elif kind == 16:
        group = r.u32()
        n = r.u16()
        entries = tuple((r.string(), r.key()) for _ in range(n))
        f = ReconcileReq(group=group, entries=entries)
    elif kind == 17:
        group = r.u32()
        done = r.u8() == 1
        n = r.u16()
        msgs = tuple(
            (r.string(), r.key(), r.msg_id(), r.blob16()) for _ in range(n)
        )
        m = r.u16()
        trunc = tuple(r.string() for _ in range(m))
        f = ReconcileRsp(group=group, done=done, messages=msgs, truncated=trunc)
    elif kind == 18:
        f = Close(reason=r.u8())
    elif kind == 19:
        f = KvReq(blob=r.rest())
    elif kind == 20:
        f = KvRsp(blob=r.rest())
    else:
        raise MalformedFrame(f"unknown frame kind {kind}")
    r.expect_end()
    return f


class DecodeBuffer:
    """Accumulates bytes from one connection and yields complete frames.

    Owned exclusively by a single connection handler; after feed() returns,
    the buffer never retains a complete undecoded frame.
    """

    __slots__ = ("pending",)

    def __init__(self) -> None:
        self.pending = bytearray()

    def feed(self, incoming: bytes) -> list[Frame]:
        """Append incoming bytes; return all frames completed by them.

        Raises MalformedFrame on protocol violations (oversize length prefix,
        unknown kind, body length mismatch); the connection must then be
        closed.  An oversize length prefix is rejected as soon as the prefix
        itself is readable, before any of the body is buffered.
        """
        buf = self.pending
        buf += incoming
        frames: list[Frame] = []
        pos = 0
        n = len(buf)
        while n - pos >= 4:
            length = _U32.unpack_from(buf, pos)[0]
            if length < 1 or length + 4 > MAX_FRAME:
                raise MalformedFrame(f"bad length prefix {length}")
            if n - pos - 4 < length:
                break
            body = bytes(buf[pos + 5:pos + 4 + length])
            frames.append(_decode_body(buf[pos + 4], body))
            pos += 4 + length
        if pos:
            del buf[:pos]
        return frames


def decode_frames(buf: DecodeBuffer, incoming: bytes) -> list[Frame]:
    """Feed incoming bytes through a connection's decode buffer."""
    return buf.feed(incoming)
