"""
Framed binary control protocol. Everything is little-endian.

    header   u8 version (=1) | u8 msg_type | u32 xid | u32 body_len
    body     the fields of the message type, in BODIES order

Field encodings:

    u8/u16/u32/u64   fixed-width unsigned
    slot             u32, 0xFFFFFFFF = "none / let the device pick"
    f64              IEEE double
    str              u16 length | utf-8 bytes
    bytes            u32 length | raw bytes
    json             u32 length | canonical JSON (sorted keys, no spaces)
    block            encoded ActionBlock (see probeplane.vm.encoding)
    key              u16 width | value | mask, each ceil(width/8) bytes
    refs             u8 count | count * (u8 space | u16 offset | u8 length)
    handle           u8 class | u32 index
    u64s             u8 count | count * u64
    u128s            u8 count | count * u128

A frame decodes only if it is exactly 10 + body_len bytes and the body
parses to exactly body_len bytes.
"""
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, Iterator, List, Optional, Tuple

from probeplane.dataplane.packet import FieldRef, MatchKey, Space
from probeplane.errors import BadLength, BadVersion, CodecError, Truncated, UnknownType
from probeplane.resources.types import Handle, ResourceClass
from probeplane.utils.json_utils import canonical_dumps, json_loads
from probeplane.vm.encoding import decode_block_from, encode_block

VERSION = 1
HEADER = struct.Struct("<BBII")
HEADER_LEN = HEADER.size
NO_SLOT = 0xFFFFFFFF


class MsgType(IntEnum):
    HELLO = 1
    ACK = 2
    ERROR = 3
    LOAD_ACTION = 10
    DELETE_ACTION = 11
    SWITCH_POINTER = 12
    CREATE_TABLE = 20
    DELETE_TABLE = 21
    INSERT_ENTRY = 22
    DELETE_ENTRY = 23
    MODIFY_ENTRY = 24
    SET_POINTER = 25
    ALLOC_RESOURCE = 30
    RELEASE_RESOURCE = 31
    SET_TIMER = 32
    CANCEL_TIMER = 33
    READ_COUNTER_REQ = 40
    READ_COUNTER_REPLY = 41
    STB_DUMP_REQ = 42
    STB_DUMP_REPLY = 43
    PROBE_INSTALL = 50
    PROBE_REVOKE = 51
    SUBSCRIBE = 52
    UNSUBSCRIBE = 53
    PROBE_CHECK = 54
    PROBE_CHECK_REPLY = 55
    PROBE_QUERY_REQ = 56
    PROBE_QUERY_REPLY = 57
    REPORT = 60
    SNAPSHOT_REQ = 70
    SNAPSHOT_REPLY = 71
    CONFIG_LOAD = 72
    CONFIG_DUMP_REQ = 73
    CONFIG_DUMP_REPLY = 74


T = MsgType
BODIES: Dict[MsgType, Tuple[Tuple[str, str], ...]] = {
    T.HELLO: (),
    T.ACK: (("value", "u64"),),
    T.ERROR: (("code", "u16"), ("detail", "str")),
    T.LOAD_ACTION: (("slot", "slot"), ("block", "block")),
    T.DELETE_ACTION: (("slot", "u32"),),
    T.SWITCH_POINTER: (("slot", "u32"), ("block_ref", "u32")),
    T.CREATE_TABLE: (("table_id", "u32"), ("after", "slot"), ("miss_slot", "u32"),
                     ("writable", "u8"), ("key_spec", "refs")),
    T.DELETE_TABLE: (("table_id", "u32"),),
    T.INSERT_ENTRY: (("table_id", "u32"), ("key", "key"), ("priority", "u32"),
                     ("slot", "u32"), ("params", "bytes")),
    T.DELETE_ENTRY: (("table_id", "u32"), ("entry_id", "u32")),
    T.MODIFY_ENTRY: (("table_id", "u32"), ("entry_id", "u32"), ("slot", "slot"),
                     ("set_params", "u8"), ("params", "bytes")),
    T.SET_POINTER: (("holder", "str"), ("slot", "slot")),
    T.ALLOC_RESOURCE: (("cls", "u8"), ("params", "u64s")),
    T.RELEASE_RESOURCE: (("handle", "handle"),),
    T.SET_TIMER: (("interval", "u64"), ("mode", "u8"), ("slot", "u32")),
    T.CANCEL_TIMER: (("timer_id", "u32"),),
    T.READ_COUNTER_REQ: (("handle", "handle"),),
    T.READ_COUNTER_REPLY: (("value", "u64"), ("unit", "u8"), ("ts", "u64")),
    T.STB_DUMP_REQ: (("handle", "handle"),),
    T.STB_DUMP_REPLY: (("entries", "json"),),
    T.PROBE_INSTALL: (("app_id", "str"), ("spec", "json")),
    T.PROBE_REVOKE: (("probe_id", "u32"), ("force", "u8")),
    T.SUBSCRIBE: (("probe_id", "u32"), ("app_id", "str")),
    T.UNSUBSCRIBE: (("probe_id", "u32"), ("app_id", "str")),
    T.PROBE_CHECK: (("specs", "json"),),
    T.PROBE_CHECK_REPLY: (("accepted", "u8"), ("estimate", "f64"), ("floor", "f64"), ("candidates", "u64s")),
    T.PROBE_QUERY_REQ: (("probe_id", "u32"),),
    T.PROBE_QUERY_REPLY: (("result", "json"),),
    T.REPORT: (("device_id", "str"), ("template", "u16"), ("ts", "u64"),
               ("values", "u128s"), ("payload", "bytes")),
    T.SNAPSHOT_REQ: (),
    T.SNAPSHOT_REPLY: (("snapshot", "json"),),
    T.CONFIG_LOAD: (("config", "json"),),
    T.CONFIG_DUMP_REQ: (),
    T.CONFIG_DUMP_REPLY: (("config", "json"),),
}

REPLY_TYPES = frozenset({T.ACK, T.ERROR, T.READ_COUNTER_REPLY, T.STB_DUMP_REPLY, T.PROBE_CHECK_REPLY,
                         T.PROBE_QUERY_REPLY, T.SNAPSHOT_REPLY, T.CONFIG_DUMP_REPLY})


@dataclass
class Message:
    type: MsgType
    xid: int = 0
    body: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str):
        return self.body[name]

    def get(self, name: str, default=None):
        return self.body.get(name, default)

    @property
    def is_reply(self) -> bool:
        return self.type in REPLY_TYPES

    def __str__(self):
        fields = ", ".join(f"{k}={_short(v)}" for k, v in self.body.items())
        return f"{self.type.name}(xid={self.xid}{', ' if fields else ''}{fields})"


def msg(msg_type: MsgType, xid: int = 0, **body) -> Message:
    return Message(MsgType(msg_type), xid, body)


def _short(value) -> str:
    text = str(value)
    return text if len(text) <= 40 else text[:37] + "..."


# ---------------- holders as text -----------------

def holder_to_text(holder: tuple) -> str:
    return ":".join(str(part) for part in holder)


def holder_from_text(text: str) -> tuple:
    kind, *rest = text.split(":")
    return (kind, *(int(r) for r in rest))


# ---------------- field codecs -----------------

_U = {"u8": struct.Struct("<B"), "u16": struct.Struct("<H"), "u32": struct.Struct("<I"),
      "u64": struct.Struct("<Q"), "slot": struct.Struct("<I"), "f64": struct.Struct("<d")}
_REF = struct.Struct("<BHB")
_HANDLE = struct.Struct("<BI")


def _key_bytes(width: int) -> int:
    return (width + 7) // 8


def _pack(kind: str, value) -> bytes:
    if kind == "slot":
        return _U["slot"].pack(NO_SLOT if value is None else value)
    if kind in _U:
        return _U[kind].pack(value)
    if kind == "str":
        raw = value.encode("utf-8")
        return _U["u16"].pack(len(raw)) + raw
    if kind == "bytes":
        return _U["u32"].pack(len(value)) + bytes(value)
    if kind == "json":
        raw = canonical_dumps(value).encode("utf-8")
        return _U["u32"].pack(len(raw)) + raw
    if kind == "block":
        return encode_block(value)
    if kind == "key":
        n = _key_bytes(value.width)
        return _U["u16"].pack(value.width) + value.value.to_bytes(n, "little") + value.mask.to_bytes(n, "little")
    if kind == "refs":
        return _U["u8"].pack(len(value)) + b"".join(
            _REF.pack(int(r.space), r.offset_bits, r.length_bits) for r in value)
    if kind == "handle":
        return _HANDLE.pack(int(value.cls), value.index)
    if kind == "u64s":
        return _U["u8"].pack(len(value)) + b"".join(_U["u64"].pack(v) for v in value)
    if kind == "u128s":
        return _U["u8"].pack(len(value)) + b"".join(int(v).to_bytes(16, "little") for v in value)
    raise ValueError(f"unknown field kind {kind}")


class _Body:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BadLength(f"body too short: needs {self.pos + n} bytes, has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def fixed(self, kind: str):
        st = _U[kind]
        return st.unpack(self.raw(st.size))[0]

    def read(self, kind: str):
        if kind == "slot":
            value = self.fixed("slot")
            return None if value == NO_SLOT else value
        if kind in _U:
            return self.fixed(kind)
        if kind == "str":
            return self.raw(self.fixed("u16")).decode("utf-8")
        if kind == "bytes":
            return bytes(self.raw(self.fixed("u32")))
        if kind == "json":
            return json_loads(self.raw(self.fixed("u32")).decode("utf-8"))
        if kind == "block":
            block, self.pos = decode_block_from(self.data, self.pos)
            return block
        if kind == "key":
            width = self.fixed("u16")
            n = _key_bytes(width)
            value = int.from_bytes(self.raw(n), "little")
            mask = int.from_bytes(self.raw(n), "little")
            return MatchKey(value, mask, width)
        if kind == "refs":
            out = []
            for _ in range(self.fixed("u8")):
                space, offset, length = _REF.unpack(self.raw(_REF.size))
                out.append(FieldRef(Space(space), offset, length))
            return tuple(out)
        if kind == "handle":
            cls, index = _HANDLE.unpack(self.raw(_HANDLE.size))
            return Handle(ResourceClass(cls), index)
        if kind == "u64s":
            return tuple(self.fixed("u64") for _ in range(self.fixed("u8")))
        if kind == "u128s":
            return tuple(int.from_bytes(self.raw(16), "little") for _ in range(self.fixed("u8")))
        raise ValueError(f"unknown field kind {kind}")


# ---------------- frames -----------------

def encode(message: Message) -> bytes:
    schema = BODIES[message.type]
    try:
        body = b"".join(_pack(kind, message.body[name]) for name, kind in schema)
    except KeyError as e:
        raise ValueError(f"{message.type.name} needs field {e}") from None
    extra = set(message.body) - {name for name, _ in schema}
    if extra:
        raise ValueError(f"{message.type.name} has no field(s) {sorted(extra)}")
    return HEADER.pack(VERSION, int(message.type), message.xid, len(body)) + body


def peek_header(data: bytes) -> Tuple[int, int, int, int]:
    """(version, msg_type, xid, body_len) of the frame at the start of `data`."""
    if len(data) < HEADER_LEN:
        raise Truncated(f"{len(data)} bytes, header needs {HEADER_LEN}")
    return HEADER.unpack_from(data)


def decode(data: bytes) -> Message:
    version, msg_type, xid, body_len = peek_header(data)
    if version != VERSION:
        raise BadVersion(f"version {version}, expected {VERSION}")
    if len(data) < HEADER_LEN + body_len:
        raise Truncated(f"body_len {body_len} but only {len(data) - HEADER_LEN} body bytes")
    if len(data) > HEADER_LEN + body_len:
        raise BadLength(f"{len(data) - HEADER_LEN - body_len} bytes past body_len {body_len}")
    try:
        mtype = MsgType(msg_type)
    except ValueError:
        raise UnknownType(msg_type, xid) from None
    reader = _Body(bytes(data[HEADER_LEN:]))
    try:
        body = {name: reader.read(kind) for name, kind in BODIES[mtype]}
    except (ValueError, struct.error, UnicodeDecodeError) as e:
        raise BadLength(f"{mtype.name} body does not parse: {e}") from None
    if reader.pos != body_len:
        raise BadLength(f"{mtype.name} body is {reader.pos} bytes, body_len says {body_len}")
    return Message(mtype, xid, body)


def split_frames(buffer: bytes) -> Tuple[List[bytes], bytes]:
    """Cut complete frames off the front of a stream buffer; returns (frames, rest)."""
    frames = []
    pos = 0
    while len(buffer) - pos >= HEADER_LEN:
        body_len = HEADER.unpack_from(buffer, pos)[3]
        end = pos + HEADER_LEN + body_len
        if end > len(buffer):
            break
        frames.append(bytes(buffer[pos:end]))
        pos = end
    return frames, bytes(buffer[pos:])


def iter_messages(buffer: bytes) -> Iterator[Message]:
    frames, rest = split_frames(buffer)
    if rest:
        raise Truncated(f"{len(rest)} trailing bytes")
    for frame in frames:
        yield decode(frame)


def hexdump_frame(data: bytes) -> str:
    """Hex dump of a frame for --trace-frames."""
    from scapy.utils import hexdump

    return hexdump(data, dump=True)


def describe_frame(data: bytes, direction: str = "") -> str:
    try:
        text = str(decode(data))
    except CodecError as e:
        text = f"<undecodable: {e}>"
    return f"{direction}{text}\n{hexdump_frame(data)}"


def error_message(xid: int, code: int, detail: str) -> Message:
    return msg(T.ERROR, xid, code=code, detail=detail[:1000])


def ack(xid: int, value: Optional[int] = 0) -> Message:
    return msg(T.ACK, xid, value=int(value or 0))
