"""
Protocol-oblivious packet addressing: packets and metadata are plain byte
strings, fields are (space, offset_bits, length_bits) triples. Bits are
numbered MSB-first over network-order bytes.
"""
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

CONTROLLER_PORT = 0xFFFFFFFD
MAX_FIELD_BITS = 128


class Space(IntEnum):
    PACKET = 0
    METADATA = 1
    PARAMS = 2


SPACE_NAMES = {Space.PACKET: "pkt", Space.METADATA: "meta", Space.PARAMS: "param"}
_NAMES_TO_SPACE = {v: k for k, v in SPACE_NAMES.items()}
_REF_RE = re.compile(r"^(pkt|meta|param)\[(\d+):(\d+)\]$")


@dataclass(frozen=True, order=True)
class FieldRef:
    space: Space
    offset_bits: int
    length_bits: int

    def __post_init__(self):
        if self.offset_bits < 0:
            raise ValueError(f"negative field offset {self.offset_bits}")
        if not 0 < self.length_bits <= MAX_FIELD_BITS:
            raise ValueError(f"field length {self.length_bits} outside 1..{MAX_FIELD_BITS}")

    @property
    def end_bits(self) -> int:
        return self.offset_bits + self.length_bits

    @property
    def mask(self) -> int:
        return (1 << self.length_bits) - 1

    def __str__(self):
        return f"{SPACE_NAMES[self.space]}[{self.offset_bits}:{self.length_bits}]"

    @classmethod
    def parse(cls, text: str) -> "FieldRef":
        m = _REF_RE.match(text.strip())
        if not m:
            raise ValueError(f"bad field reference {text!r}")
        return cls(_NAMES_TO_SPACE[m.group(1)], int(m.group(2)), int(m.group(3)))


def pkt(offset_bits: int, length_bits: int) -> FieldRef:
    return FieldRef(Space.PACKET, offset_bits, length_bits)


def meta(offset_bits: int, length_bits: int) -> FieldRef:
    return FieldRef(Space.METADATA, offset_bits, length_bits)


def param(offset_bits: int, length_bits: int) -> FieldRef:
    return FieldRef(Space.PARAMS, offset_bits, length_bits)


def read_bits(data: bytes, offset: int, length: int) -> int:
    """Read `length` bits at `offset`; bytes past the end read as zero."""
    start = offset // 8
    end = (offset + length + 7) // 8
    chunk = bytes(data[start:end])
    if len(chunk) < end - start:
        chunk = chunk + bytes(end - start - len(chunk))
    value = int.from_bytes(chunk, "big")
    shift = end * 8 - (offset + length)
    return (value >> shift) & ((1 << length) - 1)


def write_bits(buf: bytearray, offset: int, length: int, value: int) -> None:
    start = offset // 8
    end = (offset + length + 7) // 8
    if end > len(buf):
        raise IndexError(f"write of {length} bits at {offset} past buffer end")
    shift = end * 8 - (offset + length)
    mask = ((1 << length) - 1) << shift
    current = int.from_bytes(buf[start:end], "big")
    current = (current & ~mask) | ((value << shift) & mask)
    buf[start:end] = current.to_bytes(end - start, "big")


@dataclass
class PacketBuffer:
    data: bytes
    ingress_port: int
    arrival_ts: int = 0

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True)
class MatchKey:
    """Ternary key: a packet key k matches when k & mask == value."""
    value: int
    mask: int
    width: int

    def __post_init__(self):
        full = (1 << self.width) - 1
        if self.mask & ~full or self.value & ~full:
            raise ValueError("match key wider than its declared width")
        if self.value & ~self.mask:
            raise ValueError("match value has bits set outside its mask")

    @classmethod
    def exact(cls, value: int, width: int) -> "MatchKey":
        return cls(value, (1 << width) - 1, width)

    @classmethod
    def wildcard(cls, width: int) -> "MatchKey":
        return cls(0, 0, width)

    def matches(self, key_bits: int) -> bool:
        return key_bits & self.mask == self.value

    def covers(self, other: "MatchKey") -> bool:
        """True when every key matched by `other` is also matched here."""
        return (self.mask & ~other.mask) == 0 and (other.value & self.mask) == self.value

    def intersects(self, other: "MatchKey") -> bool:
        common = self.mask & other.mask
        return (self.value & common) == (other.value & common)

    def __str__(self):
        digits = max(1, (self.width + 3) // 4)
        return f"0x{self.value:0{digits}x}/0x{self.mask:0{digits}x}"

    @classmethod
    def parse(cls, text: str, width: int) -> "MatchKey":
        text = text.strip()
        if text == "*":
            return cls.wildcard(width)
        if "/" in text:
            value, mask = text.split("/", 1)
            return cls(int(value, 0), int(mask, 0), width)
        return cls.exact(int(text, 0), width)


@dataclass
class ForwardingOutcome:
    emitted: list = field(default_factory=list)          # [(port, bytes)]
    dropped: bool = False
    reports: list = field(default_factory=list)          # [Report]
    tables_written: list = field(default_factory=list)   # [(stb index, op, key)]
    queued: list = field(default_factory=list)           # ports the packet was queued on
    learned: list = field(default_factory=list)          # [(table id, entry id)]
    drop_reason: Optional[str] = None


class ReportTemplate(IntEnum):
    LATENCY_PROBE = 0xFFFD
    MISS = 0xFFFE
    DIAG = 0xFFFF


class DiagCode(IntEnum):
    MALFORMED = 1
    STAGE_LIMIT = 2
    UNALLOCATED = 3
    TIMER_PACKET_FIELD = 4
    TABLE_FULL = 5
    QUEUE_OVERFLOW = 6
    READ_ONLY_TABLE = 7
    LEARN_REFUSED = 8


@dataclass(frozen=True)
class Report:
    """A report packet addressed to the controller logical port."""
    device_id: str
    template: int
    ts: int
    values: tuple = ()
    payload: bytes = b""

    @property
    def probe_id(self) -> int:
        return self.template if self.template < ReportTemplate.LATENCY_PROBE else 0


# Latency probe packet layout (dedicated encapsulation).
PROBE_ETHERTYPE = 0x88B5
PROBE_MARKER = 0xD9B0
PROBE_PACKET_LEN = 64
PROBE_ETHERTYPE_REF = FieldRef(Space.PACKET, 96, 16)
PROBE_MARKER_REF = FieldRef(Space.PACKET, 112, 16)
PROBE_TS_REF = FieldRef(Space.PACKET, 128, 64)
PROBE_ID_REF = FieldRef(Space.PACKET, 192, 16)
PROBE_SEQ_REF = FieldRef(Space.PACKET, 208, 32)


def build_probe_packet(ts: int, probe_id: int, seq: int) -> bytes:
    buf = bytearray(PROBE_PACKET_LEN)
    write_bits(buf, PROBE_ETHERTYPE_REF.offset_bits, 16, PROBE_ETHERTYPE)
    write_bits(buf, PROBE_MARKER_REF.offset_bits, 16, PROBE_MARKER)
    write_bits(buf, PROBE_TS_REF.offset_bits, 64, ts & (2**64 - 1))
    write_bits(buf, PROBE_ID_REF.offset_bits, 16, probe_id & 0xFFFF)
    write_bits(buf, PROBE_SEQ_REF.offset_bits, 32, seq & 0xFFFFFFFF)
    return bytes(buf)


def is_probe_packet(data: bytes) -> bool:
    return (len(data) >= PROBE_PACKET_LEN
            and read_bits(data, PROBE_ETHERTYPE_REF.offset_bits, 16) == PROBE_ETHERTYPE
            and read_bits(data, PROBE_MARKER_REF.offset_bits, 16) == PROBE_MARKER)
