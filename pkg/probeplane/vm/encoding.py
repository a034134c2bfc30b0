"""
Canonical little-endian binary form of action blocks (LOAD_ACTION bodies,
static configuration files).

    block       u16 n_instr | u8 n_declared | n_declared * handle | instructions
    handle      u8 class | u32 index
    instruction u8 opcode | operands per LAYOUTS
    REF         u8 space | u16 offset_bits | u8 length_bits
    OPTREF      u8 present | REF if present
    VAL         u8 tag (0 immediate, 1 ref) | i64 immediate or REF
    HANDLE      handle
    OFFSET      u16
    NUM         u32
    REFS        u8 count | count * REF
"""
import struct
from typing import Tuple

from probeplane.dataplane.packet import FieldRef, Space
from probeplane.resources.types import Handle, ResourceClass
from probeplane.vm.isa import LAYOUTS, ActionBlock, Instruction, Kind, Opcode

_REF = struct.Struct("<BHB")
_HANDLE = struct.Struct("<BI")
_HEAD = struct.Struct("<HB")


def _pack_ref(ref: FieldRef) -> bytes:
    return _REF.pack(int(ref.space), ref.offset_bits, ref.length_bits)


def _pack_operand(kind: Kind, value) -> bytes:
    if kind is Kind.REF:
        return _pack_ref(value)
    if kind is Kind.OPTREF:
        return b"\x00" if value is None else b"\x01" + _pack_ref(value)
    if kind is Kind.VAL:
        if isinstance(value, FieldRef):
            return b"\x01" + _pack_ref(value)
        return b"\x00" + struct.pack("<q", value)
    if kind is Kind.HANDLE:
        return _HANDLE.pack(int(value.cls), value.index)
    if kind is Kind.OFFSET:
        return struct.pack("<H", value)
    if kind is Kind.NUM:
        return struct.pack("<I", value)
    if kind is Kind.REFS:
        return struct.pack("<B", len(value)) + b"".join(_pack_ref(r) for r in value)
    raise ValueError(kind)


def encode_block(block: ActionBlock) -> bytes:
    declared = sorted(block.declared_resources)
    out = [_HEAD.pack(len(block.instructions), len(declared))]
    out += [_HANDLE.pack(int(h.cls), h.index) for h in declared]
    for ins in block.instructions:
        out.append(struct.pack("<B", int(ins.opcode)))
        for kind, value in zip(LAYOUTS[ins.opcode], ins.operands):
            out.append(_pack_operand(kind, value))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, st: struct.Struct) -> tuple:
        if self.pos + st.size > len(self.data):
            raise ValueError("action block truncated")
        values = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return values

    def fmt(self, fmt: str):
        return self.take(struct.Struct(fmt))[0]

    def ref(self) -> FieldRef:
        space, offset, length = self.take(_REF)
        return FieldRef(Space(space), offset, length)

    def handle(self) -> Handle:
        cls, index = self.take(_HANDLE)
        return Handle(ResourceClass(cls), index)


def _read_operand(r: _Reader, kind: Kind):
    if kind is Kind.REF:
        return r.ref()
    if kind is Kind.OPTREF:
        return r.ref() if r.fmt("<B") else None
    if kind is Kind.VAL:
        return r.ref() if r.fmt("<B") else r.fmt("<q")
    if kind is Kind.HANDLE:
        return r.handle()
    if kind is Kind.OFFSET:
        return r.fmt("<H")
    if kind is Kind.NUM:
        return r.fmt("<I")
    if kind is Kind.REFS:
        return tuple(r.ref() for _ in range(r.fmt("<B")))
    raise ValueError(kind)


def decode_block_from(data: bytes, pos: int = 0) -> Tuple[ActionBlock, int]:
    """Decode one block starting at `pos`; returns (block, next position)."""
    r = _Reader(data, pos)
    n, n_declared = r.take(_HEAD)
    declared = [r.handle() for _ in range(n_declared)]
    instructions = []
    for _ in range(n):
        opcode = Opcode(r.fmt("<B"))
        instructions.append(Instruction(opcode, tuple(_read_operand(r, k) for k in LAYOUTS[opcode])))
    return ActionBlock(tuple(instructions), frozenset(declared)), r.pos


def decode_block(data: bytes) -> ActionBlock:
    block, end = decode_block_from(data)
    if end != len(data):
        raise ValueError(f"{len(data) - end} trailing bytes after action block")
    return block
