"""
Interpreter for validated action blocks.

Resource effects are staged against copies and written back only when the
block completes, so an aborted block leaves counters, registers, meters,
samplers and state tables exactly as they were. Metadata writes are undone
on abort as well.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional

from probeplane.dataplane.packet import (
    FieldRef,
    ReportTemplate,
    Report,
    Space,
    build_probe_packet,
    read_bits,
    write_bits,
)
from probeplane.errors import ExecutionError, PacketFieldOnTimerContext, UnallocatedResource
from probeplane.resources.pool import InsertResult, ResourcePool, StateTable
from probeplane.resources.types import CounterUnit, Handle
from probeplane.settings import SETTINGS
from probeplane.vm.isa import ActionBlock, Opcode

logger = logging.getLogger(__name__)

U64 = (1 << 64) - 1


class Disposition(IntEnum):
    NONE = 0
    OUTPUT = 1
    DROP = 2
    GOTO = 3
    HALT = 4


@dataclass
class ExecContext:
    packet: Optional[bytes] = None
    params: bytes = b""
    now: int = 0
    metadata: bytearray = field(default_factory=lambda: bytearray(SETTINGS.metadata_bytes))
    device_id: str = ""
    # permissive contexts accept packet writes; used only as a negative control
    permissive: bool = False

    @property
    def packet_present(self) -> bool:
        return self.packet is not None


@dataclass
class ExecResult:
    disposition: Disposition = Disposition.NONE
    port: Optional[int] = None
    table: Optional[int] = None
    reports: List[Report] = field(default_factory=list)
    emitted: List[tuple] = field(default_factory=list)       # marked probe packets (port, bytes)
    stb_writes: List[tuple] = field(default_factory=list)    # (stb index, op, key)
    entry_writes: List[tuple] = field(default_factory=list)  # (table id, key, width, slot)
    mem_accesses: int = 0
    steps: int = 0
    error: Optional[ExecutionError] = None

    @property
    def aborted(self) -> bool:
        return self.error is not None


class _StagedTable:
    """Pending inserts/deletes over a state table, replayed on commit."""

    def __init__(self, base: StateTable):
        self.base = base
        self.pending: Dict[int, Optional[tuple]] = {}
        self.ops: List[tuple] = []
        self.size = len(base.entries)
        self.dropped = 0

    def _get(self, key: int) -> Optional[tuple]:
        if key in self.pending:
            return self.pending[key]
        return self.base.entries.get(key)

    def insert(self, key: int, value: int, ts: int) -> InsertResult:
        if self._get(key) is None:
            if self.size >= self.base.capacity:
                self.dropped += 1
                return InsertResult.DROPPED
            self.size += 1
            result = InsertResult.NEW
        else:
            result = InsertResult.UPDATED
        self.pending[key] = (value & U64, ts)
        self.ops.append(("insert", key, value, ts))
        return result

    def delete(self, key: int) -> bool:
        if self._get(key) is None:
            return False
        self.pending[key] = None
        self.size -= 1
        self.ops.append(("delete", key))
        return True

    def lookup(self, key: int) -> Optional[int]:
        hit = self._get(key)
        return None if hit is None else hit[0]

    def apply(self) -> None:
        for op in self.ops:
            if op[0] == "insert":
                self.base.insert(op[1], op[2], op[3])
            else:
                self.base.delete(op[1])
        self.base.dropped += self.dropped


class _Staging:
    def __init__(self, pool: ResourcePool):
        self.pool = pool
        self.cells: Dict[Handle, object] = {}
        self.tables: Dict[Handle, _StagedTable] = {}

    def _check(self, handle: Handle) -> None:
        if not self.pool.is_live(handle):
            raise UnallocatedResource(str(handle))

    def cell(self, handle: Handle):
        if handle not in self.cells:
            self._check(handle)
            self.cells[handle] = dataclasses.replace(self.pool.get(handle))
        return self.cells[handle]

    def table(self, handle: Handle) -> _StagedTable:
        if handle not in self.tables:
            self._check(handle)
            self.tables[handle] = _StagedTable(self.pool.stb(handle))
        return self.tables[handle]

    def commit(self) -> None:
        for handle, cell in self.cells.items():
            self.pool.put(handle, cell)
        for table in self.tables.values():
            table.apply()


def _read(ctx: ExecContext, ref: FieldRef) -> int:
    if ref.space == Space.PACKET:
        if not ctx.packet_present:
            raise PacketFieldOnTimerContext(str(ref))
        return read_bits(ctx.packet, ref.offset_bits, ref.length_bits)
    if ref.space == Space.METADATA:
        return read_bits(ctx.metadata, ref.offset_bits, ref.length_bits)
    return read_bits(ctx.params, ref.offset_bits, ref.length_bits)


def _write(ctx: ExecContext, ref: FieldRef, value: int) -> None:
    if ref.space == Space.METADATA:
        write_bits(ctx.metadata, ref.offset_bits, ref.length_bits, value & ref.mask)
        return
    # the validator only lets packet writes through in permissive mode
    if not ctx.packet_present:
        raise PacketFieldOnTimerContext(str(ref))
    buf = bytearray(ctx.packet)
    if ref.end_bits > len(buf) * 8:
        buf.extend(bytes((ref.end_bits + 7) // 8 - len(buf)))
    write_bits(buf, ref.offset_bits, ref.length_bits, value & ref.mask)
    ctx.packet = bytes(buf)


def _value(ctx: ExecContext, operand) -> int:
    return _read(ctx, operand) if isinstance(operand, FieldRef) else operand


def _key(ctx: ExecContext, refs) -> int:
    key = 0
    for ref in refs:
        key = (key << ref.length_bits) | _read(ctx, ref)
    return key


def _alu(opcode: Opcode, cur: int, v: int, mask: int) -> int:
    if opcode == Opcode.ADD:
        return (cur + v) & mask
    if opcode == Opcode.SUB:
        return (cur - v) & mask
    if opcode == Opcode.AND:
        return cur & v & mask
    if opcode == Opcode.OR:
        return (cur | v) & mask
    shift = min(max(v, 0), 128)
    if opcode == Opcode.SHL:
        return (cur << shift) & mask
    return cur >> shift


_BRANCH = {
    Opcode.BRANCH_EQ: lambda a, b: a == b,
    Opcode.BRANCH_NE: lambda a, b: a != b,
    Opcode.BRANCH_GE: lambda a, b: a >= b,
    Opcode.BRANCH_LT: lambda a, b: a < b,
}


def execute(block: ActionBlock, ctx: ExecContext, pool: ResourcePool) -> ExecResult:
    """Run `block` once against `ctx`; resource effects commit only on success."""
    staged = _Staging(pool)
    saved_meta = bytes(ctx.metadata)
    saved_packet = ctx.packet
    res = ExecResult()
    instructions = block.instructions
    n = len(instructions)
    pc = 0
    try:
        while pc < n:
            ins = instructions[pc]
            op = ins.opcode
            a = ins.operands
            res.steps += 1
            nxt = pc + 1

            if op == Opcode.SET_FIELD:
                _write(ctx, a[0], a[1])
            elif op == Opcode.MOVE:
                _write(ctx, a[0], _read(ctx, a[1]))
            elif Opcode.ADD <= op <= Opcode.SHR:
                _write(ctx, a[0], _alu(op, _read(ctx, a[0]), _value(ctx, a[1]), a[0].mask))
            elif op in _BRANCH:
                if _BRANCH[op](_value(ctx, a[0]), _value(ctx, a[1])):
                    nxt = pc + a[2]
            elif op == Opcode.CNTR_ADD:
                res.mem_accesses += 1
                cell = staged.cell(a[0])
                delta = _value(ctx, a[1])
                if cell.unit == CounterUnit.BYTES:
                    delta *= len(ctx.packet) if ctx.packet_present else 0
                post = cell.add(delta)
                if a[2] is not None:
                    _write(ctx, a[2], post)
            elif op == Opcode.CNTR_SET:
                res.mem_accesses += 1
                staged.cell(a[0]).value = _value(ctx, a[1]) & U64
            elif op == Opcode.METER_CHECK:
                res.mem_accesses += 1
                size = len(ctx.packet) if ctx.packet_present else 0
                _write(ctx, a[1], int(staged.cell(a[0]).check(size, ctx.now)))
            elif op == Opcode.REG_READ:
                res.mem_accesses += 1
                _write(ctx, a[1], staged.cell(a[0]).value)
            elif op == Opcode.REG_WRITE:
                res.mem_accesses += 1
                staged.cell(a[0]).value = _value(ctx, a[1]) & U64
            elif op == Opcode.STB_INSERT:
                res.mem_accesses += 1
                key = _key(ctx, a[1])
                result = staged.table(a[0]).insert(key, _value(ctx, a[2]), ctx.now)
                if result != InsertResult.DROPPED:
                    res.stb_writes.append((a[0].index, "insert", key))
                if a[3] is not None:
                    _write(ctx, a[3], 1 if result == InsertResult.NEW else 0)
            elif op == Opcode.STB_DELETE:
                res.mem_accesses += 1
                key = _key(ctx, a[1])
                hit = staged.table(a[0]).delete(key)
                if hit:
                    res.stb_writes.append((a[0].index, "delete", key))
                if a[2] is not None:
                    _write(ctx, a[2], int(hit))
            elif op == Opcode.STB_LOOKUP:
                res.mem_accesses += 1
                value = staged.table(a[0]).lookup(_key(ctx, a[1]))
                _write(ctx, a[2], int(value is not None))
                if a[3] is not None:
                    _write(ctx, a[3], value or 0)
            elif op == Opcode.TIMESTAMP:
                _write(ctx, a[0], ctx.now)
            elif op == Opcode.GEN_PKT:
                values = tuple(_read(ctx, r) for r in a[2])
                if a[0] == ReportTemplate.LATENCY_PROBE:
                    ts, probe_id, seq = (values + (0, 0, 0))[:3]
                    res.emitted.append((a[1], build_probe_packet(ts, probe_id, seq)))
                else:
                    payload = bytes(ctx.packet) if not values and ctx.packet_present else b""
                    res.reports.append(Report(ctx.device_id, a[0], ctx.now, values, payload))
            elif op == Opcode.SAMPLE_TEST:
                _write(ctx, a[1], int(staged.cell(a[0]).test()))
            elif op == Opcode.OUTPUT:
                res.disposition = Disposition.OUTPUT
                res.port = _value(ctx, a[0])
                break
            elif op == Opcode.GOTO_TABLE:
                res.disposition = Disposition.GOTO
                res.table = a[0]
                break
            elif op == Opcode.DROP:
                res.disposition = Disposition.DROP
                break
            elif op == Opcode.HALT:
                res.disposition = Disposition.HALT
                break
            elif op == Opcode.LEARN:
                # applied by the device after commit, only on tables open to actions
                width = sum(r.length_bits for r in a[1])
                res.entry_writes.append((a[0], _key(ctx, a[1]), width, a[2]))
            # NOP falls through
            pc = nxt
    except ExecutionError as e:
        ctx.metadata[:] = saved_meta
        ctx.packet = saved_packet
        logger.debug("action aborted on %s: %s", ctx.device_id, e)
        return ExecResult(error=e, steps=res.steps)

    staged.commit()
    return res
