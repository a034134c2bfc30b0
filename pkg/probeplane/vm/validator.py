"""
Static checks for action blocks. A block that passes `validate` terminates
on every input, touches only the resources it declares and, in passive
mode, never writes packet bytes. The returned CostProfile is exact.
"""
from probeplane.dataplane.packet import CONTROLLER_PORT, FieldRef, ReportTemplate, Space
from probeplane.errors import (
    BackwardBranch,
    BadOperand,
    BlockTooLong,
    PacketWriteInPassiveMode,
    UndeclaredResource,
)
from probeplane.resources.types import Handle
from probeplane.settings import SETTINGS, Settings
from probeplane.vm.cost import CostProfile
from probeplane.vm.isa import (
    BRANCH_OPS,
    HANDLE_CLASS,
    LAYOUTS,
    MEM_OPS,
    ActionBlock,
    Kind,
    Opcode,
    referenced_handles,
)

MAX_REFS = 8
PACKET_OPS = frozenset({Opcode.OUTPUT, Opcode.DROP, Opcode.GOTO_TABLE, Opcode.METER_CHECK})


def _space_extent(space: Space, settings: Settings) -> int:
    if space == Space.PACKET:
        return settings.mtu * 8
    if space == Space.METADATA:
        return settings.metadata_bytes * 8
    return settings.max_params * 8


def _check_operand(kind: Kind, value, index: int, opcode: Opcode, settings: Settings):
    def fail(what):
        raise BadOperand(f"{opcode.name}: {what}", index)

    def check_ref(ref):
        if not isinstance(ref, FieldRef):
            fail(f"expected field reference, got {value!r}")
        if ref.end_bits > _space_extent(ref.space, settings):
            fail(f"{ref} extends past the end of its space")

    if kind is Kind.REF:
        check_ref(value)
    elif kind is Kind.OPTREF:
        if value is not None:
            check_ref(value)
    elif kind is Kind.VAL:
        if isinstance(value, FieldRef):
            check_ref(value)
        elif not isinstance(value, int) or isinstance(value, bool):
            fail(f"expected field or immediate, got {value!r}")
    elif kind is Kind.REFS:
        if not isinstance(value, tuple) or len(value) > MAX_REFS:
            fail(f"expected up to {MAX_REFS} field references")
        for ref in value:
            check_ref(ref)
    elif kind is Kind.HANDLE:
        if not isinstance(value, Handle):
            fail(f"expected resource handle, got {value!r}")
        if value.cls != HANDLE_CLASS[opcode]:
            fail(f"handle {value} has the wrong resource class")
    elif kind in (Kind.NUM, Kind.OFFSET):
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            fail(f"expected non-negative integer, got {value!r}")


def validate(block: ActionBlock, *, passive: bool = True, settings: Settings = SETTINGS) -> CostProfile:
    n = len(block.instructions)
    if n > settings.max_block_len:
        raise BlockTooLong(f"{n} instructions, limit {settings.max_block_len}")

    mem = 0
    gen = 0
    needs_packet = False
    for index, ins in enumerate(block.instructions):
        layout = LAYOUTS[ins.opcode]
        if len(ins.operands) != len(layout):
            raise BadOperand(f"{ins.opcode.name} takes {len(layout)} operands", index)
        for kind, value in zip(layout, ins.operands):
            if kind is Kind.OFFSET and isinstance(value, int) and value < 1:
                raise BackwardBranch(f"branch offset {value}", index)
            _check_operand(kind, value, index, ins.opcode, settings)

        if ins.opcode in BRANCH_OPS and index + ins.operands[2] > n:
            raise BadOperand(f"branch target {index + ins.operands[2]} past block end", index)

        for ref in ins.written_refs():
            if ref.space == Space.PARAMS:
                raise BadOperand(f"{ref} is read-only", index)
            if ref.space == Space.PACKET and passive:
                raise PacketWriteInPassiveMode(str(ref), index)

        handle = ins.handle
        if handle is not None and handle not in block.declared_resources:
            raise UndeclaredResource(str(handle), index)

        if ins.opcode == Opcode.GEN_PKT:
            template, port = ins.operands[0], ins.operands[1]
            to_wire = port != CONTROLLER_PORT
            if to_wire != (template == ReportTemplate.LATENCY_PROBE):
                raise BadOperand("only latency probe packets leave on a physical port", index)
            gen += 1
        if ins.opcode in MEM_OPS:
            mem += 1
        if ins.opcode in PACKET_OPS or any(r.space == Space.PACKET for _, r in ins.refs()):
            needs_packet = True

    unused = block.declared_resources - referenced_handles(block.instructions)
    if unused:
        raise BadOperand(f"declared but unused: {', '.join(sorted(map(str, unused)))}")

    return CostProfile(instr_count=n, mem_accesses=mem, gen_pkt_count_max=gen, needs_packet=needs_packet)
