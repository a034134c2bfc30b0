"""
The primitive instruction set action blocks are made of.

Each opcode has a fixed operand layout (see LAYOUTS). Operand kinds:

    REF     FieldRef written (or read) in place
    VAL     FieldRef or signed immediate, read only
    HANDLE  pool resource handle (class fixed per opcode)
    OFFSET  forward branch distance, target = pc + offset
    NUM     unsigned immediate (port, table id, template id)
    REFS    ordered tuple of FieldRefs (state keys, report fields)
    OPTREF  FieldRef or None

LEARN asks the device to add an exact-match entry once the block commits;
tables not created writable by actions refuse it.
"""
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import FrozenSet, Iterator, Tuple

from probeplane.dataplane.packet import FieldRef
from probeplane.resources.types import Handle, ResourceClass

NEXT_TABLE = 0xFFFF


class Opcode(IntEnum):
    SET_FIELD = 1
    MOVE = 2
    ADD = 3
    SUB = 4
    AND = 5
    OR = 6
    SHL = 7
    SHR = 8
    BRANCH_EQ = 9
    BRANCH_NE = 10
    BRANCH_GE = 11
    BRANCH_LT = 12
    CNTR_ADD = 13
    CNTR_SET = 14
    METER_CHECK = 15
    REG_READ = 16
    REG_WRITE = 17
    STB_INSERT = 18
    STB_DELETE = 19
    STB_LOOKUP = 20
    TIMESTAMP = 21
    GEN_PKT = 22
    SAMPLE_TEST = 23
    OUTPUT = 24
    GOTO_TABLE = 25
    DROP = 26
    NOP = 27
    HALT = 28
    LEARN = 29


class Kind(Enum):
    REF = "ref"
    VAL = "val"
    HANDLE = "handle"
    OFFSET = "offset"
    NUM = "num"
    REFS = "refs"
    OPTREF = "optref"


K = Kind
ALU_OPS = (Opcode.ADD, Opcode.SUB, Opcode.AND, Opcode.OR, Opcode.SHL, Opcode.SHR)
BRANCH_OPS = (Opcode.BRANCH_EQ, Opcode.BRANCH_NE, Opcode.BRANCH_GE, Opcode.BRANCH_LT)

LAYOUTS = {
    Opcode.SET_FIELD: (K.REF, K.NUM),
    Opcode.MOVE: (K.REF, K.REF),
    **{op: (K.REF, K.VAL) for op in ALU_OPS},
    **{op: (K.VAL, K.VAL, K.OFFSET) for op in BRANCH_OPS},
    Opcode.CNTR_ADD: (K.HANDLE, K.VAL, K.OPTREF),
    Opcode.CNTR_SET: (K.HANDLE, K.VAL),
    Opcode.METER_CHECK: (K.HANDLE, K.REF),
    Opcode.REG_READ: (K.HANDLE, K.REF),
    Opcode.REG_WRITE: (K.HANDLE, K.VAL),
    Opcode.STB_INSERT: (K.HANDLE, K.REFS, K.VAL, K.OPTREF),
    Opcode.STB_DELETE: (K.HANDLE, K.REFS, K.OPTREF),
    Opcode.STB_LOOKUP: (K.HANDLE, K.REFS, K.REF, K.OPTREF),
    Opcode.TIMESTAMP: (K.REF,),
    Opcode.GEN_PKT: (K.NUM, K.NUM, K.REFS),
    Opcode.SAMPLE_TEST: (K.HANDLE, K.REF),
    Opcode.OUTPUT: (K.VAL,),
    Opcode.GOTO_TABLE: (K.NUM,),
    Opcode.DROP: (),
    Opcode.NOP: (),
    Opcode.HALT: (),
    # table id, key fields (concatenated, exact match), action slot of the new entry
    Opcode.LEARN: (K.NUM, K.REFS, K.NUM),
}

HANDLE_CLASS = {
    Opcode.CNTR_ADD: ResourceClass.COUNTER,
    Opcode.CNTR_SET: ResourceClass.COUNTER,
    Opcode.METER_CHECK: ResourceClass.METER,
    Opcode.REG_READ: ResourceClass.REGISTER,
    Opcode.REG_WRITE: ResourceClass.REGISTER,
    Opcode.STB_INSERT: ResourceClass.STATE_TABLE,
    Opcode.STB_DELETE: ResourceClass.STATE_TABLE,
    Opcode.STB_LOOKUP: ResourceClass.STATE_TABLE,
    Opcode.SAMPLE_TEST: ResourceClass.SAMPLER,
}

MEM_OPS = frozenset({
    Opcode.CNTR_ADD, Opcode.CNTR_SET, Opcode.METER_CHECK, Opcode.REG_READ,
    Opcode.REG_WRITE, Opcode.STB_INSERT, Opcode.STB_DELETE, Opcode.STB_LOOKUP,
})
TERMINALS = frozenset({Opcode.OUTPUT, Opcode.DROP, Opcode.GOTO_TABLE, Opcode.HALT})

# operand positions that are written by the instruction
WRITTEN = {
    Opcode.SET_FIELD: (0,),
    Opcode.MOVE: (0,),
    **{op: (0,) for op in ALU_OPS},
    Opcode.CNTR_ADD: (2,),
    Opcode.METER_CHECK: (1,),
    Opcode.REG_READ: (1,),
    Opcode.STB_INSERT: (3,),
    Opcode.STB_DELETE: (2,),
    Opcode.STB_LOOKUP: (2, 3),
    Opcode.TIMESTAMP: (0,),
    Opcode.SAMPLE_TEST: (1,),
}


def _freeze(value):
    if isinstance(value, list):
        return tuple(value)
    return value


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    operands: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "opcode", Opcode(self.opcode))
        object.__setattr__(self, "operands", tuple(_freeze(v) for v in self.operands))

    @property
    def handle(self):
        for kind, value in zip(LAYOUTS[self.opcode], self.operands):
            if kind is K.HANDLE:
                return value
        return None

    def refs(self) -> Iterator[Tuple[int, FieldRef]]:
        """(operand position, FieldRef) for every field this instruction touches."""
        for pos, (kind, value) in enumerate(zip(LAYOUTS[self.opcode], self.operands)):
            if kind is K.REFS:
                for ref in value:
                    yield pos, ref
            elif isinstance(value, FieldRef):
                yield pos, value

    def written_refs(self) -> Iterator[FieldRef]:
        for pos in WRITTEN.get(self.opcode, ()):
            value = self.operands[pos] if pos < len(self.operands) else None
            if isinstance(value, FieldRef):
                yield value

    def with_offset(self, offset: int) -> "Instruction":
        ops = list(self.operands)
        ops[2] = offset
        return Instruction(self.opcode, tuple(ops))


@dataclass(frozen=True)
class ActionBlock:
    instructions: Tuple[Instruction, ...]
    declared_resources: FrozenSet[Handle] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "instructions", tuple(self.instructions))
        object.__setattr__(self, "declared_resources", frozenset(self.declared_resources))

    @classmethod
    def of(cls, instructions) -> "ActionBlock":
        """Build a block whose declared resources are exactly those referenced."""
        instructions = tuple(instructions)
        return cls(instructions, referenced_handles(instructions))

    def __len__(self):
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)


def referenced_handles(instructions) -> FrozenSet[Handle]:
    return frozenset(ins.handle for ins in instructions if ins.handle is not None)


def ins(opcode: Opcode, *operands) -> Instruction:
    return Instruction(opcode, operands)
