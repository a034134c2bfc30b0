"""
Text form of action blocks, used by pipeline configuration files, the CLI
and tests.

    # comment
    CNTR_ADD counter:0, 1, meta[1536:64]
    BRANCH_NE meta[1536:64], param[0:64], +2
    GEN_PKT 7, ctrl, [pkt[0:32], meta[1536:64]]
    OUTPUT 2

Instructions are separated by newlines or ';'. Operands are separated by
commas. `ctrl` names the controller port, `next` the next-table edge,
`-` an absent optional reference.
"""
from typing import List

from probeplane.dataplane.packet import CONTROLLER_PORT, FieldRef
from probeplane.errors import AssemblyError
from probeplane.resources.types import Handle
from probeplane.vm.isa import LAYOUTS, NEXT_TABLE, ActionBlock, Instruction, Kind, Opcode

_WORDS = {"ctrl": CONTROLLER_PORT, "next": NEXT_TABLE}


def _split_operands(text: str) -> List[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or parts:
        parts.append(tail)
    return parts


def _int(text: str) -> int:
    text = text.strip()
    if text.lower() in _WORDS:
        return _WORDS[text.lower()]
    return int(text, 0)


def _operand(kind: Kind, text: str):
    if kind in (Kind.REF, Kind.OPTREF):
        if kind is Kind.OPTREF and text == "-":
            return None
        return FieldRef.parse(text)
    if kind is Kind.VAL:
        return FieldRef.parse(text) if "[" in text else _int(text)
    if kind is Kind.HANDLE:
        return Handle.parse(text)
    if kind is Kind.OFFSET:
        return int(text.lstrip("+"), 0) if text.startswith("+") else int(text, 0)
    if kind is Kind.NUM:
        return _int(text)
    if kind is Kind.REFS:
        if not (text.startswith("[") and text.endswith("]")):
            raise ValueError(f"expected [ref, ...], got {text!r}")
        inner = text[1:-1].strip()
        return tuple(FieldRef.parse(p) for p in _split_operands(inner)) if inner else ()
    raise ValueError(kind)


def assemble_instruction(line: str) -> Instruction:
    mnemonic, _, rest = line.strip().partition(" ")
    try:
        opcode = Opcode[mnemonic.upper()]
    except KeyError:
        raise AssemblyError(f"unknown mnemonic {mnemonic!r}") from None
    layout = LAYOUTS[opcode]
    texts = _split_operands(rest)
    if len(texts) != len(layout):
        raise AssemblyError(f"{opcode.name} takes {len(layout)} operands, got {len(texts)}")
    try:
        return Instruction(opcode, tuple(_operand(k, t) for k, t in zip(layout, texts)))
    except ValueError as e:
        raise AssemblyError(f"{opcode.name}: {e}") from None


def assemble(text: str) -> ActionBlock:
    instructions = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        for stmt in line.split(";"):
            if not stmt.strip():
                continue
            try:
                instructions.append(assemble_instruction(stmt))
            except AssemblyError as e:
                raise AssemblyError(f"line {lineno}: {e.detail}") from None
    return ActionBlock.of(instructions)


def _format(kind: Kind, value, opcode: Opcode) -> str:
    if value is None:
        return "-"
    if kind is Kind.REFS:
        return "[" + ", ".join(str(r) for r in value) + "]"
    if kind is Kind.OFFSET:
        return f"+{value}"
    if isinstance(value, int) and not isinstance(value, Handle):
        if value == CONTROLLER_PORT and opcode in (Opcode.OUTPUT, Opcode.GEN_PKT):
            return "ctrl"
        if value == NEXT_TABLE and opcode == Opcode.GOTO_TABLE:
            return "next"
        return str(value)
    return str(value)


def disassemble_instruction(ins: Instruction) -> str:
    ops = ", ".join(_format(k, v, ins.opcode) for k, v in zip(LAYOUTS[ins.opcode], ins.operands))
    return f"{ins.opcode.name} {ops}".rstrip()


def disassemble(block: ActionBlock) -> str:
    return "\n".join(disassemble_instruction(i) for i in block.instructions)
