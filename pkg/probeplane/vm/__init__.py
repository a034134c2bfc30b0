from .assembler import assemble, disassemble
from .cost import CostProfile, DeviceCaps, estimate_throughput
from .encoding import decode_block, encode_block
from .executor import Disposition, ExecContext, ExecResult, execute
from .isa import NEXT_TABLE, ActionBlock, Instruction, Opcode, ins
from .validator import validate
