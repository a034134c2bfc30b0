"""
Action-ID indirection. Flow entries, table misses, port/queue hooks and
timers hold a *slot*; a slot points at a loaded block by *ref*. Switching a
slot to another ref is a single dict store, so every packet sees either the
old block or the new one.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

from probeplane.errors import BlockNotLoaded, DanglingActionPtr, NoSuchSlot, SlotInUse
from probeplane.vm.assembler import disassemble
from probeplane.vm.cost import CostProfile
from probeplane.vm.isa import ActionBlock

logger = logging.getLogger(__name__)

# ("entry", table_id, entry_id) | ("miss", table_id) | ("ingress", port) |
# ("egress", port) | ("enqueue", port) | ("dequeue", port) | ("timer", timer_id)
Holder = Tuple


@dataclass(frozen=True)
class LoadedBlock:
    ref: int
    block: ActionBlock
    cost: CostProfile


def _lowest_free(used, n: int, exclude: Sequence[int]) -> List[int]:
    out, i = [], 0
    while len(out) < n:
        if i not in used and i not in exclude:
            out.append(i)
        i += 1
    return out


class ActionStore:
    def __init__(self):
        self.blocks: Dict[int, LoadedBlock] = {}
        self.slots: Dict[int, int] = {}
        self.holders: Dict[int, Set[Holder]] = {}

    def peek_slots(self, n: int = 1, exclude: Sequence[int] = ()) -> List[int]:
        return _lowest_free(self.slots, n, exclude)

    def peek_refs(self, n: int = 1, exclude: Sequence[int] = ()) -> List[int]:
        return _lowest_free(self.blocks, n, exclude)

    def load(self, block: ActionBlock, cost: CostProfile,
             slot: Optional[int] = None, ref: Optional[int] = None) -> int:
        """Store `block` under a new ref and a new slot pointing at it."""
        slot = self.peek_slots()[0] if slot is None else slot
        ref = self.peek_refs()[0] if ref is None else ref
        if slot in self.slots:
            raise SlotInUse(f"slot {slot} already loaded")
        if ref in self.blocks:
            raise SlotInUse(f"block ref {ref} already loaded")
        self.blocks[ref] = LoadedBlock(ref, block, cost)
        self.slots[slot] = ref
        self.holders[slot] = set()
        logger.debug("loaded block ref %d (%d instructions) at slot %d", ref, len(block), slot)
        return slot

    def delete(self, slot: int) -> LoadedBlock:
        if slot not in self.slots:
            raise NoSuchSlot(f"slot {slot}")
        if self.holders[slot]:
            raise SlotInUse(f"slot {slot} has refcount {len(self.holders[slot])}")
        ref = self.slots.pop(slot)
        del self.holders[slot]
        loaded = self.blocks[ref]
        if ref not in self.slots.values():
            del self.blocks[ref]
        return loaded

    def switch(self, slot: int, new_ref: int) -> int:
        if slot not in self.slots:
            raise NoSuchSlot(f"slot {slot}")
        if new_ref not in self.blocks:
            raise BlockNotLoaded(f"block ref {new_ref}")
        previous = self.slots[slot]
        self.slots[slot] = new_ref
        return previous

    def ref_of(self, slot: int) -> int:
        try:
            return self.slots[slot]
        except KeyError:
            raise NoSuchSlot(f"slot {slot}") from None

    def resolve(self, slot: int) -> LoadedBlock:
        ref = self.slots.get(slot)
        if ref is None or ref not in self.blocks:
            raise DanglingActionPtr(f"slot {slot}")
        return self.blocks[ref]

    def refcount(self, slot: int) -> int:
        if slot not in self.slots:
            raise NoSuchSlot(f"slot {slot}")
        return len(self.holders[slot])

    def attach(self, slot: int, holder: Holder) -> None:
        if slot not in self.slots:
            raise DanglingActionPtr(f"slot {slot} not loaded")
        self.holders[slot].add(holder)

    def detach(self, slot: int, holder: Holder) -> None:
        if slot in self.holders:
            self.holders[slot].discard(holder)

    def clear(self) -> None:
        self.blocks.clear()
        self.slots.clear()
        self.holders.clear()

    def snapshot(self) -> dict:
        return {
            "slots": {str(s): {"ref": self.slots[s], "refcount": len(self.holders[s])}
                      for s in sorted(self.slots)},
            "blocks": {str(r): disassemble(self.blocks[r].block) for r in sorted(self.blocks)},
        }
