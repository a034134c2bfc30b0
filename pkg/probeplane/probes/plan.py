"""
Install plans: ordered, invertible device mutations.

Every mutation knows how to apply itself to a Device and how to build its
exact inverse. Mutations that destroy state (delete, release, cancel)
capture what they destroyed when applied, so their inverse restores it
bit-for-bit.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from probeplane.dataplane.actions import Holder
from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import MatchKey
from probeplane.dataplane.tables import FlowEntry
from probeplane.errors import CommitFailed, ProbePlaneError
from probeplane.resources.types import Handle, TimerMode
from probeplane.vm.assembler import disassemble
from probeplane.vm.cost import ZERO_COST, CostProfile
from probeplane.vm.isa import ActionBlock

logger = logging.getLogger(__name__)


class Mutation:
    op = "mutation"

    def apply(self, device: Device) -> Any:
        raise NotImplementedError

    def inverse(self) -> "Mutation":
        raise NotImplementedError

    def describe(self) -> str:
        return self.op

    def undo_text(self) -> str:
        return self.inverse().describe()

    def __str__(self):
        return self.describe()


@dataclass
class AllocResource(Mutation):
    handle: Handle
    params: Tuple[int, ...] = ()
    cell: Any = None
    op = "alloc"

    def apply(self, device):
        device.alloc(self.handle.cls, self.params, index=self.handle.index)
        if self.cell is not None:
            device.pool.put(self.handle, copy.deepcopy(self.cell))
        return self.handle

    def inverse(self):
        return ReleaseResource(self.handle)

    def describe(self):
        return f"alloc {self.handle}"


@dataclass
class ReleaseResource(Mutation):
    handle: Handle
    saved: Any = None
    op = "release"

    def apply(self, device):
        self.saved = copy.deepcopy(device.pool.get(self.handle))
        device.release(self.handle)

    def inverse(self):
        return AllocResource(self.handle, (), self.saved)

    def describe(self):
        return f"release {self.handle}"

    def undo_text(self):
        return f"restore {self.handle}"


@dataclass
class LoadAction(Mutation):
    slot: int
    ref: int
    block: ActionBlock
    op = "load"

    def apply(self, device):
        return device.load_action(self.block, slot=self.slot, ref=self.ref)

    def inverse(self):
        return DeleteAction(self.slot)

    def describe(self):
        return f"load slot {self.slot} ref {self.ref} [{'; '.join(disassemble(self.block).splitlines())}]"


@dataclass
class DeleteAction(Mutation):
    slot: int
    saved: Optional[Tuple[int, ActionBlock]] = None
    op = "delete"

    def apply(self, device):
        ref = device.block_ref(self.slot)
        block = device.delete_action(self.slot)
        self.saved = (ref, block)

    def inverse(self):
        ref, block = self.saved
        return LoadAction(self.slot, ref, block)

    def describe(self):
        return f"delete slot {self.slot}"

    def undo_text(self):
        return f"reload slot {self.slot}"


@dataclass
class SwitchPointer(Mutation):
    slot: int
    new_ref: int
    old_ref: int
    op = "switch"

    def apply(self, device):
        return device.switch_action_pointer(self.slot, self.new_ref)

    def inverse(self):
        return SwitchPointer(self.slot, self.old_ref, self.new_ref)

    def describe(self):
        return f"switch slot {self.slot} ref {self.old_ref} -> {self.new_ref}"


@dataclass
class SetPointer(Mutation):
    holder: Holder
    new_slot: Optional[int]
    old_slot: Optional[int]
    op = "set_pointer"

    def apply(self, device):
        return device.set_pointer(self.holder, self.new_slot)

    def inverse(self):
        return SetPointer(self.holder, self.old_slot, self.new_slot)

    def describe(self):
        return f"point {holder_str(self.holder)} at slot {self.new_slot}"


@dataclass
class InsertEntry(Mutation):
    table_id: int
    entry_id: int
    key: MatchKey
    priority: int
    slot: int
    params: bytes = b""
    op = "insert_entry"

    def apply(self, device):
        return device.insert_entry(self.table_id, self.key, self.priority, self.slot,
                                   self.params, entry_id=self.entry_id)

    def inverse(self):
        return DeleteEntry(self.table_id, self.entry_id)

    def describe(self):
        return f"insert entry {self.table_id}/{self.entry_id} {self.key} @ {self.priority} -> slot {self.slot}"


@dataclass
class DeleteEntry(Mutation):
    table_id: int
    entry_id: int
    saved: Optional[FlowEntry] = None
    op = "delete_entry"

    def apply(self, device):
        self.saved = device.delete_entry(self.table_id, self.entry_id)

    def inverse(self):
        e = self.saved
        return InsertEntry(self.table_id, e.entry_id, e.key, e.priority, e.action_slot, e.params)

    def describe(self):
        return f"delete entry {self.table_id}/{self.entry_id}"

    def undo_text(self):
        return f"reinsert entry {self.table_id}/{self.entry_id}"


@dataclass
class ArmTimer(Mutation):
    timer_id: int
    interval: int
    mode: TimerMode
    slot: int
    saved: Any = None
    op = "arm_timer"

    def apply(self, device):
        if self.saved is not None:
            return device.restore_timer(copy.deepcopy(self.saved))
        return device.set_timer(self.interval, self.mode, self.slot, index=self.timer_id)

    def inverse(self):
        return CancelTimer(self.timer_id)

    def describe(self):
        return f"arm timer:{self.timer_id} every {self.interval}ns -> slot {self.slot}"


@dataclass
class CancelTimer(Mutation):
    timer_id: int
    saved: Any = None
    op = "cancel_timer"

    def apply(self, device):
        self.saved = copy.deepcopy(device.cancel_timer(self.timer_id))

    def inverse(self):
        t = self.saved
        return ArmTimer(t.timer_id, t.interval, t.mode, t.linked_slot, saved=t)

    def describe(self):
        return f"cancel timer:{self.timer_id}"

    def undo_text(self):
        return f"re-arm timer:{self.timer_id}"


def holder_str(holder: Holder) -> str:
    return f"{holder[0]}({', '.join(str(h) for h in holder[1:])})"


@dataclass
class AttachState:
    """What the runtime changed at one holder, and what to put back."""
    holder: Holder
    mode: str  # "switch" | "pointer" | "created"
    base_slot: Optional[int]
    base_ref: Optional[int]
    base_block: Optional[ActionBlock]
    snippets: Dict[int, ActionBlock] = field(default_factory=dict)
    current_slot: Optional[int] = None


@dataclass
class InstallPlan:
    probe_id: int
    mutations: List[Mutation]
    spec: Any = None
    cost_delta: CostProfile = ZERO_COST
    overlaps: List[FlowEntry] = field(default_factory=list)
    handles: Dict[str, Handle] = field(default_factory=dict)
    timers: Dict[int, int] = field(default_factory=dict)
    targets: Dict[Holder, Optional[AttachState]] = field(default_factory=dict)

    def __len__(self):
        return len(self.mutations)

    def rollback(self) -> List[str]:
        """The undo steps, in the order a failed commit would run them."""
        return [m.undo_text() for m in reversed(self.mutations)]

    def describe(self) -> List[str]:
        return [m.describe() for m in self.mutations]


class InjectedFailure(ProbePlaneError):
    code = 403


def apply_plan(device: Device, plan: InstallPlan, fail_at_step: Optional[int] = None) -> None:
    """
    Apply every mutation in order. If step k fails (or k == fail_at_step),
    the inverses of steps 0..k-1 are applied in reverse and CommitFailed is
    raised; the device ends exactly as it started.
    """
    applied: List[Mutation] = []
    for step, mutation in enumerate(plan.mutations):
        try:
            if step == fail_at_step:
                raise InjectedFailure(f"forced failure before {mutation.describe()}")
            mutation.apply(device)
        except (ProbePlaneError, ValueError) as e:
            logger.warning("%s: plan step %d (%s) failed: %s; rolling back %d steps",
                           device.device_id, step, mutation.describe(), e, len(applied))
            for done in reversed(applied):
                done.inverse().apply(device)
            raise CommitFailed(step, e) from e
        applied.append(mutation)
