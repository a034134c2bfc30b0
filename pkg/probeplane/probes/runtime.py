"""
Device-side probe manager.

A probe is installed by building x' = the current action at its attach
point with the probe snippet spliced in, loading x' under a fresh slot and
then switching the holder over in a single step. If the original slot is
held only by this attach point the slot itself is switched to the new
block ref; otherwise the holder is repointed at the new slot. Several
probes may share one attach point: x' is always rebuilt from the original
action plus every live snippet, in probe id order.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from probeplane.dataplane.actions import Holder
from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import MatchKey, Report
from probeplane.dataplane.tables import FlowEntry
from probeplane.errors import (
    AdmissionRejected,
    HasSubscribers,
    InvalidPosition,
    NoCoveringBehavior,
    NoSuchProbe,
    ProbeSpecError,
)
from probeplane.probes import catalog
from probeplane.probes.plan import (
    AllocResource,
    ArmTimer,
    AttachState,
    CancelTimer,
    DeleteAction,
    DeleteEntry,
    InsertEntry,
    InstallPlan,
    LoadAction,
    ReleaseResource,
    SetPointer,
    SwitchPointer,
    apply_plan,
    holder_str,
)
from probeplane.probes.spec import AttachKind, ProbeKind, ProbeSpec
from probeplane.resources.types import Handle, ResourceClass
from probeplane.settings import SETTINGS, Settings
from probeplane.vm.cost import ZERO_COST, CostProfile, DeviceCaps, aggregate, estimate_throughput
from probeplane.vm.isa import BRANCH_OPS, TERMINALS, ActionBlock
from probeplane.vm.validator import validate

logger = logging.getLogger(__name__)


# ---------------- splicing -----------------

def splice_point(block: ActionBlock) -> int:
    """Index of the first terminal control instruction, or the block length."""
    for i, ins in enumerate(block.instructions):
        if ins.opcode in TERMINALS:
            return i
    return len(block.instructions)


def augment(base: Optional[ActionBlock], snippets: Sequence[ActionBlock]) -> ActionBlock:
    """
    Splice `snippets` into `base` right before its terminal instruction.
    When an earlier branch jumps past that point the snippets go first
    instead, so they run on every path through the block.
    """
    code = [ins for s in snippets for ins in s.instructions]
    declared = frozenset().union(*(s.declared_resources for s in snippets))
    if base is None:
        return ActionBlock(tuple(code), declared)
    body = list(base.instructions)
    at = splice_point(base)
    jumps_past = any(ins.opcode in BRANCH_OPS and j + ins.operands[2] > at
                     for j, ins in enumerate(body[:at]))
    if jumps_past:
        at = 0
    return ActionBlock(tuple(body[:at] + code + body[at:]), base.declared_resources | declared)


# ---------------- admission -----------------

@dataclass(frozen=True)
class Admission:
    accepted: bool
    estimate: float
    floor: float
    candidates: Tuple[int, ...] = ()


def admission_check(cost_delta: CostProfile, caps: DeviceCaps, active_cost: CostProfile,
                    floor: float) -> Admission:
    """Pure: accept iff the throughput estimate with the new cost stays at or above `floor`."""
    estimate = estimate_throughput([active_cost, cost_delta], caps)
    return Admission(estimate >= floor, estimate, floor)


# ---------------- probe handles -----------------

@dataclass
class ProbeHandle:
    probe_id: int
    spec: ProbeSpec
    resources: Dict[str, Handle]
    timers: Dict[int, int]
    holders: List[Holder]
    cost: CostProfile
    created_ts: int
    overlaps: List[FlowEntry] = field(default_factory=list)
    subscribers: Set[str] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "probe_id": self.probe_id,
            "spec": self.spec.to_dict(),
            "resources": {name: str(h) for name, h in sorted(self.resources.items())},
            "timers": sorted(self.timers),
            "attached": [holder_str(h) for h in self.holders],
            "mem_accesses": self.cost.mem_accesses,
            "subscribers": sorted(self.subscribers),
            "created_ts": self.created_ts,
        }


class _Planner:
    """Hands out slot/ref/entry/resource indices that a plan will claim."""

    def __init__(self, device: Device):
        self.device = device
        self.slots: List[int] = []
        self.refs: List[int] = []
        self.cells: Dict[ResourceClass, List[int]] = {}
        self.entries: Dict[int, List[int]] = {}

    def slot_ref(self) -> Tuple[int, int]:
        slot = self.device.actions.peek_slots(1, exclude=self.slots)[0]
        ref = self.device.actions.peek_refs(1, exclude=self.refs)[0]
        self.slots.append(slot)
        self.refs.append(ref)
        return slot, ref

    def cell(self, cls: ResourceClass) -> int:
        taken = self.cells.setdefault(cls, [])
        index = self.device.pool.peek_free(cls, 1, exclude=taken)[0]
        taken.append(index)
        return index

    def entry_id(self, table_id: int) -> int:
        taken = self.entries.setdefault(table_id, [])
        eid = self.device.table(table_id).peek_entry_ids(1, exclude=taken)[0]
        taken.append(eid)
        return eid


@dataclass
class _Steps:
    allocs: list = field(default_factory=list)
    loads: list = field(default_factory=list)
    entries: list = field(default_factory=list)
    links: list = field(default_factory=list)
    unlinks: list = field(default_factory=list)
    cancels: list = field(default_factory=list)
    deletes: list = field(default_factory=list)
    releases: list = field(default_factory=list)
    arms: list = field(default_factory=list)

    def install_order(self) -> list:
        return self.allocs + self.loads + self.entries + self.links + self.deletes + self.arms

    def revoke_order(self) -> list:
        return self.loads + self.links + self.unlinks + self.cancels + self.deletes + self.releases


class DnpRuntime:
    def __init__(self, device: Device, settings: Settings = SETTINGS):
        self.device = device
        self.settings = settings
        self.probes: Dict[int, ProbeHandle] = {}
        self.attached: Dict[Holder, AttachState] = {}

    # ---------------- bookkeeping -----------------

    @property
    def active_cost(self) -> CostProfile:
        return aggregate(p.cost for p in self.probes.values())

    def floor(self) -> float:
        return self.device.caps.floor(self.settings.floor_ratio)

    def next_probe_id(self, exclude: Sequence[int] = ()) -> int:
        pid = 1
        while pid in self.probes or pid in exclude:
            pid += 1
        return pid

    def probe(self, probe_id: int) -> ProbeHandle:
        try:
            return self.probes[probe_id]
        except KeyError:
            raise NoSuchProbe(f"probe {probe_id} on {self.device.device_id}") from None

    # ---------------- planning -----------------

    def _holders(self, spec: ProbeSpec, planner: _Planner, steps: _Steps,
                 plan: InstallPlan) -> List[Tuple[Holder, Optional[AttachState]]]:
        """Resolve the attach point to holders; new-entry targets come back with a fresh state."""
        device = self.device
        attach = spec.attach
        kind = attach.kind
        if kind == AttachKind.TIMER:
            return []
        if kind in (AttachKind.PORT_INGRESS, AttachKind.PORT_EGRESS):
            if attach.port not in device.ports:
                raise InvalidPosition(f"{device.device_id} has no port {attach.port}")
            return [((kind.value.split("_")[1], attach.port), None)]
        if kind == AttachKind.QUEUE:
            device.queue(attach.port)
            if spec.kind == ProbeKind.QUEUE_WATERMARK:
                return [(("enqueue", attach.port), None), (("dequeue", attach.port), None)]
            return [(("enqueue", attach.port), None)]
        table = device.table(attach.table)
        if kind == AttachKind.TABLE_MISS:
            return [(("miss", attach.table), None)]

        try:
            key = MatchKey.parse(attach.key, table.key_width)
        except ValueError as e:
            raise ProbeSpecError(f"bad key {attach.key!r}: {e}") from None
        existing = [e for e in table.ordered() if e.key == key
                    and (attach.priority is None or e.priority == attach.priority)]
        if existing:
            entry = existing[0]
            plan.overlaps = [e for e in table.overlapping(key) if e.entry_id != entry.entry_id]
            return [(("entry", attach.table, entry.entry_id), None)]

        # the flow has no entry of its own: clone whatever forwards it today
        cover = table.covering(key)
        if cover is not None:
            base_block = device.block_at(cover.action_slot)
            params = cover.params
            priority = attach.priority if attach.priority is not None else cover.priority + 1
        elif table.overlapping(key):
            raise NoCoveringBehavior(f"table {attach.table}: no single entry covers {key}")
        else:
            base_block = device.block_at(table.miss_slot)
            params = b""
            priority = attach.priority if attach.priority is not None else 0
        entry_id = planner.entry_id(attach.table)
        holder = ("entry", attach.table, entry_id)
        plan.overlaps = table.overlapping(key)
        state = AttachState(holder, "created", None, None, base_block)
        steps.entries.append(InsertEntry(attach.table, entry_id, key, priority, -1, params))
        targets = [(holder, state)]
        if spec.extend_overlaps:
            for e in plan.overlaps:
                if e.priority > priority:
                    targets.append((("entry", attach.table, e.entry_id), None))
        return targets

    def _fresh_state(self, holder: Holder) -> AttachState:
        device = self.device
        base_slot = device.pointer_of(holder)
        if base_slot is None:
            return AttachState(holder, "pointer", None, None, None)
        mode = "switch" if device.actions.refcount(base_slot) == 1 else "pointer"
        return AttachState(holder, mode, base_slot, device.block_ref(base_slot), device.block_at(base_slot))

    def _relink(self, state: AttachState, planner: _Planner, steps: _Steps) -> Tuple[int, ActionBlock]:
        """Load the block for `state.snippets` and link it in place of the current one."""
        device = self.device
        block = augment(state.base_block, [state.snippets[p] for p in sorted(state.snippets)])
        validate(block, passive=not device.permissive, settings=device.settings)
        slot, ref = planner.slot_ref()
        steps.loads.append(LoadAction(slot, ref, block))
        previous = state.current_slot
        if state.mode == "switch":
            old_ref = state.base_ref if previous is None else device.block_ref(previous)
            steps.links.append(SwitchPointer(state.base_slot, ref, old_ref))
        elif state.mode == "pointer" or previous is not None:
            old = state.base_slot if previous is None else previous
            steps.links.append(SetPointer(state.holder, slot, old))
        if previous is not None:
            steps.deletes.append(DeleteAction(previous))
        return slot, block

    def plan_install(self, spec: ProbeSpec, probe_id: Optional[int] = None) -> InstallPlan:
        """Pure: build the mutation list that installs `spec`. Nothing is applied."""
        device = self.device
        pid = self.next_probe_id() if probe_id is None else probe_id
        if pid in self.probes:
            raise ProbeSpecError(f"probe id {pid} already in use")
        plan = InstallPlan(pid, [], spec=spec)
        planner = _Planner(device)
        steps = _Steps()

        for need in catalog.resource_needs(spec, device):
            handle = Handle(need.cls, planner.cell(need.cls))
            plan.handles[need.name] = handle
            steps.allocs.append(AllocResource(handle, need.params))
        program = catalog.build_program(spec, pid, plan.handles, device)

        if program.snippet is not None:
            snippet_cost = validate(program.snippet, passive=not device.permissive, settings=device.settings)
            targets = self._holders(spec, planner, steps, plan)
            for holder, state in targets:
                if state is None:
                    current = self.attached.get(holder)
                    state = self._fresh_state(holder) if current is None else AttachState(
                        holder, current.mode, current.base_slot, current.base_ref,
                        current.base_block, dict(current.snippets), current.current_slot)
                state.snippets[pid] = program.snippet
                slot, _ = self._relink(state, planner, steps)
                if state.mode == "created" and state.current_slot is None:
                    insert = steps.entries[-1]
                    insert.slot = slot
                state.current_slot = slot
                plan.targets[holder] = state
            plan.cost_delta = aggregate([snippet_cost] * len(targets))

        if program.timer_block is not None:
            slot, ref = planner.slot_ref()
            steps.loads.append(LoadAction(slot, ref, program.timer_block))
            timer_id = planner.cell(ResourceClass.TIMER)
            steps.arms.append(ArmTimer(timer_id, program.timer_interval, program.timer_mode, slot))
            plan.timers[timer_id] = slot

        plan.mutations = steps.install_order()
        return plan

    def plan_revoke(self, probe_id: int) -> InstallPlan:
        device = self.device
        handle = self.probe(probe_id)
        plan = InstallPlan(probe_id, [], spec=handle.spec, cost_delta=ZERO_COST - handle.cost)
        planner = _Planner(device)
        steps = _Steps()

        for holder in handle.holders:
            current = self.attached[holder]
            state = AttachState(holder, current.mode, current.base_slot, current.base_ref,
                                current.base_block, dict(current.snippets), current.current_slot)
            state.snippets.pop(probe_id, None)
            if state.snippets:
                state.current_slot, _ = self._relink(state, planner, steps)
                plan.targets[holder] = state
                continue
            if state.mode == "created":
                steps.unlinks.append(DeleteEntry(holder[1], holder[2]))
            elif state.mode == "switch":
                steps.links.append(SwitchPointer(state.base_slot, state.base_ref,
                                                 device.block_ref(state.current_slot)))
            else:
                steps.links.append(SetPointer(holder, state.base_slot, state.current_slot))
            steps.deletes.append(DeleteAction(state.current_slot))
            plan.targets[holder] = None

        armed = {t.timer_id for t in device.pool.timers()}
        for timer_id, slot in sorted(handle.timers.items()):
            if timer_id in armed:
                steps.cancels.append(CancelTimer(timer_id))
            steps.deletes.append(DeleteAction(slot))
        for name, res in sorted(handle.resources.items()):
            steps.releases.append(ReleaseResource(res))

        plan.mutations = steps.revoke_order()
        return plan

    # ---------------- admission -----------------

    def admission_check(self, plan: InstallPlan) -> Admission:
        decision = admission_check(plan.cost_delta, self.device.caps, self.active_cost, self.floor())
        if decision.accepted:
            return decision
        return Admission(False, decision.estimate, decision.floor, self._candidates(plan.cost_delta))

    def _candidates(self, cost_delta: CostProfile) -> Tuple[int, ...]:
        """Unsubscribed probes whose revocation would let `cost_delta` in, heaviest first."""
        idle = sorted((p for p in self.probes.values() if not p.subscribers),
                      key=lambda p: (-p.cost.mem_accesses, p.probe_id))
        remaining = self.active_cost
        chosen = []
        for probe in idle:
            remaining = remaining - probe.cost
            chosen.append(probe.probe_id)
            if admission_check(cost_delta, self.device.caps, remaining, self.floor()).accepted:
                return tuple(chosen)
        return ()

    def probe_check(self, specs: Sequence[ProbeSpec]) -> Admission:
        """Dry run: would all of `specs` fit together on top of what is live?"""
        total = ZERO_COST
        taken = []
        for spec in specs:
            pid = self.next_probe_id(exclude=taken)
            taken.append(pid)
            total = total + self.plan_install(spec, pid).cost_delta
        return admission_check(total, self.device.caps, self.active_cost, self.floor())

    # ---------------- commit / revoke -----------------

    def commit(self, plan: InstallPlan, fail_at_step: Optional[int] = None) -> ProbeHandle:
        apply_plan(self.device, plan, fail_at_step)
        for holder, state in plan.targets.items():
            self.attached[holder] = state
        handle = ProbeHandle(
            probe_id=plan.probe_id,
            spec=plan.spec,
            resources=dict(plan.handles),
            timers=dict(plan.timers),
            holders=list(plan.targets),
            cost=plan.cost_delta,
            created_ts=self.device.clock.now(),
            overlaps=list(plan.overlaps),
        )
        self.probes[plan.probe_id] = handle
        logger.info("%s: probe %d (%s at %s) installed in %d steps", self.device.device_id,
                    plan.probe_id, plan.spec.kind.value, plan.spec.attach, len(plan))
        return handle

    def install(self, spec: ProbeSpec, app_id: Optional[str] = None,
                fail_at_step: Optional[int] = None) -> ProbeHandle:
        plan = self.plan_install(spec)
        decision = self.admission_check(plan)
        if not decision.accepted:
            raise AdmissionRejected(decision.estimate, decision.floor, self.device.device_id,
                                    decision.candidates)
        handle = self.commit(plan, fail_at_step)
        if app_id is not None:
            handle.subscribers.add(app_id)
        return handle

    def revoke(self, probe_id: int, force: bool = False, fail_at_step: Optional[int] = None) -> None:
        handle = self.probe(probe_id)
        if handle.subscribers and not force:
            raise HasSubscribers(f"probe {probe_id} has {len(handle.subscribers)} subscribers")
        plan = self.plan_revoke(probe_id)
        apply_plan(self.device, plan, fail_at_step)
        for holder, state in plan.targets.items():
            if state is None:
                del self.attached[holder]
            else:
                self.attached[holder] = state
        del self.probes[probe_id]
        logger.info("%s: probe %d revoked", self.device.device_id, probe_id)

    # ---------------- subscriptions -----------------

    def subscribe(self, probe_id: int, app_id: str) -> int:
        handle = self.probe(probe_id)
        handle.subscribers.add(app_id)
        return len(handle.subscribers)

    def unsubscribe(self, probe_id: int, app_id: str) -> int:
        handle = self.probe(probe_id)
        handle.subscribers.discard(app_id)
        return len(handle.subscribers)

    def deliveries(self, report: Report) -> List[Tuple[str, Report]]:
        """One (app, report) pair per subscriber of the report's probe."""
        handle = self.probes.get(report.probe_id)
        if handle is None:
            return []
        return [(app, report) for app in sorted(handle.subscribers)]

    # ---------------- queries -----------------

    def query(self, probe_id: int) -> dict:
        """Resources a probe owns and their current values (pull-mode polling)."""
        handle = self.probe(probe_id)
        pool = self.device.pool
        values = {}
        for name, res in sorted(handle.resources.items()):
            cell = pool.get(res)
            if res.cls == ResourceClass.STATE_TABLE:
                values[name] = len(cell.entries)
            elif hasattr(cell, "value"):
                values[name] = cell.value
        out = handle.to_dict()
        out["values"] = values
        out["read_ts"] = self.device.clock.now()
        return out

    def list(self) -> List[dict]:
        return [self.probes[p].to_dict() for p in sorted(self.probes)]

    def snapshot(self) -> dict:
        return {
            "device": self.device.device_id,
            "probes": self.list(),
            "attached": {holder_str(h): sorted(s.snippets) for h, s in sorted(self.attached.items())},
            "mem_accesses": self.active_cost.mem_accesses,
        }
