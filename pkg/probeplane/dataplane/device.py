"""
A single programmable device: match-action tables, the action store, the
resource pool, port hooks and egress queues.

Control operations and packets are serialized by the caller (the device
agent or the simulator), so every mutation lands at a packet boundary.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from probeplane.dataplane.actions import ActionStore, Holder
from probeplane.dataplane.packet import (
    CONTROLLER_PORT,
    DiagCode,
    ForwardingOutcome,
    MatchKey,
    PacketBuffer,
    Report,
    ReportTemplate,
    write_bits,
)
from probeplane.dataplane.ports import EgressQueue
from probeplane.dataplane.tables import FlowEntry, FlowTable, TableDef
from probeplane.errors import (
    ActionNeedsPacket,
    ConfigError,
    DanglingActionPtr,
    DuplicateEntry,
    DuplicateTableId,
    HandleInUse,
    InvalidPosition,
    KeyWidthMismatch,
    NoSuchEntry,
    NoSuchTable,
    PacketFieldOnTimerContext,
    PoolExhausted,
    ProbePlaneError,
)
from probeplane.resources.clock import VirtualClock
from probeplane.resources.pool import CounterReading, ResourcePool, TimerEntry
from probeplane.resources.types import Handle, ResourceClass, TimerMode
from probeplane.settings import SETTINGS, Settings
from probeplane.vm.cost import DeviceCaps
from probeplane.vm.executor import Disposition, ExecContext, ExecResult, execute
from probeplane.vm.isa import NEXT_TABLE, ActionBlock
from probeplane.vm.validator import validate

logger = logging.getLogger(__name__)

# queue hooks find the current queue depth here (metadata bytes 184..191)
QUEUE_DEPTH_BITS = 184 * 8

# entries added by LEARN instructions
LEARN_PRIORITY = 1


@dataclass
class TimerFiring:
    timer_id: int
    at: int
    outcome: ForwardingOutcome


@dataclass
class DeviceCounters:
    processed: int = 0
    malformed: int = 0
    stage_limit: int = 0
    aborted: int = 0
    offline_drops: int = 0
    queue_overflows: int = 0
    learned: int = 0
    refused_learns: int = 0

    def as_dict(self) -> dict:
        return dict(vars(self))


class Device:
    def __init__(self, device_id: str, *, ports: Sequence[int] = (), settings: Settings = SETTINGS,
                 clock=None, caps: Optional[DeviceCaps] = None):
        self.device_id = device_id
        self.settings = settings
        self.clock = clock or VirtualClock()
        self.caps = caps or DeviceCaps()
        self.ports = sorted(set(ports))
        self.pool = ResourcePool(settings.pools, self.clock)
        self.actions = ActionStore()
        self.tables: Dict[int, FlowTable] = {}
        self.entry_table: Optional[int] = None
        self.hooks: Dict[str, Dict[int, int]] = {"ingress": {}, "egress": {}}
        self.queues: Dict[int, EgressQueue] = {}
        self.counters = DeviceCounters()
        self.online = True
        self.permissive = False
        self._faults: Dict[str, ProbePlaneError] = {}

    def __repr__(self):
        return f"Device({self.device_id!r}, tables={sorted(self.tables)}, ports={self.ports})"

    # ---------------- fault injection (tests, rollback drills) -----------------

    def inject_fault(self, op: str, error: Optional[ProbePlaneError] = None) -> None:
        """Make the next call of control operation `op` fail with `error`."""
        self._faults[op] = error or PoolExhausted(f"injected fault in {op}")

    def _check_fault(self, op: str) -> None:
        error = self._faults.pop(op, None)
        if error is not None:
            raise error

    # ---------------- actions -----------------

    def load_action(self, block: ActionBlock, *, slot: Optional[int] = None,
                    ref: Optional[int] = None) -> int:
        self._check_fault("load_action")
        cost = validate(block, passive=not self.permissive, settings=self.settings)
        return self.actions.load(block, cost, slot=slot, ref=ref)

    def delete_action(self, slot: int) -> ActionBlock:
        self._check_fault("delete_action")
        return self.actions.delete(slot).block

    def switch_action_pointer(self, slot: int, new_ref: int) -> int:
        self._check_fault("switch_action_pointer")
        previous = self.actions.switch(slot, new_ref)
        logger.debug("%s: slot %d switched ref %d -> %d", self.device_id, slot, previous, new_ref)
        return previous

    def block_ref(self, slot: int) -> int:
        return self.actions.ref_of(slot)

    def block_at(self, slot: int) -> ActionBlock:
        return self.actions.resolve(slot).block

    # ---------------- tables -----------------

    def table(self, table_id: int) -> FlowTable:
        try:
            return self.tables[table_id]
        except KeyError:
            raise NoSuchTable(f"table {table_id}") from None

    def _tail(self) -> Optional[int]:
        seen = set()
        tid = self.entry_table
        while tid is not None and tid not in seen:
            seen.add(tid)
            nxt = self.tables[tid].next_table
            if nxt is None:
                return tid
            tid = nxt
        return None

    def create_table(self, table_def: TableDef, after: Optional[int] = None) -> int:
        """Splice a new table into the `after` table's next edge, or at the pipeline end."""
        self._check_fault("create_table")
        if table_def.table_id in self.tables:
            raise DuplicateTableId(f"table {table_def.table_id}")
        if after is not None and after not in self.tables:
            raise InvalidPosition(f"no table {after} to insert after")
        self.actions.attach(table_def.miss_slot, ("miss", table_def.table_id))
        if after is None:
            tail = self._tail()
            table = FlowTable.from_def(table_def)
            if tail is None:
                self.entry_table = table_def.table_id
            else:
                self.tables[tail].next_table = table_def.table_id
        else:
            table = FlowTable.from_def(table_def, next_table=self.tables[after].next_table)
            self.tables[after].next_table = table_def.table_id
        self.tables[table_def.table_id] = table
        logger.debug("%s: created table %d", self.device_id, table_def.table_id)
        return table_def.table_id

    def delete_table(self, table_id: int) -> TableDef:
        self._check_fault("delete_table")
        table = self.table(table_id)
        if table.entries:
            raise InvalidPosition(f"table {table_id} still has {len(table.entries)} entries")
        for other in self.tables.values():
            if other.next_table == table_id:
                other.next_table = table.next_table
        if self.entry_table == table_id:
            self.entry_table = table.next_table
        del self.tables[table_id]
        self.actions.detach(table.miss_slot, ("miss", table_id))
        return TableDef(table_id, table.key_spec, table.miss_slot, table.writable_by_actions)

    def insert_entry(self, table_id: int, key: MatchKey, priority: int, action_slot: int,
                     params: bytes = b"", entry_id: Optional[int] = None) -> int:
        self._check_fault("insert_entry")
        table = self.table(table_id)
        if key.width != table.key_width:
            raise KeyWidthMismatch(f"table {table_id} keys are {table.key_width} bits, got {key.width}")
        if table.find(key, priority) is not None:
            raise DuplicateEntry(f"table {table_id}: {key} @ {priority}")
        if len(params) > self.settings.max_params:
            raise ConfigError(f"params of {len(params)} bytes exceed {self.settings.max_params}")
        if action_slot not in self.actions.slots:
            raise DanglingActionPtr(f"slot {action_slot} not loaded")
        if entry_id is None:
            entry_id = table.peek_entry_ids()[0]
        elif entry_id in table.entries:
            raise DuplicateEntry(f"table {table_id}: entry id {entry_id}")
        table.put(FlowEntry(entry_id, key, priority, action_slot, bytes(params)))
        self.actions.attach(action_slot, ("entry", table_id, entry_id))
        return entry_id

    def entry(self, table_id: int, entry_id: int) -> FlowEntry:
        table = self.table(table_id)
        if entry_id not in table.entries:
            raise NoSuchEntry(f"table {table_id}: entry {entry_id}")
        return table.entries[entry_id]

    def delete_entry(self, table_id: int, entry_id: int) -> FlowEntry:
        self._check_fault("delete_entry")
        entry = self.entry(table_id, entry_id)
        self.table(table_id).remove(entry_id)
        self.actions.detach(entry.action_slot, ("entry", table_id, entry_id))
        return entry

    def modify_entry(self, table_id: int, entry_id: int, action_slot: Optional[int] = None,
                     params: Optional[bytes] = None) -> FlowEntry:
        self._check_fault("modify_entry")
        old = self.entry(table_id, entry_id)
        new_slot = old.action_slot if action_slot is None else action_slot
        if new_slot not in self.actions.slots:
            raise DanglingActionPtr(f"slot {new_slot} not loaded")
        new_params = old.params if params is None else bytes(params)
        if len(new_params) > self.settings.max_params:
            raise ConfigError(f"params of {len(new_params)} bytes exceed {self.settings.max_params}")
        holder = ("entry", table_id, entry_id)
        self.actions.attach(new_slot, holder)
        if new_slot != old.action_slot:
            self.actions.detach(old.action_slot, holder)
        self.table(table_id).put(FlowEntry(entry_id, old.key, old.priority, new_slot, new_params))
        return old

    def lookup(self, table_id: int, key_bits: int, width: Optional[int] = None) -> Optional[FlowEntry]:
        return self.table(table_id).lookup(key_bits, width)

    # ---------------- holders -----------------

    def pointer_of(self, holder: Holder) -> Optional[int]:
        kind = holder[0]
        if kind == "entry":
            return self.entry(holder[1], holder[2]).action_slot
        if kind == "miss":
            return self.table(holder[1]).miss_slot
        if kind in ("ingress", "egress"):
            return self.hooks[kind].get(holder[1])
        if kind in ("enqueue", "dequeue"):
            return getattr(self.queue(holder[1]), f"{kind}_hook")
        raise InvalidPosition(f"unknown holder {holder!r}")

    def set_pointer(self, holder: Holder, slot: Optional[int]) -> Optional[int]:
        """Repoint an entry, table miss or hook at `slot`; returns the previous slot."""
        self._check_fault("set_pointer")
        kind = holder[0]
        previous = self.pointer_of(holder)
        if kind == "entry":
            if slot is None:
                raise DanglingActionPtr("entries always point at a slot")
            self.modify_entry(holder[1], holder[2], action_slot=slot)
            return previous
        if slot is not None:
            self.actions.attach(slot, holder)
        if kind == "miss":
            if slot is None:
                raise DanglingActionPtr("table miss always points at a slot")
            self.table(holder[1]).miss_slot = slot
        elif kind in ("ingress", "egress"):
            if holder[1] not in self.ports:
                raise InvalidPosition(f"{self.device_id} has no port {holder[1]}")
            if slot is None:
                self.hooks[kind].pop(holder[1], None)
            else:
                self.hooks[kind][holder[1]] = slot
        else:
            setattr(self.queue(holder[1]), f"{kind}_hook", slot)
        if previous is not None and previous != slot:
            self.actions.detach(previous, holder)
        return previous

    # ---------------- ports and queues -----------------

    def add_queue(self, queue: EgressQueue) -> None:
        if queue.port not in self.ports:
            raise InvalidPosition(f"{self.device_id} has no port {queue.port}")
        self.queues[queue.port] = queue

    def queue(self, port: int) -> EgressQueue:
        try:
            return self.queues[port]
        except KeyError:
            raise InvalidPosition(f"{self.device_id} has no queue on port {port}") from None

    # ---------------- resources -----------------

    def alloc(self, cls: ResourceClass, params: Sequence[int] = (), index: Optional[int] = None) -> Handle:
        self._check_fault("alloc")
        return self.pool.alloc(cls, params, index=index)

    def release(self, handle: Handle) -> None:
        self._check_fault("release")
        for loaded in self.actions.blocks.values():
            if handle in loaded.block.declared_resources:
                raise HandleInUse(f"{handle} referenced by block ref {loaded.ref}")
        self.pool.release(handle)

    def set_timer(self, interval: int, mode: TimerMode, slot: int, index: Optional[int] = None) -> int:
        self._check_fault("set_timer")
        loaded = self.actions.resolve(slot)
        if loaded.cost.needs_packet:
            raise ActionNeedsPacket(f"slot {slot} reads packet fields")
        handle = self.pool.set_timer(interval, mode, slot, index=index)
        self.actions.attach(slot, ("timer", handle.index))
        return handle.index

    def cancel_timer(self, timer_id: int):
        self._check_fault("cancel_timer")
        entry = self.pool.cancel_timer(timer_id)
        self.actions.detach(entry.linked_slot, ("timer", timer_id))
        return entry

    def restore_timer(self, entry: TimerEntry) -> int:
        self._check_fault("set_timer")
        self.actions.resolve(entry.linked_slot)
        self.pool.restore_timer(entry)
        self.actions.attach(entry.linked_slot, ("timer", entry.timer_id))
        return entry.timer_id

    def read_counter(self, handle: Handle) -> CounterReading:
        return self.pool.read_counter(handle)

    def stb_dump(self, handle: Handle) -> list:
        return self.pool.stb_dump(handle)

    # ---------------- packet path -----------------

    def _diag(self, outcome: ForwardingOutcome, code: DiagCode, where: int = 0) -> None:
        outcome.reports.append(Report(self.device_id, ReportTemplate.DIAG, self.clock.now(), (int(code), where)))

    def _run(self, slot: int, ctx: ExecContext, outcome: ForwardingOutcome, where: int = 0) -> ExecResult:
        try:
            block = self.actions.resolve(slot).block
        except DanglingActionPtr:
            self.counters.aborted += 1
            self._diag(outcome, DiagCode.UNALLOCATED, where)
            return ExecResult(disposition=Disposition.DROP)
        res = execute(block, ctx, self.pool)
        if res.aborted:
            self.counters.aborted += 1
            code = (DiagCode.TIMER_PACKET_FIELD if isinstance(res.error, PacketFieldOnTimerContext)
                    else DiagCode.UNALLOCATED)
            self._diag(outcome, code, where)
            return res
        outcome.reports.extend(res.reports)
        outcome.emitted.extend(res.emitted)
        outcome.tables_written.extend(res.stb_writes)
        if res.entry_writes:
            self._learn(res.entry_writes, outcome)
        return res

    def _learn(self, writes: List[tuple], outcome: ForwardingOutcome) -> None:
        """Apply the exact-match entries a block asked for; read-only tables refuse them."""
        for table_id, key, width, slot in writes:
            table = self.tables.get(table_id)
            if table is None or not table.writable_by_actions:
                self.counters.refused_learns += 1
                self._diag(outcome, DiagCode.READ_ONLY_TABLE, table_id)
                continue
            match = MatchKey.exact(key, width)
            if table.find(match, LEARN_PRIORITY) is not None:
                continue
            try:
                entry_id = self.insert_entry(table_id, match, LEARN_PRIORITY, slot)
            except ProbePlaneError as e:
                logger.debug("%s: learn into table %d refused: %s", self.device_id, table_id, e)
                self.counters.refused_learns += 1
                self._diag(outcome, DiagCode.LEARN_REFUSED, table_id)
                continue
            self.counters.learned += 1
            outcome.learned.append((table_id, entry_id))

    def _context(self, data: Optional[bytes], params: bytes = b"") -> ExecContext:
        return ExecContext(packet=data, params=params, now=self.clock.now(),
                           metadata=bytearray(self.settings.metadata_bytes),
                           device_id=self.device_id, permissive=self.permissive)

    def _drop(self, outcome: ForwardingOutcome, reason: str) -> ForwardingOutcome:
        outcome.dropped = True
        outcome.drop_reason = outcome.drop_reason or reason
        return outcome

    def process_packet(self, pkt: PacketBuffer) -> ForwardingOutcome:
        outcome = ForwardingOutcome()
        if not self.online:
            self.counters.offline_drops += 1
            return self._drop(outcome, "offline")
        self.counters.processed += 1
        if self.entry_table is None:
            return self._drop(outcome, "no pipeline")
        first = self.tables[self.entry_table]
        if len(pkt.data) > self.settings.mtu or len(pkt.data) < first.packet_extent_bytes:
            self.counters.malformed += 1
            self._diag(outcome, DiagCode.MALFORMED, pkt.ingress_port)
            return self._drop(outcome, "malformed")

        ctx = self._context(pkt.data)
        hook = self.hooks["ingress"].get(pkt.ingress_port)
        if hook is not None:
            res = self._run(hook, ctx, outcome, pkt.ingress_port)
            if res.disposition == Disposition.DROP:
                return self._drop(outcome, "ingress hook")
            if res.disposition == Disposition.OUTPUT:
                return self._egress(res.port, ctx, outcome)

        table_id = self.entry_table
        stages = 0
        while True:
            if stages >= self.settings.max_stages:
                self.counters.stage_limit += 1
                self._diag(outcome, DiagCode.STAGE_LIMIT, table_id)
                return self._drop(outcome, "stage limit")
            table = self.tables.get(table_id)
            if table is None:
                return self._drop(outcome, f"goto missing table {table_id}")
            stages += 1
            if len(ctx.packet) < table.packet_extent_bytes:
                self.counters.malformed += 1
                self._diag(outcome, DiagCode.MALFORMED, table_id)
                return self._drop(outcome, "malformed")
            entry = table.lookup(table.extract_key(ctx.packet, ctx.metadata))
            ctx.params = entry.params if entry else b""
            slot = entry.action_slot if entry else table.miss_slot
            res = self._run(slot, ctx, outcome, table_id)
            if res.aborted and entry is not None:
                ctx.params = b""
                res = self._run(table.miss_slot, ctx, outcome, table_id)
            if res.disposition == Disposition.OUTPUT:
                return self._egress(res.port, ctx, outcome)
            if res.disposition == Disposition.GOTO:
                table_id = table.next_table if res.table == NEXT_TABLE else res.table
                if table_id is None:
                    return self._drop(outcome, "no next table")
                continue
            return self._drop(outcome, "action")

    def _egress(self, port: int, ctx: ExecContext, outcome: ForwardingOutcome) -> ForwardingOutcome:
        data = ctx.packet
        if port == CONTROLLER_PORT:
            outcome.reports.append(Report(self.device_id, ReportTemplate.MISS, self.clock.now(), (), data))
            return outcome
        if port not in self.ports:
            return self._drop(outcome, f"no port {port}")
        hook = self.hooks["egress"].get(port)
        if hook is not None:
            res = self._run(hook, ctx, outcome, port)
            if res.disposition == Disposition.DROP:
                return self._drop(outcome, "egress hook")
            data = ctx.packet
        queue = self.queues.get(port)
        if queue is None:
            outcome.emitted.append((port, data))
            return outcome
        if not queue.push(data):
            self.counters.queue_overflows += 1
            self._diag(outcome, DiagCode.QUEUE_OVERFLOW, port)
            return self._drop(outcome, "queue overflow")
        outcome.queued.append(port)
        self._queue_hook(queue, queue.enqueue_hook, data, outcome)
        return outcome

    def _queue_hook(self, queue: EgressQueue, slot: Optional[int], data: bytes,
                    outcome: ForwardingOutcome) -> None:
        if slot is None:
            return
        ctx = self._context(data)
        write_bits(ctx.metadata, QUEUE_DEPTH_BITS, 64, queue.depth)
        self._run(slot, ctx, outcome, queue.port)

    def enqueue(self, port: int, data: bytes) -> ForwardingOutcome:
        """Place a packet straight onto a port's egress queue (scripted load)."""
        outcome = ForwardingOutcome()
        queue = self.queue(port)
        if not queue.push(data):
            self.counters.queue_overflows += 1
            self._diag(outcome, DiagCode.QUEUE_OVERFLOW, port)
            return self._drop(outcome, "queue overflow")
        outcome.queued.append(port)
        self._queue_hook(queue, queue.enqueue_hook, data, outcome)
        return outcome

    def dequeue(self, port: int) -> ForwardingOutcome:
        outcome = ForwardingOutcome()
        queue = self.queue(port)
        data = queue.pop()
        if data is None:
            return outcome
        outcome.emitted.append((port, data))
        self._queue_hook(queue, queue.dequeue_hook, data, outcome)
        return outcome

    # ---------------- timers -----------------

    def advance_clock(self, to: int) -> List[TimerFiring]:
        """Fire every timer due at or before `to`, in (time, timer_id) order."""
        firings = []
        while True:
            entry = self.pool.pop_due(to)
            if entry is None:
                break
            if entry.next_fire > self.clock.now():
                self.clock.set(entry.next_fire)
            if entry.mode == TimerMode.ONE_SHOT:
                self.actions.detach(entry.linked_slot, ("timer", entry.timer_id))
            outcome = ForwardingOutcome()
            self._run(entry.linked_slot, self._context(None), outcome, entry.timer_id)
            firings.append(TimerFiring(entry.timer_id, entry.next_fire, outcome))
        if to > self.clock.now():
            self.clock.set(to)
        return firings

    def next_timer_due(self) -> Optional[int]:
        return self.pool.next_due()

    # ---------------- whole-device state -----------------

    def snapshot(self) -> dict:
        """Canonical, JSON-friendly dump of the full device state."""
        return {
            "device": self.device_id,
            "entry_table": self.entry_table,
            "tables": {str(t): self.tables[t].snapshot() for t in sorted(self.tables)},
            "actions": self.actions.snapshot(),
            "hooks": {kind: {str(p): s for p, s in sorted(h.items())} for kind, h in self.hooks.items()},
            "queues": {str(p): self.queues[p].snapshot() for p in sorted(self.queues)},
            "pool": self.pool.snapshot(),
        }

    def teardown(self) -> None:
        """Forget the whole pipeline (static reprogramming path)."""
        self.tables.clear()
        self.entry_table = None
        self.actions.clear()
        for hooks in self.hooks.values():
            hooks.clear()
        self.queues.clear()
        self.pool.clear()
        logger.info("%s: pipeline torn down", self.device_id)
