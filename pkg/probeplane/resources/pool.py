"""
The device-wide pool of shared resources: counters, meters, registers,
state tables, timers and samplers. Handles are (class, index) pairs; the
pool always hands out the lowest free index so plans can predict them.
"""
import heapq
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from probeplane.errors import NoSuchHandle, NoSuchTimer, PoolExhausted
from probeplane.resources.types import (
    CLASS_NAMES,
    CounterUnit,
    Handle,
    MeterColor,
    ResourceClass,
    TimerMode,
)
from probeplane.settings import PoolCapacities

logger = logging.getLogger(__name__)

U64 = (1 << 64) - 1
NS_PER_SEC = 1_000_000_000


@dataclass
class CounterCell:
    value: int = 0
    unit: CounterUnit = CounterUnit.PACKETS

    def add(self, delta: int) -> int:
        # negative deltas saturate at zero; positive ones wrap at 64 bits
        self.value = max(0, self.value + delta) & U64
        return self.value


@dataclass
class RegisterCell:
    value: int = 0


@dataclass
class MeterCell:
    """Two-rate three-colour token bucket (colour-blind), in bytes."""
    cir: int = 0
    cbs: int = 0
    pir: int = 0
    pbs: int = 0
    # token levels are kept in byte*ns units to stay in integer arithmetic
    tc: int = 0
    tp: int = 0
    last_ts: Optional[int] = None

    def check(self, nbytes: int, now: int) -> MeterColor:
        if self.last_ts is None:
            self.tc = self.cbs * NS_PER_SEC
            self.tp = self.pbs * NS_PER_SEC
        else:
            dt = max(0, now - self.last_ts)
            self.tc = min(self.cbs * NS_PER_SEC, self.tc + self.cir * dt)
            self.tp = min(self.pbs * NS_PER_SEC, self.tp + self.pir * dt)
        self.last_ts = now
        need = nbytes * NS_PER_SEC
        if self.tp < need:
            return MeterColor.RED
        self.tp -= need
        if self.tc < need:
            return MeterColor.YELLOW
        self.tc -= need
        return MeterColor.GREEN


@dataclass
class SamplerCell:
    """Deterministic 1-in-N: fires on the 1st, N+1st, 2N+1st ... test."""
    n: int = 1
    seen: int = 0

    def test(self) -> bool:
        fired = self.seen % self.n == 0
        self.seen += 1
        return fired


class InsertResult(IntEnum):
    NEW = 1
    UPDATED = 2
    DROPPED = 0


@dataclass
class StateTable:
    key_width: int
    capacity: int
    entries: Dict[int, tuple] = field(default_factory=dict)   # key -> (value, insert_ts)
    dropped: int = 0

    def insert(self, key: int, value: int, ts: int) -> InsertResult:
        if key in self.entries:
            # refresh: re-append so the dict stays ordered by insert_ts
            del self.entries[key]
            self.entries[key] = (value & U64, ts)
            return InsertResult.UPDATED
        if len(self.entries) >= self.capacity:
            self.dropped += 1
            logger.debug("state table full (%d entries), insert dropped", self.capacity)
            return InsertResult.DROPPED
        self.entries[key] = (value & U64, ts)
        return InsertResult.NEW

    def delete(self, key: int) -> bool:
        return self.entries.pop(key, None) is not None

    def lookup(self, key: int) -> Optional[int]:
        hit = self.entries.get(key)
        return None if hit is None else hit[0]

    def dump(self) -> List[tuple]:
        return [(k, v, ts) for k, (v, ts) in self.entries.items()]


@dataclass
class TimerEntry:
    timer_id: int
    interval: int
    mode: TimerMode
    linked_slot: int
    armed_at: int
    next_fire: int
    fired: int = 0


class CounterReading(NamedTuple):
    value: int
    unit: CounterUnit
    read_ts: int


class ClassStats(NamedTuple):
    capacity: int
    allocated: int
    free: int


class ResourcePool:
    def __init__(self, capacities: PoolCapacities, clock):
        self.capacities = capacities
        self.clock = clock
        self._cells: Dict[ResourceClass, dict] = {cls: {} for cls in ResourceClass}
        # (next_fire, timer_id); entries whose timer moved on or went away are skipped lazily
        self._due: List[Tuple[int, int]] = []

    def capacity(self, cls: ResourceClass) -> int:
        return {
            ResourceClass.COUNTER: self.capacities.counters,
            ResourceClass.METER: self.capacities.meters,
            ResourceClass.REGISTER: self.capacities.registers,
            ResourceClass.STATE_TABLE: self.capacities.state_tables,
            ResourceClass.TIMER: self.capacities.timers,
            ResourceClass.SAMPLER: self.capacities.samplers,
        }[cls]

    # ---------------- allocation -----------------

    def peek_free(self, cls: ResourceClass, n: int = 1, exclude: Sequence[int] = ()) -> List[int]:
        """The next `n` indices alloc() would hand out (skipping `exclude`)."""
        used = self._cells[cls]
        out = []
        index = 0
        cap = self.capacity(cls)
        while len(out) < n and index < cap:
            if index not in used and index not in exclude:
                out.append(index)
            index += 1
        if len(out) < n:
            raise PoolExhausted(f"{CLASS_NAMES[cls]} pool exhausted ({cap} allocated)")
        return out

    def alloc(self, cls: ResourceClass, params: Sequence[int] = (), index: Optional[int] = None) -> Handle:
        if cls == ResourceClass.TIMER:
            raise ValueError("timers are allocated through set_timer")
        if index is None:
            index = self.peek_free(cls)[0]
        elif index in self._cells[cls]:
            raise PoolExhausted(f"{CLASS_NAMES[cls]}:{index} already allocated")
        elif not 0 <= index < self.capacity(cls):
            raise PoolExhausted(f"{CLASS_NAMES[cls]}:{index} outside pool capacity")
        self._cells[cls][index] = self._new_cell(cls, list(params))
        handle = Handle(cls, index)
        logger.debug("allocated %s", handle)
        return handle

    def _new_cell(self, cls: ResourceClass, params: list):
        def p(i, default=0):
            return params[i] if len(params) > i else default

        if cls == ResourceClass.COUNTER:
            return CounterCell(0, CounterUnit(p(0)))
        if cls == ResourceClass.METER:
            return MeterCell(cir=p(0), cbs=p(1), pir=p(2), pbs=p(3))
        if cls == ResourceClass.REGISTER:
            return RegisterCell(p(0) & U64)
        if cls == ResourceClass.STATE_TABLE:
            return StateTable(key_width=p(0, 64), capacity=p(1) or self.capacities.state_table_entries)
        if cls == ResourceClass.SAMPLER:
            return SamplerCell(n=max(1, p(0, 1)))
        raise ValueError(f"unknown resource class {cls}")

    def release(self, handle: Handle) -> None:
        cells = self._cells[handle.cls]
        if handle.index not in cells:
            raise NoSuchHandle(str(handle))
        # the cell object is dropped; the next alloc builds a zeroed one
        del cells[handle.index]
        logger.debug("released %s", handle)

    def put(self, handle: Handle, cell) -> None:
        """Replace a live cell wholesale (used to commit staged action effects)."""
        if handle.index not in self._cells[handle.cls]:
            raise NoSuchHandle(str(handle))
        self._cells[handle.cls][handle.index] = cell

    def is_live(self, handle: Handle) -> bool:
        return handle.index in self._cells[handle.cls]

    def get(self, handle: Handle):
        try:
            return self._cells[handle.cls][handle.index]
        except KeyError:
            raise NoSuchHandle(str(handle)) from None

    def live_handles(self) -> List[Handle]:
        return [Handle(cls, i) for cls in ResourceClass for i in sorted(self._cells[cls])]

    # ---------------- pull-mode reads -----------------

    def read_counter(self, handle: Handle) -> CounterReading:
        if handle.cls != ResourceClass.COUNTER:
            raise NoSuchHandle(f"{handle} is not a counter")
        cell = self.get(handle)
        return CounterReading(cell.value, cell.unit, self.clock.now())

    # ---------------- state tables -----------------

    def stb(self, handle: Handle) -> StateTable:
        if handle.cls != ResourceClass.STATE_TABLE:
            raise NoSuchHandle(f"{handle} is not a state table")
        return self.get(handle)

    def stb_insert(self, handle: Handle, key: int, value: int) -> InsertResult:
        return self.stb(handle).insert(key, value, self.clock.now())

    def stb_delete(self, handle: Handle, key: int) -> bool:
        return self.stb(handle).delete(key)

    def stb_lookup(self, handle: Handle, key: int) -> Optional[int]:
        return self.stb(handle).lookup(key)

    def stb_dump(self, handle: Handle) -> List[tuple]:
        return self.stb(handle).dump()

    # ---------------- timers -----------------

    def set_timer(self, interval: int, mode: TimerMode, linked_slot: int,
                  index: Optional[int] = None) -> Handle:
        if interval <= 0:
            raise ValueError("timer interval must be positive")
        if index is None:
            index = self.peek_free(ResourceClass.TIMER)[0]
        elif index in self._cells[ResourceClass.TIMER] or index >= self.capacity(ResourceClass.TIMER):
            raise PoolExhausted(f"timer:{index} unavailable")
        now = self.clock.now()
        self._cells[ResourceClass.TIMER][index] = TimerEntry(
            timer_id=index, interval=interval, mode=TimerMode(mode),
            linked_slot=linked_slot, armed_at=now, next_fire=now + interval,
        )
        heapq.heappush(self._due, (now + interval, index))
        return Handle(ResourceClass.TIMER, index)

    def cancel_timer(self, timer_id: int) -> TimerEntry:
        entry = self._cells[ResourceClass.TIMER].pop(timer_id, None)
        if entry is None:
            raise NoSuchTimer(f"timer:{timer_id}")
        return entry

    def restore_timer(self, entry: TimerEntry) -> Handle:
        """Re-arm a cancelled timer exactly as it was (rollback of a cancel)."""
        timers = self._cells[ResourceClass.TIMER]
        if entry.timer_id in timers:
            raise PoolExhausted(f"timer:{entry.timer_id} unavailable")
        timers[entry.timer_id] = TimerEntry(**vars(entry))
        heapq.heappush(self._due, (entry.next_fire, entry.timer_id))
        return Handle(ResourceClass.TIMER, entry.timer_id)

    def timers(self) -> List[TimerEntry]:
        return [self._cells[ResourceClass.TIMER][i] for i in sorted(self._cells[ResourceClass.TIMER])]

    def _head(self) -> Optional[TimerEntry]:
        timers = self._cells[ResourceClass.TIMER]
        while self._due:
            fire, timer_id = self._due[0]
            entry = timers.get(timer_id)
            if entry is not None and entry.next_fire == fire:
                return entry
            heapq.heappop(self._due)
        return None

    def next_due(self) -> Optional[int]:
        head = self._head()
        return None if head is None else head.next_fire

    def pop_due(self, to: int) -> Optional[TimerEntry]:
        """Earliest timer due at or before `to`, ties broken by timer_id."""
        entry = self._head()
        if entry is None or entry.next_fire > to:
            return None
        heapq.heappop(self._due)
        fire_at = entry.next_fire
        entry.fired += 1
        if entry.mode == TimerMode.PERIODIC:
            entry.next_fire = entry.armed_at + (entry.fired + 1) * entry.interval
            heapq.heappush(self._due, (entry.next_fire, entry.timer_id))
        else:
            del self._cells[ResourceClass.TIMER][entry.timer_id]
        return TimerEntry(entry.timer_id, entry.interval, entry.mode, entry.linked_slot,
                          entry.armed_at, fire_at, entry.fired)

    # ---------------- accounting -----------------

    def stats(self) -> Dict[str, ClassStats]:
        out = {}
        for cls in ResourceClass:
            cap = self.capacity(cls)
            allocated = len(self._cells[cls])
            out[CLASS_NAMES[cls]] = ClassStats(cap, allocated, cap - allocated)
        return out

    def snapshot(self) -> dict:
        """Canonical, JSON-friendly dump of every live cell."""
        snap = {}
        for cls in ResourceClass:
            cells = {}
            for index in sorted(self._cells[cls]):
                cells[str(index)] = _cell_dump(self._cells[cls][index])
            snap[CLASS_NAMES[cls]] = cells
        snap["stats"] = {name: list(s) for name, s in self.stats().items()}
        return snap

    def clear(self) -> None:
        for cls in ResourceClass:
            self._cells[cls].clear()
        self._due.clear()


def _cell_dump(cell) -> dict:
    if isinstance(cell, StateTable):
        return {
            "key_width": cell.key_width,
            "capacity": cell.capacity,
            "dropped": cell.dropped,
            "entries": [[hex(k), v, ts] for k, v, ts in cell.dump()],
        }
    if isinstance(cell, TimerEntry):
        return {
            "interval": cell.interval, "mode": int(cell.mode), "slot": cell.linked_slot,
            "armed_at": cell.armed_at, "next_fire": cell.next_fire,
        }
    out = {}
    for name, value in vars(cell).items():
        out[name] = int(value) if isinstance(value, IntEnum) else value
    return out
