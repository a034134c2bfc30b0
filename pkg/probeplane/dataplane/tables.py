from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from probeplane.dataplane.packet import FieldRef, MatchKey, Space, read_bits
from probeplane.errors import ConfigError, KeyWidthMismatch


@dataclass(frozen=True)
class FlowEntry:
    entry_id: int
    key: MatchKey
    priority: int
    action_slot: int
    params: bytes = b""


@dataclass(frozen=True)
class TableDef:
    table_id: int
    key_spec: Tuple[FieldRef, ...]
    miss_slot: int
    writable_by_actions: bool = False

    def __post_init__(self):
        object.__setattr__(self, "key_spec", tuple(self.key_spec))
        if not self.key_spec:
            raise ConfigError(f"table {self.table_id} has an empty key_spec")
        for ref in self.key_spec:
            if ref.space == Space.PARAMS:
                raise ConfigError(f"table {self.table_id}: key field {ref} cannot come from params")


@dataclass
class FlowTable:
    table_id: int
    key_spec: Tuple[FieldRef, ...]
    miss_slot: int
    writable_by_actions: bool = False
    next_table: Optional[int] = None
    entries: Dict[int, FlowEntry] = field(default_factory=dict)
    _order: Optional[List[FlowEntry]] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_def(cls, table_def: TableDef, next_table: Optional[int] = None) -> "FlowTable":
        return cls(table_def.table_id, table_def.key_spec, table_def.miss_slot,
                   table_def.writable_by_actions, next_table)

    @property
    def key_width(self) -> int:
        return sum(ref.length_bits for ref in self.key_spec)

    @property
    def packet_extent_bytes(self) -> int:
        ends = [ref.end_bits for ref in self.key_spec if ref.space == Space.PACKET]
        return (max(ends) + 7) // 8 if ends else 0

    def extract_key(self, packet: bytes, metadata: bytes) -> int:
        key = 0
        for ref in self.key_spec:
            data = packet if ref.space == Space.PACKET else metadata
            key = (key << ref.length_bits) | read_bits(data, ref.offset_bits, ref.length_bits)
        return key

    def ordered(self) -> List[FlowEntry]:
        if self._order is None:
            self._order = sorted(self.entries.values(), key=lambda e: (-e.priority, e.entry_id))
        return self._order

    def lookup(self, key_bits: int, width: Optional[int] = None) -> Optional[FlowEntry]:
        """Highest priority match, ties broken by lowest entry_id."""
        if width is not None and width != self.key_width:
            raise KeyWidthMismatch(f"table {self.table_id} keys are {self.key_width} bits, got {width}")
        for entry in self.ordered():
            if entry.key.matches(key_bits):
                return entry
        return None

    def peek_entry_ids(self, n: int = 1, exclude=()) -> List[int]:
        out, i = [], 0
        while len(out) < n:
            if i not in self.entries and i not in exclude:
                out.append(i)
            i += 1
        return out

    def put(self, entry: FlowEntry) -> None:
        self.entries[entry.entry_id] = entry
        self._order = None

    def remove(self, entry_id: int) -> FlowEntry:
        entry = self.entries.pop(entry_id)
        self._order = None
        return entry

    def find(self, key: MatchKey, priority: int) -> Optional[FlowEntry]:
        for entry in self.entries.values():
            if entry.key == key and entry.priority == priority:
                return entry
        return None

    def covering(self, key: MatchKey) -> Optional[FlowEntry]:
        """Highest-priority entry whose match covers every key matched by `key`."""
        for entry in self.ordered():
            if entry.key.covers(key):
                return entry
        return None

    def overlapping(self, key: MatchKey) -> List[FlowEntry]:
        return [e for e in self.ordered() if e.key.intersects(key)]

    def snapshot(self) -> dict:
        return {
            "key": [str(r) for r in self.key_spec],
            "miss": self.miss_slot,
            "next": self.next_table,
            "writable": self.writable_by_actions,
            "entries": [
                {"id": e.entry_id, "key": str(e.key), "priority": e.priority,
                 "slot": e.action_slot, "params": e.params.hex()}
                for e in sorted(self.entries.values(), key=lambda e: e.entry_id)
            ],
        }
