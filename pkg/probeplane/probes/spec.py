"""
Declarative probe descriptions. The text form is JSON:

    {"kind": "threshold_push",
     "attach": {"kind": "table_entry", "table": 0, "key": "0x0a000001/0xffffffff", "priority": 10},
     "params": {"threshold": 100, "condition": {"field": "pkt[376:8]", "mask": 2, "value": 2}},
     "extend_overlaps": false}

Parameters per kind are documented in probeplane.probes.catalog.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional

from probeplane.errors import IncompatibleAttachPoint, ProbeSpecError
from probeplane.utils.json_utils import canonical_dumps, json_loads


class ProbeKind(str, Enum):
    COUNTER = "counter"
    THRESHOLD_PUSH = "threshold_push"
    TIMER_POLL = "timer_poll"
    FSM_HALF_OPEN = "fsm_half_open"
    FLOW_DURATION = "flow_duration"
    QUEUE_WATERMARK = "queue_watermark"
    FILTER = "filter"
    LATENCY_SOURCE = "latency_source"
    LATENCY_SINK = "latency_sink"


class AttachKind(str, Enum):
    TABLE_ENTRY = "table_entry"
    TABLE_MISS = "table_miss"
    PORT_INGRESS = "port_ingress"
    PORT_EGRESS = "port_egress"
    QUEUE = "queue"
    TIMER = "timer"


A = AttachKind
COMPATIBLE = {
    ProbeKind.COUNTER: {A.TABLE_ENTRY, A.TABLE_MISS, A.PORT_INGRESS, A.PORT_EGRESS, A.QUEUE},
    ProbeKind.THRESHOLD_PUSH: {A.TABLE_ENTRY, A.TABLE_MISS, A.PORT_INGRESS, A.PORT_EGRESS},
    ProbeKind.TIMER_POLL: {A.TABLE_ENTRY, A.PORT_INGRESS, A.PORT_EGRESS},
    ProbeKind.FSM_HALF_OPEN: {A.TABLE_ENTRY, A.TABLE_MISS, A.PORT_INGRESS},
    ProbeKind.FLOW_DURATION: {A.TABLE_ENTRY, A.PORT_INGRESS},
    ProbeKind.QUEUE_WATERMARK: {A.QUEUE},
    ProbeKind.FILTER: {A.TABLE_ENTRY, A.TABLE_MISS, A.PORT_INGRESS, A.PORT_EGRESS},
    ProbeKind.LATENCY_SOURCE: {A.TIMER},
    ProbeKind.LATENCY_SINK: {A.TABLE_ENTRY, A.PORT_INGRESS},
}


@dataclass(frozen=True)
class AttachPoint:
    kind: AttachKind
    table: Optional[int] = None
    key: Optional[str] = None
    priority: Optional[int] = None
    port: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttachKind(self.kind))
        needs_table = self.kind in (A.TABLE_ENTRY, A.TABLE_MISS)
        needs_port = self.kind in (A.PORT_INGRESS, A.PORT_EGRESS, A.QUEUE)
        if needs_table and self.table is None:
            raise ProbeSpecError(f"{self.kind.value} attach point needs a table")
        if self.kind == A.TABLE_ENTRY and self.key is None:
            raise ProbeSpecError("table_entry attach point needs a key")
        if needs_port and self.port is None:
            raise ProbeSpecError(f"{self.kind.value} attach point needs a port")

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        for name in ("table", "key", "priority", "port"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AttachPoint":
        try:
            return cls(AttachKind(d["kind"]), d.get("table"), d.get("key"), d.get("priority"), d.get("port"))
        except (KeyError, ValueError) as e:
            raise ProbeSpecError(f"bad attach point {d!r}: {e}") from None

    def __str__(self):
        if self.kind == A.TABLE_ENTRY:
            return f"table_entry({self.table}, {self.key}, {self.priority})"
        if self.kind == A.TABLE_MISS:
            return f"table_miss({self.table})"
        if self.kind == A.TIMER:
            return "timer"
        return f"{self.kind.value}({self.port})"


@dataclass(frozen=True, eq=False)
class ProbeSpec:
    kind: ProbeKind
    attach: AttachPoint
    params: Dict[str, Any] = field(default_factory=dict)
    extend_overlaps: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", ProbeKind(self.kind))
        if self.attach.kind not in COMPATIBLE[self.kind]:
            raise IncompatibleAttachPoint(f"{self.kind.value} cannot attach at {self.attach}")

    def param(self, name: str, default=None):
        return self.params.get(name, default)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "attach": self.attach.to_dict(),
            "params": self.params,
            "extend_overlaps": self.extend_overlaps,
        }

    def canonical(self) -> str:
        return canonical_dumps(self.to_dict())

    def __eq__(self, other):
        return isinstance(other, ProbeSpec) and self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.canonical())

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeSpec":
        try:
            kind = ProbeKind(d["kind"])
        except (KeyError, ValueError):
            raise ProbeSpecError(f"unknown probe kind in {d!r}") from None
        return cls(kind, AttachPoint.from_dict(d.get("attach", {"kind": "timer"})),
                   dict(d.get("params", {})), bool(d.get("extend_overlaps", False)))

    @classmethod
    def from_json(cls, text: str) -> "ProbeSpec":
        try:
            return cls.from_dict(json_loads(text))
        except ValueError as e:
            raise ProbeSpecError(f"probe spec is not valid JSON: {e}") from None
