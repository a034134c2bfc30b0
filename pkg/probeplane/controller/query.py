"""
Application queries and their results.

Query text is JSON:

    {"query_id": "lat-ab", "kind": "link_latency", "mode": "continuous",
     "target": {"from": {"device": "A", "port": 2}, "to": {"device": "B", "port": 1}},
     "params": {"rate": 10}}

Targets per kind:

    flow_stats       device + (table, key[, priority]) or port; params: poll_interval, unit, condition
    port_load        device, port; params: interval, threshold
    half_open_count  device + port or (table, key); params: threshold, poll_interval, capacity
    flow_duration    device + port or (table, key); params: start, end
    queue_health     device, port; params: low, high
    link_latency     from {device, port}, to {device, port}; params: rate or interval
    filtered_mirror  device + port or (table, key); params: digest_fields, sample_n, condition
    path_trace       not supported
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List

from probeplane.errors import QuerySpecError
from probeplane.utils.json_utils import canonical_dumps, json_lines, json_loads


class QueryKind(str, Enum):
    FLOW_STATS = "flow_stats"
    PORT_LOAD = "port_load"
    HALF_OPEN_COUNT = "half_open_count"
    FLOW_DURATION = "flow_duration"
    QUEUE_HEALTH = "queue_health"
    LINK_LATENCY = "link_latency"
    PATH_TRACE = "path_trace"
    FILTERED_MIRROR = "filtered_mirror"


class QueryMode(str, Enum):
    ONE_SHOT = "one_shot"
    CONTINUOUS = "continuous"


@dataclass(frozen=True, eq=False)
class Query:
    query_id: str
    kind: QueryKind
    mode: QueryMode = QueryMode.CONTINUOUS
    target: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", QueryKind(self.kind))
            object.__setattr__(self, "mode", QueryMode(self.mode))
        except ValueError as e:
            raise QuerySpecError(str(e)) from None
        if not self.query_id:
            raise QuerySpecError("query needs a query_id")

    def param(self, name: str, default=None):
        return self.params.get(name, default)

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "kind": self.kind.value, "mode": self.mode.value,
                "target": self.target, "params": self.params}

    def canonical(self) -> str:
        return canonical_dumps(self.to_dict())

    def __eq__(self, other):
        return isinstance(other, Query) and self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.canonical())

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        try:
            return cls(str(d["query_id"]), d["kind"], d.get("mode", QueryMode.CONTINUOUS.value),
                       dict(d.get("target", {})), dict(d.get("params", {})))
        except KeyError as e:
            raise QuerySpecError(f"query is missing {e}") from None

    @classmethod
    def from_json(cls, text: str) -> "Query":
        try:
            return cls.from_dict(json_loads(text))
        except ValueError as e:
            raise QuerySpecError(f"query is not valid JSON: {e}") from None


@dataclass(frozen=True)
class ResultRow:
    ts: int
    key: Dict[str, Any]
    values: Dict[str, Any]

    def to_dict(self) -> dict:
        return {"ts": self.ts, "key": self.key, "values": self.values}


@dataclass
class ResultSet:
    query_id: str
    rows: List[ResultRow] = field(default_factory=list)
    complete: bool = False

    def append(self, row: ResultRow) -> None:
        if self.complete:
            raise QuerySpecError(f"{self.query_id}: one-shot result is already final")
        if self.rows and row.ts < self.rows[-1].ts:
            # reports from different devices may interleave; keep rows time-ordered
            at = len(self.rows)
            while at > 0 and self.rows[at - 1].ts > row.ts:
                at -= 1
            self.rows.insert(at, row)
        else:
            self.rows.append(row)

    def values(self, name: str) -> list:
        return [r.values.get(name) for r in self.rows]

    def to_records(self) -> List[dict]:
        return [{"query_id": self.query_id, **r.to_dict()} for r in self.rows]

    def export(self) -> str:
        """Line-delimited JSON, one record per row."""
        return json_lines(self.to_records())

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "complete": self.complete,
                "rows": [r.to_dict() for r in self.rows]}
