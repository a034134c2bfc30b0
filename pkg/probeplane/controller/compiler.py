"""
Query compilation: a Query plus the topology becomes a QueryPlan, the set
of probes to deploy (per device), the order they must go live in, how
their reports and poll reads reduce to result rows, and the poll schedule.

Compilation is pure and deterministic; `QueryPlan.canonical()` is
byte-identical for the same query and topology.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from probeplane.controller.query import Query, QueryKind, QueryMode
from probeplane.controller.topology import Topology
from probeplane.errors import QuerySpecError, UnresolvedSelector, UnsupportedKind
from probeplane.probes.catalog import NS_PER_SEC
from probeplane.probes.spec import AttachKind, AttachPoint, ProbeKind, ProbeSpec
from probeplane.utils.json_utils import canonical_dumps

logger = logging.getLogger(__name__)

POST_OPS = ("subtract", "sum", "rate", "count", "dump")


@dataclass(frozen=True)
class PlannedProbe:
    name: str
    device: str
    spec: ProbeSpec
    fields: Tuple[str, ...] = ()  # names of the values its reports carry

    def to_dict(self) -> dict:
        return {"name": self.name, "device": self.device, "spec": self.spec.to_dict(),
                "fields": list(self.fields)}


@dataclass(frozen=True)
class PostProcess:
    """
    One reduction. `source` is "report" (values pushed by `probe`) or
    "poll" (resource values read from `probe`).
        subtract  inputs (a, b) -> a - b
        sum       running total of inputs[0]
        rate      per second: successive poll reads, or a pushed count over interval_ns
        count     number of reports seen
        dump      the inputs as they are
    """
    op: str
    probe: str
    inputs: Tuple[str, ...]
    output: str = "value"
    source: str = "report"
    interval_ns: int = 0

    def __post_init__(self):
        if self.op not in POST_OPS:
            raise QuerySpecError(f"unknown post-processing op {self.op!r}")
        if self.op == "subtract" and len(self.inputs) != 2:
            raise QuerySpecError("subtract takes exactly two inputs")

    def to_dict(self) -> dict:
        return {"op": self.op, "probe": self.probe, "inputs": list(self.inputs), "output": self.output,
                "source": self.source, "interval_ns": self.interval_ns}


@dataclass(frozen=True)
class PollSchedule:
    probe: str
    interval_ns: int
    resources: Tuple[str, ...] = ("counter",)

    def to_dict(self) -> dict:
        return {"probe": self.probe, "interval_ns": self.interval_ns, "resources": list(self.resources)}


@dataclass
class QueryPlan:
    query: Query
    probes: List[PlannedProbe]
    order: List[Tuple[str, str]] = field(default_factory=list)  # (before, after)
    post: List[PostProcess] = field(default_factory=list)
    poll: Optional[PollSchedule] = None
    key: Dict[str, object] = field(default_factory=dict)

    def probe(self, name: str) -> PlannedProbe:
        for p in self.probes:
            if p.name == name:
                return p
        raise QuerySpecError(f"plan {self.query.query_id} has no probe {name!r}")

    @property
    def devices(self) -> List[str]:
        return sorted({p.device for p in self.probes})

    def validate(self) -> "QueryPlan":
        names = [p.name for p in self.probes]
        if len(set(names)) != len(names):
            raise QuerySpecError("probe names in a plan must be unique")
        for before, after in self.order:
            self.probe(before)
            self.probe(after)
        self.deploy_order()
        for post in self.post:
            probe = self.probe(post.probe)
            if post.source == "report":
                missing = [i for i in post.inputs if i not in probe.fields]
                if missing:
                    raise QuerySpecError(f"{probe.name} does not report {missing}")
            elif self.poll is None or self.poll.probe != post.probe:
                raise QuerySpecError(f"{post.op} reads {post.probe} but nothing polls it")
        return self

    def deploy_order(self) -> List[PlannedProbe]:
        """Probes in a topological order of the constraints; ties keep declaration order."""
        waiting = {p.name: {b for b, a in self.order if a == p.name} for p in self.probes}
        out: List[PlannedProbe] = []
        while waiting:
            ready = [p for p in self.probes if p.name in waiting and not waiting[p.name]]
            if not ready:
                raise QuerySpecError(f"order constraints of {self.query.query_id} form a cycle")
            nxt = ready[0]
            out.append(nxt)
            del waiting[nxt.name]
            for deps in waiting.values():
                deps.discard(nxt.name)
        return out

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "probes": [p.to_dict() for p in self.probes],
            "order": [list(o) for o in self.order],
            "post": [p.to_dict() for p in self.post],
            "poll": self.poll.to_dict() if self.poll else None,
            "key": self.key,
        }

    def canonical(self) -> str:
        return canonical_dumps(self.to_dict())


# ---------------- selector resolution -----------------

def _device(query: Query, topology: Topology, target: Optional[dict] = None) -> str:
    target = query.target if target is None else target
    if "device" not in target:
        raise UnresolvedSelector(f"{query.query_id}: target needs a device")
    return topology.device(str(target["device"])).device_id


def _tables(topology: Topology, device: str) -> Optional[set]:
    pipeline = topology.device(device).pipeline
    if pipeline is None:
        return None
    return {int(t["id"]) for t in pipeline.get("tables", [])}


def _attach(query: Query, topology: Topology, device: str, *, allow_table: bool = True) -> AttachPoint:
    t = query.target
    if allow_table and ("key" in t or "table" in t):
        table = int(t.get("table", 0))
        known = _tables(topology, device)
        if known is not None and table not in known:
            raise UnresolvedSelector(f"{device} has no table {table}")
        if "key" in t:
            return AttachPoint(AttachKind.TABLE_ENTRY, table=table, key=str(t["key"]), priority=t.get("priority"))
        return AttachPoint(AttachKind.TABLE_MISS, table=table)
    if "port" in t:
        return AttachPoint(AttachKind.PORT_INGRESS, port=topology.port(device, t["port"]))
    raise UnresolvedSelector(f"{query.query_id}: target needs a port" + (" or a table key" if allow_table else ""))


def _endpoint(query: Query, topology: Topology, name: str) -> Tuple[str, int]:
    end = query.target.get(name)
    if not isinstance(end, dict) or "device" not in end or "port" not in end:
        raise UnresolvedSelector(f"{query.query_id}: link target needs '{name}': {{device, port}}")
    device = _device(query, topology, end)
    return device, topology.port(device, end["port"])


def _interval(query: Query, name: str, default: int = NS_PER_SEC) -> int:
    value = int(query.param(name, default))
    if value <= 0:
        raise QuerySpecError(f"{query.query_id}: {name} must be positive")
    return value


def _spec(kind: ProbeKind, attach: AttachPoint, **params) -> ProbeSpec:
    return ProbeSpec(kind, attach, {k: v for k, v in params.items() if v is not None})


# ---------------- per-kind compilation -----------------

def _flow_stats(q: Query, topo: Topology) -> QueryPlan:
    device = _device(q, topo)
    spec = _spec(ProbeKind.COUNTER, _attach(q, topo, device), unit=q.param("unit"), condition=q.param("condition"))
    poll = PollSchedule("flow", _interval(q, "poll_interval"))
    if q.mode == QueryMode.ONE_SHOT:
        post = [PostProcess("dump", "flow", ("counter",), source="poll")]
    else:
        post = [PostProcess("rate", "flow", ("counter",), "rate", source="poll")]
    return QueryPlan(q, [PlannedProbe("flow", device, spec)], post=post, poll=poll)


def _port_load(q: Query, topo: Topology) -> QueryPlan:
    device = _device(q, topo)
    interval = _interval(q, "interval")
    spec = _spec(ProbeKind.TIMER_POLL, _attach(q, topo, device, allow_table=False),
                 interval=interval, threshold=q.param("threshold"), unit=q.param("unit"))
    probe = PlannedProbe("load", device, spec, ("port", "count", "ts"))
    post = [PostProcess("rate", "load", ("count",), "pps", interval_ns=interval)]
    return QueryPlan(q, [probe], post=post)


def _half_open_count(q: Query, topo: Topology) -> QueryPlan:
    device = _device(q, topo)
    attach = _attach(q, topo, device)
    # the alarm fires on the half-open count reaching threshold
    fsm = _spec(ProbeKind.FSM_HALF_OPEN, attach, capacity=q.param("capacity"),
                alarm=int(q.param("threshold", 100)))
    probes = [PlannedProbe("fsm", device, fsm, ("half_open", "ts"))]
    post = [
        PostProcess("dump", "fsm", ("counter",), "half_open", source="poll"),
        PostProcess("dump", "fsm", ("half_open", "ts")),
    ]
    return QueryPlan(q, probes, post=post, poll=PollSchedule("fsm", _interval(q, "poll_interval")))


def _flow_duration(q: Query, topo: Topology) -> QueryPlan:
    device = _device(q, topo)
    spec = _spec(ProbeKind.FLOW_DURATION, _attach(q, topo, device), start=q.param("start"), end=q.param("end"))
    probe = PlannedProbe("duration", device, spec, ("start_ts", "end_ts"))
    return QueryPlan(q, [probe], post=[PostProcess("subtract", "duration", ("end_ts", "start_ts"), "duration_ns")])


def _queue_health(q: Query, topo: Topology) -> QueryPlan:
    device = _device(q, topo)
    port = topo.port(device, q.target.get("port", -1))
    spec = _spec(ProbeKind.QUEUE_WATERMARK, AttachPoint(AttachKind.QUEUE, port=port),
                 low=q.param("low"), high=q.param("high"))
    fields = ("mark", "direction", "depth", "ts")
    probe = PlannedProbe("watermark", device, spec, fields)
    return QueryPlan(q, [probe], post=[PostProcess("dump", "watermark", fields)])


def _link_latency(q: Query, topo: Topology) -> QueryPlan:
    src, src_port = _endpoint(q, topo, "from")
    dst, dst_port = _endpoint(q, topo, "to")
    topo.link_between(src, src_port, dst, dst_port)
    sink = _spec(ProbeKind.LATENCY_SINK, AttachPoint(AttachKind.PORT_INGRESS, port=dst_port))
    source = _spec(ProbeKind.LATENCY_SOURCE, AttachPoint(AttachKind.TIMER), port=src_port,
                   rate=q.param("rate"), interval=q.param("interval"),
                   one_shot=True if q.mode == QueryMode.ONE_SHOT else None)
    probes = [
        PlannedProbe("sink", dst, sink, ("sent_ts", "recv_ts")),
        PlannedProbe("source", src, source),
    ]
    post = [PostProcess("subtract", "sink", ("recv_ts", "sent_ts"), "latency_ns")]
    key = {"from": f"{src}.{src_port}", "to": f"{dst}.{dst_port}"}
    return QueryPlan(q, probes, order=[("sink", "source")], post=post, key=key)


def _filtered_mirror(q: Query, topo: Topology) -> QueryPlan:
    device = _device(q, topo)
    digest = [str(f) for f in q.param("digest_fields", [])]
    spec = _spec(ProbeKind.FILTER, _attach(q, topo, device), digest_fields=digest,
                 sample_n=q.param("sample_n"), condition=q.param("condition"))
    fields = tuple(digest)
    return QueryPlan(q, [PlannedProbe("mirror", device, spec, fields)],
                     post=[PostProcess("count", "mirror", (), "mirrored"), PostProcess("dump", "mirror", fields)])


_COMPILERS = {
    QueryKind.FLOW_STATS: _flow_stats,
    QueryKind.PORT_LOAD: _port_load,
    QueryKind.HALF_OPEN_COUNT: _half_open_count,
    QueryKind.FLOW_DURATION: _flow_duration,
    QueryKind.QUEUE_HEALTH: _queue_health,
    QueryKind.LINK_LATENCY: _link_latency,
    QueryKind.FILTERED_MIRROR: _filtered_mirror,
}


def compile_query(query: Query, topology: Topology) -> QueryPlan:
    compiler = _COMPILERS.get(query.kind)
    if compiler is None:
        # path tracing needs in-band packet modification
        raise UnsupportedKind(f"query kind {query.kind.value} is not supported")
    plan = compiler(query, topology)
    if not plan.key:
        plan.key = {k: v for k, v in sorted(query.target.items())}
    plan.validate()
    logger.debug("compiled %s into %d probes", query.query_id, len(plan.probes))
    return plan
