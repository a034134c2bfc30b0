import pytest

from probeplane.controller.compiler import PostProcess, QueryPlan, compile_query
from probeplane.controller.query import Query, ResultRow, ResultSet
from probeplane.controller.topology import Topology
from probeplane.errors import ConfigError, QuerySpecError, UnresolvedSelector, UnsupportedKind
from probeplane.probes.spec import AttachKind, ProbeKind

EAST = "0x0a000000/0xff000000"


def query(kind, target, mode="continuous", **params):
    return Query.from_dict({"query_id": f"q-{kind}", "kind": kind, "mode": mode, "target": target, "params": params})


LINK = {"from": {"device": "A", "port": 2}, "to": {"device": "B", "port": 1}}


def test_link_latency_plan(topology):
    plan = compile_query(query("link_latency", LINK, rate=100), topology)
    assert [(p.name, p.device, p.spec.kind) for p in plan.deploy_order()] == [
        ("sink", "B", ProbeKind.LATENCY_SINK), ("source", "A", ProbeKind.LATENCY_SOURCE)]
    assert plan.probe("source").spec.params == {"port": 2, "rate": 100}
    assert plan.probe("sink").spec.attach.port == 1
    assert plan.post == [PostProcess("subtract", "sink", ("recv_ts", "sent_ts"), "latency_ns")]
    assert plan.key == {"from": "A.2", "to": "B.1"}


def test_one_shot_latency_fires_once(topology):
    plan = compile_query(query("link_latency", LINK, mode="one_shot"), topology)
    assert plan.probe("source").spec.params["one_shot"] is True


def test_latency_needs_a_real_link(topology):
    with pytest.raises(UnresolvedSelector):
        compile_query(query("link_latency", {"from": {"device": "A", "port": 2},
                                             "to": {"device": "C", "port": 1}}), topology)


def test_compilation_is_deterministic(topology):
    q = query("half_open_count", {"device": "B", "key": EAST}, threshold=5)
    assert compile_query(q, topology).canonical() == compile_query(q, topology).canonical()


def test_flow_stats_polls_a_counter(topology):
    continuous = compile_query(query("flow_stats", {"device": "A", "key": EAST}, poll_interval=500), topology)
    probe = continuous.probes[0]
    assert probe.spec.attach.kind == AttachKind.TABLE_ENTRY
    assert (continuous.poll.probe, continuous.poll.interval_ns) == ("flow", 500)
    assert [p.op for p in continuous.post] == ["rate"]
    one_shot = compile_query(query("flow_stats", {"device": "A", "port": 1}, mode="one_shot"), topology)
    assert one_shot.probes[0].spec.attach.kind == AttachKind.PORT_INGRESS
    assert [p.op for p in one_shot.post] == ["dump"]


def test_half_open_count_alarms_on_the_fsm_counter(topology):
    plan = compile_query(query("half_open_count", {"device": "B", "port": 1}, threshold=5), topology)
    assert [p.spec.kind for p in plan.probes] == [ProbeKind.FSM_HALF_OPEN]
    assert plan.probe("fsm").spec.params["alarm"] == 5
    assert plan.probe("fsm").fields == ("half_open", "ts")
    assert plan.poll.probe == "fsm"


def test_other_kinds_compile(topology):
    kinds = {
        "port_load": ({"device": "C", "port": 1}, ProbeKind.TIMER_POLL),
        "queue_health": ({"device": "A", "port": 2}, ProbeKind.QUEUE_WATERMARK),
        "flow_duration": ({"device": "A", "key": EAST}, ProbeKind.FLOW_DURATION),
        "filtered_mirror": ({"device": "A", "port": 1}, ProbeKind.FILTER),
    }
    for kind, (target, probe_kind) in kinds.items():
        plan = compile_query(query(kind, target), topology)
        assert [p.spec.kind for p in plan.probes] == [probe_kind]


def test_path_trace_is_unsupported(topology):
    with pytest.raises(UnsupportedKind):
        compile_query(query("path_trace", {"device": "A"}), topology)


@pytest.mark.parametrize("target", [{"port": 1}, {"device": "Z", "port": 1}, {"device": "A", "port": 7},
                                    {"device": "A", "table": 3, "key": EAST}, {"device": "A"}])
def test_unresolved_targets(topology, target):
    with pytest.raises(UnresolvedSelector):
        compile_query(query("flow_stats", target), topology)


def test_bad_queries():
    with pytest.raises(QuerySpecError):
        Query.from_dict({"query_id": "x", "kind": "telepathy"})
    with pytest.raises(QuerySpecError):
        Query.from_dict({"kind": "flow_stats"})
    with pytest.raises(QuerySpecError):
        Query.from_json("{not json")
    with pytest.raises(QuerySpecError):
        PostProcess("subtract", "p", ("only",))


def test_plans_reject_order_cycles(topology):
    plan = compile_query(query("link_latency", LINK), topology)
    cyclic = QueryPlan(plan.query, plan.probes, order=[("sink", "source"), ("source", "sink")])
    with pytest.raises(QuerySpecError):
        cyclic.validate()


def test_result_rows_stay_time_ordered():
    results = ResultSet("q")
    for ts in (5, 9, 7):
        results.append(ResultRow(ts, {}, {"v": ts}))
    assert results.values("v") == [5, 7, 9]
    results.complete = True
    with pytest.raises(QuerySpecError):
        results.append(ResultRow(10, {}, {}))
    assert results.export().count("\n") == 3


def test_bad_topology_document():
    with pytest.raises(ConfigError):
        Topology.from_dict({"devices": [{"id": "A", "ports": [1]}, {"id": "A", "ports": [1]}], "links": []})
