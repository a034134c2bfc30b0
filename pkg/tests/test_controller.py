import pytest

from probeplane.controller.collector import Controller
from probeplane.controller.query import Query
from probeplane.controller.topology import Topology
from probeplane.errors import AdmissionRejected, DeployFailed, NoSuchQuery
from probeplane.harness.simnet import SimNetwork

from conftest import tcp_frame

EAST = "0x0a000000/0xff000000"
MS = 1_000_000


def query(kind, target, query_id="q", mode="continuous", **params):
    return Query.from_dict({"query_id": query_id, "kind": kind, "mode": mode, "target": target, "params": params})


def probes_on(net, device):
    return net.agents[device].runtime.probes


def feed(net, device, port, n, start=0, **kw):
    for i in range(n):
        net.inject(start + i * 1000, device, port, tcp_frame(sport=30000 + i, **kw))


async def test_identical_probes_are_shared(network):
    net, controller = network
    q = query("flow_stats", {"device": "A", "key": EAST})
    first = await controller.run_query(q, "ops")
    second = await controller.run_query(q, "audit")
    assert (first.handle_id, second.handle_id) == ("ops/q", "audit/q")
    assert first.probes["flow"].probe_id == second.probes["flow"].probe_id
    (probe,) = probes_on(net, "A").values()
    assert probe.subscribers == {"ops/q", "audit/q"}

    await controller.revoke_query("ops/q")
    assert len(probes_on(net, "A")) == 1
    await controller.revoke_query("audit/q")
    assert probes_on(net, "A") == {}
    assert controller.deployed == {}


async def test_same_app_gets_distinct_handles(network):
    _, controller = network
    q = query("flow_stats", {"device": "A", "port": 1})
    first = await controller.run_query(q, "ops")
    second = await controller.run_query(q, "ops")
    assert second.handle_id == "ops/q#2"
    assert [h["handle"] for h in controller.list_queries()] == [first.handle_id, second.handle_id]


async def test_failed_deploy_undoes_earlier_devices(network):
    net, controller = network
    before = {d: net.devices[d].snapshot() for d in ("A", "B")}
    # the sink on B goes live first, then the source on A fails
    net.devices["A"].inject_fault("load_action")
    link = {"from": {"device": "A", "port": 2}, "to": {"device": "B", "port": 1}}
    with pytest.raises(DeployFailed) as info:
        await controller.run_query(query("link_latency", link))
    assert info.value.device == "A"
    assert {d: net.devices[d].snapshot() for d in ("A", "B")} == before
    assert controller.deployed == {} and controller.handles == {}


async def test_admission_is_checked_before_anything_installs():
    doc = {
        "devices": [{"id": "A", "ports": [1, 2], "pipeline": "pipeline_line.json"},
                    {"id": "B", "ports": [1, 2], "pipeline": "pipeline_line.json",
                     "caps": {"floor_pps": 2e7}}],
        "links": [{"a": "A", "port_a": 2, "b": "B", "port_b": 1, "latency_ns": 10}],
    }
    topology = Topology.from_dict(doc)
    net = SimNetwork(topology)
    controller = Controller(topology, hub=net.hub, clock=net.clock)
    await controller.connect(net.addresses())
    link = {"from": {"device": "A", "port": 2}, "to": {"device": "B", "port": 1}}
    with pytest.raises(AdmissionRejected) as info:
        await controller.run_query(query("link_latency", link))
    assert info.value.device == "B"
    assert probes_on(net, "A") == {} and probes_on(net, "B") == {}
    await controller.close()


async def test_one_shot_query_completes_and_retires(network):
    net, controller = network
    handle = await controller.run_query(
        query("flow_stats", {"device": "A", "key": EAST}, mode="one_shot", poll_interval=10 * MS))
    feed(net, "A", 1, 6, dst="10.0.0.7")
    net.run_until(10 * MS)
    assert await controller.poll() == 1
    results = controller.results(handle.handle_id)
    assert results.complete
    assert results.values("counter") == [6]
    assert results.rows[0].key == {"device": "A", "key": EAST}
    assert controller.handles == {}
    assert probes_on(net, "A") == {}
    assert await controller.collect(handle.handle_id) is results


async def test_continuous_flow_rate(network):
    net, controller = network
    handle = await controller.run_query(query("flow_stats", {"device": "A", "port": 1}, poll_interval=10 * MS))
    feed(net, "A", 1, 5, dst="10.0.0.1")
    net.run_until(10 * MS)
    await controller.poll()
    feed(net, "A", 1, 20, start=net.now, dst="10.0.0.1")
    net.run_until(20 * MS)
    await controller.poll()
    rows = controller.results(handle.handle_id).rows
    # the first read only sets the baseline
    assert len(rows) == 1
    assert rows[0].values == {"counter": 25, "rate": pytest.approx(20 / 0.01)}
    assert controller.next_poll_due() == 30 * MS


async def test_port_load_pushes_rates(network):
    net, controller = network
    handle = await controller.run_query(query("port_load", {"device": "B", "port": 1}, interval=10 * MS))
    feed(net, "A", 1, 4, dst="10.0.0.1")
    net.run_until(10 * MS)
    await controller.pump()
    rows = controller.results(handle.handle_id).rows
    assert [r.values for r in rows] == [{"count": 4, "pps": pytest.approx(400.0)}]


async def test_half_open_count_end_to_end(network):
    net, controller = network
    handle = await controller.run_query(
        query("half_open_count", {"device": "A", "key": EAST}, threshold=3, poll_interval=10 * MS))
    feed(net, "A", 1, 4, dst="10.0.0.1", flags="S")
    net.run_until(10 * MS)
    await controller.pump()
    await controller.poll()
    results = controller.results(handle.handle_id)
    assert results.values("half_open")[-1] == 4
    # one alarm, raised when the third flow was left half open
    assert [r.values["half_open"] for r in results.rows if "ts" in r.values] == [3]


async def test_refine_replaces_the_probe(network):
    net, controller = network
    handle = await controller.run_query(query("filtered_mirror", {"device": "A", "port": 1}, sample_n=2))
    refined = await controller.refine_query(
        handle.handle_id, query("filtered_mirror", {"device": "A", "port": 1}, digest_fields=["pkt[240:32]"]))
    assert refined.handle_id == "q/q#2"
    (probe,) = probes_on(net, "A").values()
    assert probe.spec.params == {"digest_fields": ["pkt[240:32]"]}
    feed(net, "A", 1, 3, dst="10.0.0.3")
    net.run_until(MS)
    await controller.pump()
    rows = controller.results(refined.handle_id).rows
    assert [r.values["mirrored"] for r in rows] == [1, 2, 3]
    assert rows[0].values["pkt[240:32]"] == 0x0A000003


async def test_unknown_query_handle(network):
    _, controller = network
    with pytest.raises(NoSuchQuery):
        await controller.revoke_query("nobody/nothing")
    with pytest.raises(NoSuchQuery):
        controller.results("nobody/nothing")
