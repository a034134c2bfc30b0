import pytest

from probeplane.controller.collector import Controller
from probeplane.controller.query import Query
from probeplane.controller.topology import Topology
from probeplane.harness.simnet import SimNetwork

MS = 1_000_000


def two_hop(latency_ns):
    return Topology.from_dict({
        "devices": [{"id": "A", "ports": [1, 2], "pipeline": "pipeline_line.json"},
                    {"id": "B", "ports": [1, 2], "pipeline": "pipeline_line.json"}],
        "links": [{"a": "A", "port_a": 2, "b": "B", "port_b": 1, "latency_ns": latency_ns}],
    })


def latency_query(mode="continuous", **params):
    return Query.from_dict({
        "query_id": "lat", "kind": "link_latency", "mode": mode,
        "target": {"from": {"device": "A", "port": 2}, "to": {"device": "B", "port": 1}},
        "params": params,
    })


@pytest.mark.parametrize("latency_ns", [0, 1 * MS, 5 * MS, 50 * MS])
async def test_measured_latency_is_exact(latency_ns):
    topology = two_hop(latency_ns)
    net = SimNetwork(topology)
    controller = Controller(topology, hub=net.hub, clock=net.clock)
    await controller.connect(net.addresses())

    handle = await controller.run_query(latency_query(interval=MS))
    net.run_until(latency_ns + 5 * MS)
    results = await controller.collect(handle.handle_id)

    assert results.values("latency_ns") == [latency_ns] * 5
    assert results.rows[0].key == {"from": "A.2", "to": "B.1"}
    # probe packets end at the sink and never leave the network
    assert net.probe_packets_emitted() == 0
    assert net.log.probe_drops == 5
    assert net.conserved()
    await controller.close()


async def test_one_shot_latency_sends_a_single_probe():
    topology = two_hop(2 * MS)
    net = SimNetwork(topology)
    controller = Controller(topology, hub=net.hub, clock=net.clock)
    await controller.connect(net.addresses())

    handle = await controller.run_query(latency_query(mode="one_shot", interval=MS))
    net.run_until(20 * MS)
    results = await controller.collect(handle.handle_id)

    assert results.complete
    assert results.values("latency_ns") == [2 * MS]
    assert net.counts.generated == 1
    assert all(not agent.runtime.probes for agent in net.agents.values())
    await controller.close()


async def test_rate_sets_the_probe_interval():
    topology = two_hop(0)
    net = SimNetwork(topology)
    controller = Controller(topology, hub=net.hub, clock=net.clock)
    await controller.connect(net.addresses())

    handle = await controller.run_query(latency_query(rate=100))
    net.run_until(100 * MS)
    results = await controller.collect(handle.handle_id)
    assert len(results.rows) == 10
    await controller.close()
