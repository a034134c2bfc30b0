from dataclasses import replace

import pytest

from probeplane.controller.topology import Topology
from probeplane.errors import ScriptError, SeedMismatch
from probeplane.harness.experiments import (
    BenchPoint,
    bench_throughput,
    calibrate,
    compare_baseline,
    curve_frame,
    measure_deploy,
    parse_script,
    run_scenario,
)
from probeplane.harness.traffic import TrafficProfile

MS = 1_000_000


@pytest.fixture
def profile():
    return TrafficProfile(seed=11, device="A", ports=(1,), n_flows=4, packets_per_flow=4, duration_ns=20 * MS)


COUNTER_ON_INGRESS = {"kind": "counter", "attach": {"kind": "port_ingress", "port": 1}}


def test_script_parsing():
    actions = parse_script({"actions": [{"at": 5, "do": "permissive", "device": "A"},
                                        {"at": 1, "do": "enqueue", "device": "A", "port": 1}]})
    assert [(a.at, a.do) for a in actions] == [(1, "enqueue"), (5, "permissive")]
    assert actions[0].args == {"device": "A", "port": 1}


@pytest.mark.parametrize("script", [
    [{"at": 0}],
    [{"at": 0, "do": "teleport"}],
    [{"at": "soon", "do": "permissive"}],
    [{"at": -1, "do": "permissive"}],
    [{"at": 101, "do": "permissive"}],
])
def test_bad_scripts(script):
    with pytest.raises(ScriptError):
        parse_script(script, end_ns=100)


def test_scenarios_are_reproducible(topology, profile):
    script = [{"at": 5 * MS, "do": "probe_install", "device": "A", "spec": COUNTER_ON_INGRESS}]
    first = run_scenario(topology, profile, script)
    second = run_scenario(topology, profile, script)
    assert first.dumps() == second.dumps()
    assert first.timeline == [[5 * MS, "probe_install", "A", 1]]


def test_scenario_conserves_packets(topology, profile):
    record = run_scenario(topology, profile)
    counts = record.counts
    assert counts["injected"] == 16
    assert counts["in_flight"] == 0
    assert (counts["injected"] + counts["generated"]
            == counts["emitted"] + counts["dropped"] + counts["absorbed"] + counts["in_flight"])


def test_probes_leave_forwarding_unchanged(topology, profile):
    baseline = run_scenario(topology, profile)
    probed = run_scenario(topology, profile, [
        {"at": 0, "do": "probe_install", "device": "A", "spec": COUNTER_ON_INGRESS},
        {"at": 0, "do": "probe_install", "device": "B",
         "spec": {"kind": "fsm_half_open", "attach": {"kind": "port_ingress", "port": 1}}},
    ])
    diff = compare_baseline(baseline, probed)
    assert diff.empty
    assert diff.to_dict()["missing"] == []


def test_baselines_need_the_same_seed(topology, profile):
    other = replace(profile, seed=12)
    with pytest.raises(SeedMismatch):
        compare_baseline(run_scenario(topology, profile), run_scenario(topology, other))


def test_query_results_land_in_the_record(topology, profile):
    query = {"query_id": "ld", "kind": "port_load", "target": {"device": "A", "port": 1},
             "params": {"interval": 5 * MS}}
    record = run_scenario(topology, profile, [{"at": 0, "do": "query_run", "query": query}])
    counts = record.rows("ld/ld", "count")
    assert sum(counts) == 16
    assert record.timeline[0] == [0, "query_run", "ld/ld"]


def test_dynamic_deploy_drops_nothing(topology, profile):
    result = measure_deploy(topology, profile, "dynamic")
    assert result.mode == "dynamic"
    assert result.window_ns == 0 and result.dropped == 0
    assert result.latency_s >= 0


def test_static_deploy_takes_the_device_offline(topology, settings):
    busy = TrafficProfile(seed=3, device="A", ports=(1,), n_flows=32, packets_per_flow=32, duration_ns=4 * MS)
    result = measure_deploy(topology, busy, "static")
    assert result.window_ns >= settings.static_min_window_ns
    assert result.dropped > 0


def test_calibration_recovers_a_serial_model():
    base, budget = 1e6, 1e7
    points = [BenchPoint(n, 2 * n, [], 1.0 / (1 / base + 2 * n / budget)) for n in (0, 1, 4, 16)]
    caps = calibrate(points)
    assert caps.base_pps == pytest.approx(base, rel=1e-6)
    assert caps.mem_access_budget_per_sec == pytest.approx(budget, rel=1e-6)


@pytest.mark.slow
def test_throughput_bench_falls_with_probe_count():
    points = bench_throughput(probes_per_packet=(0, 4, 32), runs=3, packets=256)
    assert [p.n_probes for p in points] == [0, 4, 32]
    assert points[0].mem_accesses < points[-1].mem_accesses
    assert points[0].pps > points[-1].pps
    frame = curve_frame(points)
    assert list(frame["n_probes"]) == [0, 4, 32]
    assert "predicted_pps" in frame.columns


EAST_ENTRY = {"kind": "table_entry", "table": 0, "key": "0x0a000000/0xff000000"}
# every catalog kind the line topology can host (it has no egress queues)
MID_RUN_INSTALLS = [
    ("A", {"kind": "counter", "attach": {"kind": "port_ingress", "port": 1}}),
    ("A", {"kind": "threshold_push", "attach": EAST_ENTRY, "params": {"threshold": 100}}),
    ("A", {"kind": "timer_poll", "attach": {"kind": "port_egress", "port": 2}, "params": {"interval": MS}}),
    ("A", {"kind": "fsm_half_open", "attach": {"kind": "port_ingress", "port": 1}, "params": {"alarm": 50}}),
    ("A", {"kind": "flow_duration", "attach": EAST_ENTRY}),
    ("A", {"kind": "filter", "attach": EAST_ENTRY, "params": {"digest_fields": ["pkt[240:32]"], "sample_n": 4}}),
    ("B", {"kind": "latency_sink", "attach": {"kind": "port_ingress", "port": 1}}),
    ("A", {"kind": "latency_source", "attach": {"kind": "timer"}, "params": {"port": 2, "interval": MS}}),
]


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_catalog_installed_mid_run_leaves_forwarding_unchanged(topology, seed):
    busy = TrafficProfile(seed=seed, device="A", ports=(1,), n_flows=1000, packets_per_flow=10,
                          duration_ns=50 * MS, never_acked=0.2)
    script = [{"at": 25 * MS, "do": "probe_install", "device": d, "spec": s} for d, s in MID_RUN_INSTALLS]
    baseline = run_scenario(topology, busy)
    probed = run_scenario(topology, busy, script)
    assert baseline.counts["injected"] == 10_000
    assert len(probed.timeline) == len(MID_RUN_INSTALLS)
    assert compare_baseline(baseline, probed).empty
    assert probed.drops == baseline.drops


def test_dynamic_deploy_beats_static_every_time(settings):
    # three tables and ten action blocks to tear down and reload
    topology = Topology.from_file("topology_static.json")
    for seed in range(10):
        busy = TrafficProfile(seed=seed, device="S", ports=(1,), n_flows=32, packets_per_flow=32, duration_ns=4 * MS)
        dynamic = measure_deploy(topology, busy, "dynamic")
        static = measure_deploy(topology, busy, "static")
        assert dynamic.window_ns == 0 and dynamic.dropped == 0
        # a static deploy is done only once the device is back in service
        assert dynamic.latency_s < max(static.latency_s, static.window_ns / 1e9)
        assert static.window_ns >= settings.static_min_window_ns


@pytest.mark.slow
def test_throughput_curve_follows_the_cost_model():
    points = bench_throughput(probes_per_packet=(1, 2, 4, 8, 16, 32, 64), runs=5, packets=2048)
    pps = [p.pps for p in points]
    # 5% slack for wall-clock jitter between neighbouring points
    assert all(b <= a * 1.05 for a, b in zip(pps, pps[1:]))
    for point in points:
        assert 1 / 1.3 <= point.pps / point.predicted <= 1.3
