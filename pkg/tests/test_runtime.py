import pytest

from probeplane.dataplane.packet import MatchKey, PacketBuffer
from probeplane.dataplane.ports import EgressQueue
from probeplane.harness.traffic import TrafficProfile, generate
from probeplane.errors import (
    AdmissionRejected,
    CommitFailed,
    HasSubscribers,
    IncompatibleAttachPoint,
    NoCoveringBehavior,
    NoSuchProbe,
    ProbeSpecError,
)
from probeplane.probes.runtime import DnpRuntime, augment
from probeplane.probes.spec import ProbeSpec
from probeplane.vm import DeviceCaps, assemble

EAST = "0x0a000000/0xff000000"


def spec(kind, attach=None, **params):
    return ProbeSpec.from_dict({"kind": kind, "attach": attach or {"kind": "timer"}, "params": params})


def on_east(kind, **params):
    return spec(kind, {"kind": "table_entry", "table": 0, "key": EAST}, **params)


SYN_ONLY = {"field": "pkt[376:8]", "mask": 0x12, "value": 0x02}

ROUND_TRIP_SPECS = [
    on_east("counter"),
    on_east("counter", unit="bytes", condition=SYN_ONLY),
    on_east("threshold_push", threshold=3, report_fields=["pkt[208:32]"]),
    on_east("timer_poll", interval=1000),
    on_east("fsm_half_open"),
    on_east("flow_duration"),
    on_east("filter", digest_fields=["pkt[240:32]"], sample_n=4),
    spec("counter", {"kind": "table_miss", "table": 0}),
    spec("counter", {"kind": "port_ingress", "port": 1}),
    spec("counter", {"kind": "table_entry", "table": 0, "key": "0x0a010000/0xffff0000"}),
    spec("counter", {"kind": "table_entry", "table": 0, "key": "0xac100000/0xfff00000"}),
    spec("queue_watermark", {"kind": "queue", "port": 1}, low=2, high=4),
    spec("latency_source", port=2, interval=5000),
    spec("latency_sink", {"kind": "port_ingress", "port": 1}),
]


@pytest.fixture
def runtime(device):
    device.add_queue(EgressQueue(port=1, capacity=8, low_watermark=2, high_watermark=4))
    return DnpRuntime(device)


def send(device, frame, n, **kw):
    reports = []
    for _ in range(n):
        reports += device.process_packet(PacketBuffer(frame(**kw), 1)).reports
    return reports


@pytest.mark.parametrize("probe", ROUND_TRIP_SPECS, ids=lambda s: f"{s.kind.value}@{s.attach}")
def test_install_then_revoke_restores_device(runtime, probe):
    before = runtime.device.snapshot()
    handle = runtime.install(probe)
    assert handle.probe_id == 1
    assert runtime.device.snapshot() != before
    runtime.revoke(handle.probe_id)
    assert runtime.device.snapshot() == before
    assert runtime.snapshot()["attached"] == {}


@pytest.mark.parametrize("probe", [ROUND_TRIP_SPECS[3], ROUND_TRIP_SPECS[9], ROUND_TRIP_SPECS[11]],
                         ids=["timer_poll", "new_entry", "watermark"])
def test_failed_commit_at_any_step_leaves_no_trace(runtime, probe):
    before = runtime.device.snapshot()
    steps = len(runtime.plan_install(probe))
    assert steps > 1
    for step in range(steps):
        with pytest.raises(CommitFailed) as info:
            runtime.install(probe, fail_at_step=step)
        assert info.value.step == step
        assert runtime.device.snapshot() == before
        assert runtime.probes == {}


def test_failed_revoke_keeps_the_probe(runtime):
    handle = runtime.install(ROUND_TRIP_SPECS[3])
    installed = runtime.device.snapshot()
    with pytest.raises(CommitFailed):
        runtime.revoke(handle.probe_id, fail_at_step=1)
    assert runtime.device.snapshot() == installed
    assert handle.probe_id in runtime.probes


def test_device_fault_mid_plan_rolls_back(runtime):
    before = runtime.device.snapshot()
    runtime.device.inject_fault("set_pointer")
    with pytest.raises(CommitFailed):
        runtime.install(spec("counter", {"kind": "port_ingress", "port": 1}))
    assert runtime.device.snapshot() == before


def test_plan_is_pure(runtime):
    before = runtime.device.snapshot()
    plan = runtime.plan_install(ROUND_TRIP_SPECS[4])
    assert runtime.device.snapshot() == before
    assert len(plan.rollback()) == len(plan.describe()) == len(plan)


@pytest.mark.parametrize("n", [0, 2, 3, 7, 9])
def test_threshold_push_reports_every_t_packets(runtime, frame, n):
    handle = runtime.install(on_east("threshold_push", threshold=3))
    reports = send(runtime.device, frame, n, dst="10.0.0.1")
    assert len([r for r in reports if r.template == handle.probe_id]) == n // 3
    assert runtime.query(handle.probe_id)["values"]["counter"] == n % 3


def test_threshold_push_over_random_sizes(runtime, frame, rng):
    data = frame(dst="10.0.0.1")
    for _ in range(50):
        n, t = rng.randrange(200), rng.randint(1, 20)
        handle = runtime.install(on_east("threshold_push", threshold=t))
        reports = []
        for _ in range(n):
            reports += runtime.device.process_packet(PacketBuffer(data, 1)).reports
        assert len([r for r in reports if r.template == handle.probe_id]) == n // t
        assert runtime.query(handle.probe_id)["values"]["counter"] == n % t
        runtime.revoke(handle.probe_id)


def test_conditional_counter_matches_a_count(runtime, frame, rng):
    base = frame(dst="10.0.0.1")

    def packet(first_octet, flags):
        data = bytearray(base)
        data[30], data[47] = first_octet, flags
        return bytes(data)

    for _ in range(100):
        mask = rng.randrange(1, 256)
        value = rng.randrange(256) & mask
        handle = runtime.install(on_east("counter", condition={"field": "pkt[376:8]", "mask": mask, "value": value}))
        trace = [(rng.choice((10, 11, 172)), rng.randrange(256)) for _ in range(rng.randint(10, 60))]
        for first_octet, flags in trace:
            runtime.device.process_packet(PacketBuffer(packet(first_octet, flags), 1))
        expected = sum(1 for o, f in trace if o == 10 and f & mask == value)
        assert runtime.query(handle.probe_id)["values"] == {"counter": expected}
        runtime.revoke(handle.probe_id)


def test_counter_condition_and_forwarding_intact(runtime, frame):
    handle = runtime.install(on_east("counter", condition=SYN_ONLY))
    data = frame(dst="10.0.0.1", flags="S")
    assert runtime.device.process_packet(PacketBuffer(data, 1)).emitted == [(2, data)]
    send(runtime.device, frame, 2, dst="10.0.0.1", flags="A")
    send(runtime.device, frame, 3, dst="11.0.0.1", flags="S")
    assert runtime.query(handle.probe_id)["values"] == {"counter": 1}


def test_half_open_count_tracks_unanswered_syns(runtime, frame):
    handle = runtime.install(on_east("fsm_half_open"))
    device = runtime.device
    for port in range(10):
        send(device, frame, 1, dst="10.0.0.1", sport=1000 + port, flags="S")
    # duplicate SYNs do not double count
    send(device, frame, 1, dst="10.0.0.1", sport=1000, flags="S")
    for port in range(4):
        send(device, frame, 1, dst="10.0.0.1", sport=1000 + port, flags="A")
    # an ACK for a flow that never opened changes nothing
    send(device, frame, 1, dst="10.0.0.1", sport=2000, flags="A")
    values = runtime.query(handle.probe_id)["values"]
    assert values == {"counter": 6, "stb": 6}


def test_half_open_alarm_ignores_answered_handshakes(runtime, frame):
    handle = runtime.install(on_east("fsm_half_open", alarm=100))
    reports = []
    for i in range(300):
        reports += send(runtime.device, frame, 1, dst="10.0.0.1", sport=1000 + i, flags="S")
        reports += send(runtime.device, frame, 1, dst="10.0.0.1", sport=1000 + i, flags="A")
    assert [r for r in reports if r.template == handle.probe_id] == []
    assert runtime.query(handle.probe_id)["values"] == {"counter": 0, "stb": 0}


def test_half_open_alarm_fires_once_at_the_level(runtime, frame):
    handle = runtime.install(on_east("fsm_half_open", alarm=3))
    runtime.device.clock.set(7_000)
    reports = []
    for i in range(6):
        reports += send(runtime.device, frame, 1, dst="10.0.0.1", sport=1000 + i, flags="S")
    # repeated SYNs on an open flow do not count again
    reports += send(runtime.device, frame, 3, dst="10.0.0.1", sport=1000, flags="S")
    assert [(r.template, r.values) for r in reports] == [(handle.probe_id, (3, 7_000))]


@pytest.mark.slow
@pytest.mark.parametrize("never_acked", [0.0, 0.3, 1.0])
def test_half_open_state_matches_a_replay(runtime, never_acked):
    alarm = 50
    handle = runtime.install(on_east("fsm_half_open", alarm=alarm))
    profile = TrafficProfile(seed=21, n_flows=1000, packets_per_flow=3, never_acked=never_acked)
    packets, flows = generate(profile)
    open_flows, alarms, reports = set(), 0, []
    for p in packets:
        reports += runtime.device.process_packet(PacketBuffer(p.data, p.port)).reports
        flags, signature = p.data[47], p.data[26:38]
        if flags & 0x12 == 0x02:
            if signature not in open_flows:
                open_flows.add(signature)
                alarms += len(open_flows) == alarm
        elif flags & 0x10:
            open_flows.discard(signature)
    values = runtime.query(handle.probe_id)["values"]
    assert values == {"counter": len(open_flows), "stb": len(open_flows)}
    assert len(open_flows) == sum(not f.acked for f in flows)
    assert len([r for r in reports if r.template == handle.probe_id]) == alarms


def test_flow_duration_reports_start_and_end(runtime, frame):
    handle = runtime.install(on_east("flow_duration"))
    device = runtime.device
    device.clock.set(1_000)
    send(device, frame, 1, dst="10.0.0.1", flags="S")
    device.clock.set(1_500)
    send(device, frame, 1, dst="10.0.0.1", flags="S")
    device.clock.set(4_000)
    reports = send(device, frame, 1, dst="10.0.0.1", flags="F")
    assert [(r.template, r.values) for r in reports] == [(handle.probe_id, (1_000, 4_000))]


def test_watermark_reports_each_crossing(runtime):
    handle = runtime.install(spec("queue_watermark", {"kind": "queue", "port": 1}))
    device = runtime.device
    reports = []
    for _ in range(5):
        reports += device.enqueue(1, bytes(64)).reports
    for _ in range(5):
        reports += device.dequeue(1).reports
    assert all(r.template == handle.probe_id for r in reports)
    assert [r.values[:3] for r in reports] == [(0, 1, 2), (1, 1, 4), (1, 0, 3), (0, 0, 1)]


def test_timer_poll_reports_and_resets(runtime, frame):
    handle = runtime.install(on_east("timer_poll", interval=1000))
    device = runtime.device
    send(device, frame, 4, dst="10.0.0.1")
    firing = device.advance_clock(1000)[0]
    assert [(r.template, r.values) for r in firing.outcome.reports] == [(handle.probe_id, (0, 4, 1000))]
    assert runtime.query(handle.probe_id)["values"]["counter"] == 0


def test_port_timer_poll_reports_its_port(runtime, frame):
    handle = runtime.install(spec("timer_poll", {"kind": "port_ingress", "port": 1}, interval=1000))
    send(runtime.device, frame, 2, dst="11.0.0.1")
    firing = runtime.device.advance_clock(1000)[0]
    assert [r.values for r in firing.outcome.reports if r.template == handle.probe_id] == [(1, 2, 1000)]


def test_filter_samples_one_in_n(runtime, frame):
    handle = runtime.install(on_east("filter", digest_fields=["pkt[240:32]"], sample_n=3))
    reports = send(runtime.device, frame, 7, dst="10.0.0.9")
    assert [r.values for r in reports if r.template == handle.probe_id] == [(0x0A000009,)] * 3


def test_new_entry_clones_covering_behaviour(runtime, frame):
    handle = runtime.install(spec("counter", {"kind": "table_entry", "table": 0, "key": "0x0a010000/0xffff0000"}))
    device = runtime.device
    created = [e for e in device.table(0).ordered() if e.priority == 11]
    assert len(created) == 1
    data = frame(dst="10.1.2.3")
    assert device.process_packet(PacketBuffer(data, 1)).emitted == [(2, data)]
    send(device, frame, 2, dst="10.2.0.1")
    assert runtime.query(handle.probe_id)["values"]["counter"] == 1
    assert [e.key for e in handle.overlaps] == [MatchKey.parse(EAST, 32)]


def test_uncovered_overlap_is_refused(runtime):
    with pytest.raises(NoCoveringBehavior):
        runtime.plan_install(spec("counter", {"kind": "table_entry", "table": 0, "key": "0x0a000000/0xfe000000"}))


def test_probes_share_an_attach_point(runtime, frame):
    first = runtime.install(on_east("counter"))
    second = runtime.install(on_east("counter", unit="bytes"))
    send(runtime.device, frame, 2, dst="10.0.0.1", size=100)
    assert runtime.query(first.probe_id)["values"]["counter"] == 2
    assert runtime.query(second.probe_id)["values"]["counter"] == 200
    runtime.revoke(first.probe_id)
    assert list(runtime.snapshot()["attached"].values()) == [[second.probe_id]]
    send(runtime.device, frame, 1, dst="10.0.0.1", size=100)
    assert runtime.query(second.probe_id)["values"]["counter"] == 300


def test_subscribers_guard_revocation(runtime):
    handle = runtime.install(on_east("counter"), app_id="ops")
    assert runtime.subscribe(handle.probe_id, "audit") == 2
    with pytest.raises(HasSubscribers):
        runtime.revoke(handle.probe_id)
    assert runtime.unsubscribe(handle.probe_id, "ops") == 1
    runtime.revoke(handle.probe_id, force=True)
    with pytest.raises(NoSuchProbe):
        runtime.query(handle.probe_id)


def test_admission_follows_the_cost_model(device):
    device.caps = DeviceCaps(base_pps=1e7, mem_access_budget_per_sec=3e7)
    runtime = DnpRuntime(device)
    assert runtime.probe_check([on_east("counter")] * 3).accepted
    assert not runtime.probe_check([on_east("counter")] * 4).accepted
    for _ in range(3):
        runtime.install(on_east("counter"))
    runtime.subscribe(2, "ops")
    with pytest.raises(AdmissionRejected) as info:
        runtime.install(on_east("counter"))
    rejected = info.value
    assert rejected.estimate == pytest.approx(3e7 / 4)
    assert rejected.floor == pytest.approx(9e6)
    assert rejected.candidates == (1,)
    assert len(runtime.probes) == 3


def test_spec_validation():
    with pytest.raises(IncompatibleAttachPoint):
        spec("queue_watermark", {"kind": "table_entry", "table": 0, "key": EAST})
    with pytest.raises(ProbeSpecError):
        ProbeSpec.from_dict({"kind": "nope"})
    with pytest.raises(ProbeSpecError):
        ProbeSpec.from_dict({"kind": "counter", "attach": {"kind": "port_ingress"}})


def test_latency_source_needs_a_physical_port(runtime):
    with pytest.raises(ProbeSpecError):
        runtime.plan_install(spec("latency_source", port=9))


def test_snippets_run_on_every_branch():
    base = assemble("BRANCH_EQ meta[0:8], 1, +2; OUTPUT 1; OUTPUT 2")
    merged = augment(base, [assemble("CNTR_ADD counter:0, 1, -")])
    assert merged.instructions[0] == assemble("CNTR_ADD counter:0, 1, -").instructions[0]
    plain = augment(assemble("SET_FIELD meta[0:8], 1; OUTPUT 2"), [assemble("NOP")])
    assert [i.opcode.name for i in plain] == ["SET_FIELD", "NOP", "OUTPUT"]
