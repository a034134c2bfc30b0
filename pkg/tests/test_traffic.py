import pytest
from scapy.layers.inet import TCP
from scapy.layers.l2 import Ether

from probeplane.errors import ConfigError
from probeplane.harness.traffic import (
    TracePacket,
    TrafficProfile,
    decode_trace,
    encode_trace,
    generate,
    load,
    read_trace,
    write_trace,
)


def test_same_seed_same_packets():
    profile = TrafficProfile(seed=7, n_flows=4, packets_per_flow=5, ports=(1, 2))
    first, _ = generate(profile)
    second, _ = generate(profile)
    assert first == second
    assert first != generate(TrafficProfile(seed=8, n_flows=4, packets_per_flow=5, ports=(1, 2)))[0]


def test_generated_packets_are_time_ordered_and_sized():
    profile = TrafficProfile(seed=1, n_flows=6, packets_per_flow=4, sizes=(64, 128), start_ns=500)
    packets, flows = generate(profile)
    assert len(packets) == 24
    assert [p.ts for p in packets] == sorted(p.ts for p in packets)
    assert all(profile.start_ns <= p.ts < profile.end_ns for p in packets)
    assert all(64 <= len(p.data) <= 128 for p in packets)
    assert sorted(i for f in flows for i in f.packets) == list(range(24))


def test_flows_follow_the_handshake():
    packets, flows = generate(TrafficProfile(seed=3, n_flows=3, packets_per_flow=4))
    for flow in flows:
        flags = [str(Ether(packets[i].data)[TCP].flags) for i in flow.packets]
        assert flags == ["S", "A", "PA", "FA"]


def test_never_acked_flows_only_send_syns():
    packets, flows = generate(TrafficProfile(seed=3, n_flows=5, packets_per_flow=3, never_acked=1.0))
    assert not any(f.acked for f in flows)
    assert {str(Ether(p.data)[TCP].flags) for p in packets} == {"S"}


def test_trace_file_round_trip(tmp_path):
    packets, _ = generate(TrafficProfile(seed=2, n_flows=2, packets_per_flow=3))
    path = str(tmp_path / "trace.bin")
    write_trace(packets, path)
    loaded = read_trace(path)
    assert [(p.ts, p.port, p.data) for p in loaded] == [(p.ts, p.port, p.data) for p in packets]
    assert load(TrafficProfile(trace=path)) == loaded


@pytest.mark.parametrize("cut", [3, 20])
def test_truncated_trace_is_rejected(cut):
    data = encode_trace([TracePacket(5, 1, bytes(16))])
    with pytest.raises(ConfigError):
        decode_trace(data[:cut])


def test_profile_from_dict():
    profile = TrafficProfile.from_dict({"seed": 4, "ports": [1, 2], "sizes": [70, 80], "device": "A"})
    assert (profile.seed, profile.ports, profile.sizes, profile.device) == (4, (1, 2), (70, 80), "A")
    with pytest.raises(ConfigError):
        TrafficProfile.from_dict({"n_flows": "many"})
