import pytest

from probeplane.dataplane.config import dump_config, load_config
from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import DiagCode, FieldRef, MatchKey, PacketBuffer, ReportTemplate
from probeplane.dataplane.ports import EgressQueue
from probeplane.dataplane.tables import TableDef
from probeplane.errors import ConfigError, InvalidPosition, NoSuchTable, PoolExhausted, SlotInUse
from probeplane.resources.types import ResourceClass, TimerMode
from probeplane.vm.assembler import assemble


def test_forwards_along_matching_entry(device, frame):
    data = frame(dst="10.1.2.3")
    outcome = device.process_packet(PacketBuffer(data, 1))
    assert not outcome.dropped
    assert outcome.emitted == [(2, data)]

    back = frame(dst="11.0.0.7")
    assert device.process_packet(PacketBuffer(back, 2)).emitted == [(1, back)]
    assert device.counters.processed == 2


def test_default_miss_reports_then_drops(device, frame):
    data = frame(dst="172.16.0.1")
    outcome = device.process_packet(PacketBuffer(data, 1))
    assert outcome.dropped
    assert outcome.drop_reason == "action"
    assert [r.template for r in outcome.reports] == [ReportTemplate.MISS]
    assert outcome.reports[0].payload == data


def test_offline_device_drops_everything(device, frame):
    device.online = False
    outcome = device.process_packet(PacketBuffer(frame(), 1))
    assert outcome.dropped and outcome.drop_reason == "offline"
    assert device.counters.offline_drops == 1
    assert device.counters.processed == 0


def test_short_packet_is_malformed(device):
    outcome = device.process_packet(PacketBuffer(bytes(20), 1))
    assert outcome.drop_reason == "malformed"
    assert outcome.reports[0].template == ReportTemplate.DIAG
    assert device.counters.malformed == 1


def test_ingress_hook_to_controller_port_is_absorbed(device, frame):
    slot = device.load_action(assemble("OUTPUT ctrl"))
    device.set_pointer(("ingress", 1), slot)
    outcome = device.process_packet(PacketBuffer(frame(), 1))
    assert not outcome.dropped
    assert outcome.emitted == []
    assert outcome.reports[0].template == ReportTemplate.MISS


def test_queue_overflow_and_drain(device, frame):
    device.add_queue(EgressQueue(port=2, capacity=2, low_watermark=1, high_watermark=2))
    outcomes = [device.process_packet(PacketBuffer(frame(sport=40000 + i), 1)) for i in range(3)]
    assert [o.queued for o in outcomes[:2]] == [[2], [2]]
    assert outcomes[2].drop_reason == "queue overflow"
    assert device.counters.queue_overflows == 1
    drained = device.dequeue(2)
    assert drained.emitted[0][0] == 2
    assert device.queue(2).depth == 1


def test_queue_hook_sees_depth(device):
    device.add_queue(EgressQueue(port=2, capacity=8))
    counter = device.alloc(ResourceClass.COUNTER)
    # counts by the queue depth the hook finds in metadata
    slot = device.load_action(assemble(f"CNTR_ADD {counter}, meta[1472:64], -"))
    device.set_pointer(("enqueue", 2), slot)
    for _ in range(3):
        device.enqueue(2, bytes(64))
    assert device.read_counter(counter).value == 1 + 2 + 3


def test_periodic_timer_fires_in_order(device):
    counter = device.alloc(ResourceClass.COUNTER)
    slot = device.load_action(assemble(f"CNTR_ADD {counter}, 1, -; HALT"))
    timer = device.set_timer(1000, TimerMode.PERIODIC, slot)
    firings = device.advance_clock(3500)
    assert [f.at for f in firings] == [1000, 2000, 3000]
    assert {f.timer_id for f in firings} == {timer}
    assert device.read_counter(counter).value == 3
    assert device.clock.now() == 3500
    assert device.next_timer_due() == 4000


def test_one_shot_timer_fires_once(device):
    counter = device.alloc(ResourceClass.COUNTER)
    slot = device.load_action(assemble(f"CNTR_ADD {counter}, 1, -; HALT"))
    device.set_timer(500, TimerMode.ONE_SHOT, slot)
    assert len(device.advance_clock(10_000)) == 1
    assert device.next_timer_due() is None
    assert device.actions.refcount(slot) == 0


def test_injected_fault_hits_next_call_only(device):
    device.inject_fault("load_action")
    with pytest.raises(PoolExhausted):
        device.load_action(assemble("DROP"))
    device.load_action(assemble("DROP"))


def test_cannot_delete_held_slot(device):
    slot = device.table(0).ordered()[0].action_slot
    with pytest.raises(SlotInUse):
        device.delete_action(slot)


def test_table_lifecycle(device):
    miss = device.load_action(assemble("DROP"))
    device.create_table(TableDef(7, (FieldRef.parse("pkt[96:16]"),), miss), after=0)
    assert device.table(0).next_table == 7
    device.delete_table(7)
    assert device.table(0).next_table is None
    with pytest.raises(NoSuchTable):
        device.table(7)


def test_hook_on_unknown_port(device):
    slot = device.load_action(assemble("DROP"))
    with pytest.raises(InvalidPosition):
        device.set_pointer(("ingress", 9), slot)


def test_config_dump_reloads_to_same_pipeline(device, frame):
    doc = dump_config(device)
    clone = Device("A2", ports=[1, 2])
    load_config(clone, doc)
    assert clone.table(0).snapshot()["entries"] == device.table(0).snapshot()["entries"]
    data = frame(dst="10.9.9.9")
    assert clone.process_packet(PacketBuffer(data, 1)).emitted == [(2, data)]


def test_bad_config_is_rejected():
    with pytest.raises(ConfigError):
        load_config(Device("X", ports=[1]), {"tables": [{"id": 0, "key": ["pkt[0:8]"], "miss": "nope"}]})


def test_lookup_agrees_with_a_linear_scan(device, rng):
    miss = device.load_action(assemble("DROP"))
    fwd = device.load_action(assemble("OUTPUT 2"))
    device.create_table(TableDef(9, (FieldRef.parse("pkt[240:8]"),), miss))
    for _ in range(60):
        mask = rng.randrange(256)
        key = MatchKey(rng.randrange(256) & mask, mask, 8)
        priority = rng.randrange(4)
        if device.table(9).find(key, priority) is None:
            device.insert_entry(9, key, priority, fwd)

    def scan(bits):
        hits = [e for e in device.table(9).entries.values() if bits & e.key.mask == e.key.value]
        return min(hits, key=lambda e: (-e.priority, e.entry_id)) if hits else None

    for bits in range(256):
        assert device.lookup(9, bits) == scan(bits)
    for entry_id in rng.sample(sorted(device.table(9).entries), 20):
        device.delete_entry(9, entry_id)
    for bits in range(256):
        assert device.lookup(9, bits) == scan(bits)


def test_repointing_an_entry_mid_stream(device, frame):
    east = next(e for e in device.table(0).ordered() if str(e.key) == "0x0a000000/0xff000000")
    west = device.load_action(assemble("OUTPUT 1"))
    ports = []
    for i in range(200):
        if i == 120:
            assert device.set_pointer(("entry", 0, east.entry_id), west) == east.action_slot
        outcome = device.process_packet(PacketBuffer(frame(sport=30000 + i), 1))
        assert not outcome.dropped
        (port, _), = outcome.emitted
        ports.append(port)
    assert ports == [2] * 120 + [1] * 80


def test_actions_learn_into_writable_tables(device, frame):
    fwd = device.load_action(assemble("OUTPUT 2"))
    miss = device.load_action(assemble("DROP"))
    device.create_table(TableDef(5, (FieldRef.parse("pkt[208:32]"),), miss, writable_by_actions=True))
    device.set_pointer(("ingress", 1), device.load_action(assemble(f"LEARN 5, [pkt[208:32]], {fwd}")))

    data = frame(src="192.168.0.9")
    outcome = device.process_packet(PacketBuffer(data, 1))
    assert outcome.emitted == [(2, data)]
    (table_id, entry_id), = outcome.learned
    assert table_id == 5
    entry = device.entry(5, entry_id)
    assert entry.key == MatchKey.exact(0xC0A80009, 32)
    assert entry.action_slot == fwd

    # the same source is learned once
    assert device.process_packet(PacketBuffer(data, 1)).learned == []
    assert len(device.table(5).entries) == 1
    assert device.counters.learned == 1


def test_read_only_tables_refuse_learning(device, frame):
    fwd = device.load_action(assemble("OUTPUT 2"))
    device.set_pointer(("ingress", 1), device.load_action(assemble(f"LEARN 0, [pkt[240:32]], {fwd}")))
    data = frame(dst="10.1.2.3")
    outcome = device.process_packet(PacketBuffer(data, 1))
    assert outcome.emitted == [(2, data)]
    assert outcome.learned == []
    assert [(r.template, r.values) for r in outcome.reports] == [
        (ReportTemplate.DIAG, (DiagCode.READ_ONLY_TABLE, 0))]
    assert len(device.table(0).entries) == 2
    assert device.counters.refused_learns == 1
