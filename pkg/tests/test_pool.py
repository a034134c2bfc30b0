import pytest

from probeplane.errors import NoSuchTimer, PoolExhausted
from probeplane.resources.clock import VirtualClock
from probeplane.resources.pool import CounterCell, InsertResult, MeterCell, ResourcePool, SamplerCell, StateTable
from probeplane.resources.types import Handle, MeterColor, ResourceClass, TimerMode
from probeplane.settings import PoolCapacities


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def pool(clock):
    return ResourcePool(PoolCapacities(counters=3, timers=2), clock)


def test_lowest_free_index_first(pool):
    a = pool.alloc(ResourceClass.COUNTER)
    b = pool.alloc(ResourceClass.COUNTER)
    assert (a.index, b.index) == (0, 1)
    pool.release(a)
    assert pool.peek_free(ResourceClass.COUNTER, 2) == [0, 2]
    assert pool.alloc(ResourceClass.COUNTER) == a


def test_exhaustion_is_reported(pool):
    for _ in range(3):
        pool.alloc(ResourceClass.COUNTER)
    with pytest.raises(PoolExhausted):
        pool.alloc(ResourceClass.COUNTER)
    assert pool.stats()["counter"] == (3, 3, 0)


def test_explicit_index_must_be_free(pool):
    pool.alloc(ResourceClass.REGISTER, index=5)
    with pytest.raises(PoolExhausted):
        pool.alloc(ResourceClass.REGISTER, index=5)


def test_counter_wraps_at_64_bits():
    cell = CounterCell(2**64 - 1)
    assert cell.add(2) == 1


def test_sampler_fires_one_in_n():
    sampler = SamplerCell(n=3)
    assert [sampler.test() for _ in range(7)] == [True, False, False, True, False, False, True]


def test_meter_colours():
    meter = MeterCell(cir=1000, cbs=100, pir=2000, pbs=150)
    assert meter.check(100, 0) == MeterColor.GREEN
    assert meter.check(50, 0) == MeterColor.YELLOW
    assert meter.check(10, 0) == MeterColor.RED
    # one second refills both buckets to their burst sizes
    assert meter.check(100, 1_000_000_000) == MeterColor.GREEN


def test_state_table_results():
    table = StateTable(key_width=32, capacity=1)
    assert table.insert(7, 1, ts=10) == InsertResult.NEW
    assert table.insert(7, 2, ts=20) == InsertResult.UPDATED
    assert table.insert(8, 1, ts=30) == InsertResult.DROPPED
    assert table.dump() == [(7, 2, 20)]
    assert table.lookup(8) is None


def test_periodic_timer_does_not_drift(pool, clock):
    clock.set(5)
    handle = pool.set_timer(100, TimerMode.PERIODIC, linked_slot=4)
    fires = []
    while (entry := pool.pop_due(1000)) is not None:
        fires.append(entry.next_fire)
    assert fires == [105 + 100 * k for k in range(9)]
    assert pool.next_due() == 1005
    assert handle == Handle(ResourceClass.TIMER, 0)


def test_timer_ties_break_on_id(pool):
    pool.set_timer(50, TimerMode.ONE_SHOT, linked_slot=1)
    pool.set_timer(50, TimerMode.ONE_SHOT, linked_slot=2)
    assert [pool.pop_due(50).linked_slot, pool.pop_due(50).linked_slot] == [1, 2]
    assert pool.pop_due(50) is None


def test_cancel_then_restore_timer(pool):
    pool.set_timer(10, TimerMode.PERIODIC, linked_slot=3)
    entry = pool.cancel_timer(0)
    assert pool.next_due() is None
    with pytest.raises(NoSuchTimer):
        pool.cancel_timer(0)
    pool.restore_timer(entry)
    assert pool.next_due() == 10


def test_rearmed_ids_fire_on_their_new_schedule(clock, rng):
    pool = ResourcePool(PoolCapacities(timers=16), clock)
    for i in range(16):
        pool.set_timer(rng.randint(1, 500), TimerMode.ONE_SHOT, linked_slot=i)
    for timer_id in rng.sample(range(16), 6):
        pool.cancel_timer(timer_id)
    for _ in range(3):
        pool.set_timer(rng.randint(1, 500), TimerMode.ONE_SHOT, linked_slot=99)
    expected = sorted((t.next_fire, t.timer_id) for t in pool.timers())
    fired = []
    while (entry := pool.pop_due(10_000)) is not None:
        fired.append((entry.next_fire, entry.timer_id))
    assert fired == expected
    assert pool.next_due() is None


def test_handles_print_and_parse():
    handle = Handle(ResourceClass.STATE_TABLE, 12)
    assert str(handle) == "stb:12"
    assert Handle.parse("stb:12") == handle
    with pytest.raises(ValueError):
        Handle.parse("bogus:1")


def test_snapshot_lists_live_cells(pool):
    pool.alloc(ResourceClass.COUNTER)
    snap = pool.snapshot()
    assert list(snap["counter"]) == ["0"]
    pool.clear()
    assert pool.snapshot()["counter"] == {}
