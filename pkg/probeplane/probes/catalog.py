"""
Snippet builders for every probe kind.

A probe compiles to a packet-path snippet (spliced into the action at its
attach point) and, for timer-driven kinds, a timer block. Reports use the
probe id as their template.

Params (all optional unless noted):

    counter          unit ("packets"|"bytes"), condition
    threshold_push   threshold (required), report_fields, condition
    timer_poll       interval (ns, default 1s), threshold (default 0), unit, condition;
                     reports (port, count, now), port 0 on table attach points
    fsm_half_open    signature, flags, syn [mask, value], ack [mask, value], capacity, alarm, condition
    flow_duration    flags, start [mask, value], end [mask, value]
    queue_watermark  low, high (default: the queue's own marks)
    filter           digest_fields, sample_n, condition
    latency_source   port (required), rate (per second) or interval (ns), one_shot
    latency_sink     (none)

`condition` is {"field": "pkt[o:l]", "mask": m, "value": v}; the probe acts
only on packets with field & m == v. Field lists are lists of "pkt[o:l]"
style references.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import (
    CONTROLLER_PORT,
    PROBE_ETHERTYPE,
    PROBE_ETHERTYPE_REF,
    PROBE_MARKER,
    PROBE_MARKER_REF,
    PROBE_TS_REF,
    FieldRef,
    ReportTemplate,
)
from probeplane.errors import ProbeSpecError
from probeplane.probes import layout
from probeplane.probes.layout import scratch
from probeplane.probes.spec import ProbeKind, ProbeSpec
from probeplane.resources.types import CounterUnit, Handle, ResourceClass, TimerMode
from probeplane.vm.isa import ActionBlock, Instruction
from probeplane.vm.isa import Opcode as Op
from probeplane.vm.isa import ins

NS_PER_SEC = 1_000_000_000
S0, S1, S2, S3, S4 = (scratch(i) for i in range(5))
S7 = scratch(7)


@dataclass(frozen=True)
class ResourceNeed:
    name: str
    cls: ResourceClass
    params: Tuple[int, ...] = ()


@dataclass(frozen=True)
class ProbeProgram:
    snippet: Optional[ActionBlock]
    timer_block: Optional[ActionBlock] = None
    timer_interval: int = 0
    timer_mode: TimerMode = TimerMode.PERIODIC


# ---------------- param parsing -----------------

def _ref(text) -> FieldRef:
    try:
        return FieldRef.parse(text) if isinstance(text, str) else text
    except ValueError as e:
        raise ProbeSpecError(str(e)) from None


def _refs(values) -> Tuple[FieldRef, ...]:
    refs = tuple(_ref(v) for v in values)
    if len(refs) > 8:
        raise ProbeSpecError("at most 8 report/key fields")
    return refs


def _pair(spec: ProbeSpec, name: str, default: Tuple[int, int]) -> Tuple[int, int]:
    value = spec.param(name, default)
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ProbeSpecError(f"{name} must be [mask, value]")
    return int(value[0]), int(value[1])


def _positive(spec: ProbeSpec, name: str, default=None) -> int:
    value = spec.param(name, default)
    if value is None:
        raise ProbeSpecError(f"{spec.kind.value} needs '{name}'")
    value = int(value)
    if value <= 0:
        raise ProbeSpecError(f"{name} must be positive")
    return value


def condition(spec: ProbeSpec) -> Optional[Tuple[FieldRef, int, int]]:
    cond = spec.param("condition")
    if not cond:
        return None
    try:
        return _ref(cond["field"]), int(cond.get("mask", (1 << 64) - 1)), int(cond["value"])
    except (KeyError, TypeError, ValueError) as e:
        raise ProbeSpecError(f"bad condition {cond!r}: {e}") from None


def _flag_test(flags: FieldRef, mask: int, value: int, skip: int) -> List[Instruction]:
    """Skip the next `skip` instructions unless flags & mask == value."""
    return [
        ins(Op.MOVE, S7, flags),
        ins(Op.AND, S7, mask),
        ins(Op.BRANCH_NE, S7, value, skip + 1),
    ]


def _guarded(spec: ProbeSpec, body: List[Instruction]) -> List[Instruction]:
    cond = condition(spec)
    if cond is None:
        return body
    return _flag_test(cond[0], cond[1], cond[2], len(body)) + body


def _unit(spec: ProbeSpec) -> CounterUnit:
    unit = spec.param("unit", "packets")
    try:
        return CounterUnit[unit.upper()] if isinstance(unit, str) else CounterUnit(unit)
    except (KeyError, ValueError):
        raise ProbeSpecError(f"unknown counter unit {unit!r}") from None


def _interval(spec: ProbeSpec, default: int) -> int:
    if spec.param("rate") is not None:
        rate = float(spec.param("rate"))
        if rate <= 0:
            raise ProbeSpecError("rate must be positive")
        return max(1, int(NS_PER_SEC / rate))
    return _positive(spec, "interval", default)


def _watermarks(spec: ProbeSpec, device: Device) -> Tuple[int, int]:
    queue = device.queue(spec.attach.port)
    low = int(spec.param("low", queue.low_watermark))
    high = int(spec.param("high", queue.high_watermark))
    if not 0 <= low <= high:
        raise ProbeSpecError(f"watermarks must satisfy 0 <= low <= high, got {low}/{high}")
    return low, high


def zone(depth: int, low: int, high: int) -> int:
    return int(depth >= low) + int(depth >= high)


# ---------------- resources -----------------

def resource_needs(spec: ProbeSpec, device: Device) -> List[ResourceNeed]:
    kind = spec.kind
    if kind == ProbeKind.COUNTER:
        return [ResourceNeed("counter", ResourceClass.COUNTER, (int(_unit(spec)),))]
    if kind == ProbeKind.THRESHOLD_PUSH:
        return [ResourceNeed("counter", ResourceClass.COUNTER, (int(CounterUnit.PACKETS),))]
    if kind == ProbeKind.TIMER_POLL:
        return [ResourceNeed("counter", ResourceClass.COUNTER, (int(_unit(spec)),))]
    if kind == ProbeKind.FSM_HALF_OPEN:
        signature = _refs(spec.param("signature", layout.FLOW_SIGNATURE))
        width = sum(r.length_bits for r in signature)
        capacity = int(spec.param("capacity", device.settings.pools.state_table_entries))
        return [
            ResourceNeed("stb", ResourceClass.STATE_TABLE, (width, capacity)),
            ResourceNeed("counter", ResourceClass.COUNTER, (int(CounterUnit.PACKETS),)),
        ]
    if kind == ProbeKind.FLOW_DURATION:
        return [
            ResourceNeed("state", ResourceClass.REGISTER, (0,)),
            ResourceNeed("start_ts", ResourceClass.REGISTER, (0,)),
        ]
    if kind == ProbeKind.QUEUE_WATERMARK:
        low, high = _watermarks(spec, device)
        current = zone(device.queue(spec.attach.port).depth, low, high)
        return [ResourceNeed("zone", ResourceClass.REGISTER, (current,))]
    if kind == ProbeKind.FILTER:
        n = int(spec.param("sample_n", 1))
        if n < 1:
            raise ProbeSpecError("sample_n must be >= 1")
        return [ResourceNeed("sampler", ResourceClass.SAMPLER, (n,))] if n > 1 else []
    if kind == ProbeKind.LATENCY_SOURCE:
        return [ResourceNeed("seq", ResourceClass.REGISTER, (0,))]
    return []


# ---------------- programs -----------------

def build_program(spec: ProbeSpec, probe_id: int, handles: Dict[str, Handle], device: Device) -> ProbeProgram:
    builder = _BUILDERS[spec.kind]
    return builder(spec, probe_id, handles, device)


def _counter(spec, pid, h, device):
    body = [ins(Op.CNTR_ADD, h["counter"], 1, None)]
    return ProbeProgram(ActionBlock.of(_guarded(spec, body)))


def _threshold_push(spec, pid, h, device):
    threshold = _positive(spec, "threshold")
    fields = _refs(spec.param("report_fields", ()))
    body = [
        ins(Op.CNTR_ADD, h["counter"], 1, S0),
        ins(Op.BRANCH_NE, S0, threshold, 4),
        ins(Op.TIMESTAMP, S1),
        ins(Op.GEN_PKT, pid, CONTROLLER_PORT, fields + (S1,)),
        ins(Op.CNTR_SET, h["counter"], 0),
    ]
    return ProbeProgram(ActionBlock.of(_guarded(spec, body)))


def _timer_poll(spec, pid, h, device):
    threshold = int(spec.param("threshold", 0))
    counter = h["counter"]
    # table-entry attach points have no port of their own
    port = spec.attach.port if spec.attach.port is not None else 0
    timer_block = ActionBlock.of([
        ins(Op.TIMESTAMP, S1),
        ins(Op.CNTR_ADD, counter, 0, S0),
        ins(Op.BRANCH_LT, S0, threshold, 3),
        ins(Op.SET_FIELD, S2, port),
        ins(Op.GEN_PKT, pid, CONTROLLER_PORT, (S2, S0, S1)),
        ins(Op.CNTR_SET, counter, 0),
        ins(Op.HALT),
    ])
    snippet = ActionBlock.of(_guarded(spec, [ins(Op.CNTR_ADD, counter, 1, None)]))
    return ProbeProgram(snippet, timer_block, _interval(spec, NS_PER_SEC), TimerMode.PERIODIC)


def _fsm_half_open(spec, pid, h, device):
    signature = _refs(spec.param("signature", layout.FLOW_SIGNATURE))
    flags = _ref(spec.param("flags", layout.TCP_FLAGS))
    syn_mask, syn_value = _pair(spec, "syn", (layout.TCP_SYN | layout.TCP_ACK, layout.TCP_SYN))
    ack_mask, ack_value = _pair(spec, "ack", (layout.TCP_ACK, layout.TCP_ACK))
    stb, counter = h["stb"], h["counter"]
    alarm = []
    if spec.param("alarm") is not None:
        # report (half_open, now) each time a new flow lifts the count to the alarm level
        alarm = [
            ins(Op.BRANCH_EQ, S0, 0, 4),
            ins(Op.BRANCH_NE, S2, _positive(spec, "alarm"), 3),
            ins(Op.TIMESTAMP, S1),
            ins(Op.GEN_PKT, pid, CONTROLLER_PORT, (S2, S1)),
        ]
    # counter moves only when the table really changes, so it always equals the table size
    body = [
        *_flag_test(flags, syn_mask, syn_value, 3 + len(alarm)),
        ins(Op.STB_INSERT, stb, signature, 1, S0),
        ins(Op.CNTR_ADD, counter, S0, S2),
        *alarm,
        ins(Op.BRANCH_EQ, 0, 0, 7),
        *_flag_test(flags, ack_mask, ack_value, 3),
        ins(Op.STB_DELETE, stb, signature, S0),
        ins(Op.BRANCH_EQ, S0, 0, 2),
        ins(Op.CNTR_ADD, counter, -1, None),
    ]
    return ProbeProgram(ActionBlock.of(_guarded(spec, body)))


def _flow_duration(spec, pid, h, device):
    flags = _ref(spec.param("flags", layout.TCP_FLAGS))
    start_mask, start_value = _pair(spec, "start", (layout.TCP_SYN, layout.TCP_SYN))
    end_mask, end_value = _pair(spec, "end", (layout.TCP_FIN, layout.TCP_FIN))
    state, start_ts = h["state"], h["start_ts"]
    body = [
        ins(Op.TIMESTAMP, S1),
        ins(Op.REG_READ, state, S0),
        *_flag_test(flags, start_mask, start_value, 3),
        ins(Op.BRANCH_NE, S0, 0, 3),
        ins(Op.REG_WRITE, state, 1),
        ins(Op.REG_WRITE, start_ts, S1),
        *_flag_test(flags, end_mask, end_value, 5),
        ins(Op.BRANCH_EQ, S0, 0, 5),
        ins(Op.REG_READ, start_ts, S2),
        ins(Op.GEN_PKT, pid, CONTROLLER_PORT, (S2, S1)),
        ins(Op.REG_WRITE, state, 0),
        ins(Op.REG_WRITE, start_ts, 0),
    ]
    return ProbeProgram(ActionBlock.of(body))


def _crossing(pid: int, old_cond, new_cond, mark: int, direction: int) -> List[Instruction]:
    """Report (mark, direction, depth, now) when old zone passes old_cond and new passes new_cond."""
    old_op, old_v = old_cond
    new_op, new_v = new_cond
    return [
        ins(old_op, S1, old_v, 5),
        ins(new_op, S0, new_v, 4),
        ins(Op.SET_FIELD, S3, mark),
        ins(Op.SET_FIELD, S4, direction),
        ins(Op.GEN_PKT, pid, CONTROLLER_PORT, (S3, S4, layout.QUEUE_DEPTH, S2)),
    ]


def _queue_watermark(spec, pid, h, device):
    low, high = _watermarks(spec, device)
    reg = h["zone"]
    ge, lt = Op.BRANCH_GE, Op.BRANCH_LT
    # each group is skipped unless its mark was crossed in its direction
    crossings = (
        _crossing(pid, (ge, 1), (lt, 1), 0, 1)      # rising past low
        + _crossing(pid, (ge, 2), (lt, 2), 1, 1)    # rising past high
        + _crossing(pid, (lt, 2), (ge, 2), 1, 0)    # falling below high
        + _crossing(pid, (lt, 1), (ge, 1), 0, 0)    # falling below low
    )
    body = [
        ins(Op.SET_FIELD, S0, 0),
        ins(Op.BRANCH_LT, layout.QUEUE_DEPTH, low, 4),
        ins(Op.ADD, S0, 1),
        ins(Op.BRANCH_LT, layout.QUEUE_DEPTH, high, 2),
        ins(Op.ADD, S0, 1),
        ins(Op.REG_READ, reg, S1),
        ins(Op.BRANCH_EQ, S0, S1, 3 + len(crossings)),
        ins(Op.TIMESTAMP, S2),
        ins(Op.REG_WRITE, reg, S0),
        *crossings,
    ]
    return ProbeProgram(ActionBlock.of(body))


def _filter(spec, pid, h, device):
    fields = _refs(spec.param("digest_fields", ()))
    body = []
    if "sampler" in h:
        body += [ins(Op.SAMPLE_TEST, h["sampler"], S0), ins(Op.BRANCH_EQ, S0, 0, 2)]
    body.append(ins(Op.GEN_PKT, pid, CONTROLLER_PORT, fields))
    return ProbeProgram(ActionBlock.of(_guarded(spec, body)))


def _latency_source(spec, pid, h, device):
    port = spec.param("port")
    if port is None or int(port) not in device.ports:
        raise ProbeSpecError(f"latency_source needs a physical port of {device.device_id}, got {port!r}")
    seq = h["seq"]
    timer_block = ActionBlock.of([
        ins(Op.TIMESTAMP, S0),
        ins(Op.REG_READ, seq, S1),
        ins(Op.SET_FIELD, S2, pid),
        ins(Op.GEN_PKT, int(ReportTemplate.LATENCY_PROBE), int(port), (S0, S2, S1)),
        ins(Op.ADD, S1, 1),
        ins(Op.REG_WRITE, seq, S1),
        ins(Op.HALT),
    ])
    mode = TimerMode.ONE_SHOT if spec.param("one_shot", False) else TimerMode.PERIODIC
    return ProbeProgram(None, timer_block, _interval(spec, NS_PER_SEC), mode)


def _latency_sink(spec, pid, h, device):
    body = [
        ins(Op.BRANCH_NE, PROBE_ETHERTYPE_REF, PROBE_ETHERTYPE, 5),
        ins(Op.BRANCH_NE, PROBE_MARKER_REF, PROBE_MARKER, 4),
        ins(Op.TIMESTAMP, S0),
        ins(Op.GEN_PKT, pid, CONTROLLER_PORT, (PROBE_TS_REF, S0)),
        ins(Op.DROP),
    ]
    return ProbeProgram(ActionBlock.of(body))


_BUILDERS = {
    ProbeKind.COUNTER: _counter,
    ProbeKind.THRESHOLD_PUSH: _threshold_push,
    ProbeKind.TIMER_POLL: _timer_poll,
    ProbeKind.FSM_HALF_OPEN: _fsm_half_open,
    ProbeKind.FLOW_DURATION: _flow_duration,
    ProbeKind.QUEUE_WATERMARK: _queue_watermark,
    ProbeKind.FILTER: _filter,
    ProbeKind.LATENCY_SOURCE: _latency_source,
    ProbeKind.LATENCY_SINK: _latency_sink,
}
