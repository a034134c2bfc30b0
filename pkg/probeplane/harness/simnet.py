"""
Deterministic virtual-time network of devices.

Every device shares one virtual clock. Work happens in (time, seq) order:
injected packets, link arrivals, queue drains and scheduled calls are heap
events; device timers are serviced in time order between them (a timer due
at the same instant as an event fires first). A packet sent over a link of
latency L arrives at exactly send time + L.
"""
import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from probeplane.channel.agent import DeviceAgent
from probeplane.channel.session import InprocHub
from probeplane.controller.topology import Topology
from probeplane.dataplane.config import load_config
from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import ForwardingOutcome, PacketBuffer, Report, is_probe_packet
from probeplane.resources.clock import VirtualClock
from probeplane.settings import SETTINGS, Settings

logger = logging.getLogger(__name__)


@dataclass(order=True)
class Event:
    time: int
    seq: int
    kind: str = field(compare=False)
    args: tuple = field(compare=False, default=())


@dataclass
class Conservation:
    injected: int = 0
    generated: int = 0
    emitted: int = 0
    dropped: int = 0
    absorbed: int = 0  # handed to the controller port

    def as_dict(self, in_flight: int) -> dict:
        return {**vars(self), "in_flight": in_flight}


@dataclass
class NetworkLog:
    emissions: List[list] = field(default_factory=list)  # [ts, device, port, hex]
    reports: List[list] = field(default_factory=list)    # [ts, device, template, values]
    drops: Dict[str, int] = field(default_factory=dict)  # forwarded traffic only
    probe_drops: int = 0  # marked probe packets consumed or missed
    drop_reasons: Dict[str, int] = field(default_factory=dict)
    hops: int = 0


class SimNetwork:
    def __init__(self, topology: Topology, *, settings: Settings = SETTINGS, hub: Optional[InprocHub] = None):
        self.topology = topology
        self.settings = settings
        self.clock = VirtualClock()
        self.hub = hub or InprocHub()
        self.devices: Dict[str, Device] = {}
        self.agents: Dict[str, DeviceAgent] = {}
        self.log = NetworkLog()
        self.counts = Conservation()
        self._events: List[Event] = []
        self._seq = itertools.count()
        self._draining: Dict[Tuple[str, int], bool] = {}
        for device_id in sorted(topology.devices):
            info = topology.devices[device_id]
            device = Device(device_id, ports=info.ports, settings=settings, clock=self.clock, caps=info.caps)
            if info.pipeline is not None:
                load_config(device, info.pipeline)
            agent = DeviceAgent(device)
            self.devices[device_id] = device
            self.agents[device_id] = agent
            self.hub.register(device_id, agent)

    def __repr__(self):
        return f"SimNetwork(devices={sorted(self.devices)}, now={self.now})"

    @property
    def now(self) -> int:
        return self.clock.now()

    def addresses(self) -> Dict[str, str]:
        return {d: f"inproc://{d}" for d in self.devices}

    # ---------------- scheduling -----------------

    def schedule(self, time: int, kind: str, *args) -> Event:
        if time < self.now:
            raise ValueError(f"cannot schedule {kind} in the past ({time} < {self.now})")
        event = Event(time, next(self._seq), kind, args)
        heapq.heappush(self._events, event)
        return event

    def inject(self, time: int, device: str, port: int, data: bytes) -> None:
        self.schedule(time, "inject", device, port, bytes(data))

    def inject_trace(self, device: str, packets) -> int:
        for p in packets:
            self.inject(p.ts, device, p.port, p.data)
        return len(packets)

    def call_at(self, time: int, fn: Callable[[], None]) -> None:
        self.schedule(time, "call", fn)

    def pending(self) -> int:
        return len(self._events)

    def next_time(self) -> Optional[int]:
        times = [self._events[0].time] if self._events else []
        timer = self._next_timer()
        if timer is not None:
            times.append(timer[0])
        return min(times) if times else None

    def in_flight(self) -> int:
        on_links = sum(1 for e in self._events if e.kind == "arrive")
        queued = sum(q.depth for d in self.devices.values() for q in d.queues.values())
        return on_links + queued

    # ---------------- running -----------------

    def _next_timer(self) -> Optional[Tuple[int, str]]:
        best = None
        for device_id, device in self.devices.items():
            due = device.next_timer_due()
            if due is not None and (best is None or (due, device_id) < best):
                best = (due, device_id)
        return best

    def _set_clock(self, t: int) -> None:
        if t > self.now:
            self.clock.set(t)

    def run_until(self, until: int) -> int:
        """Process everything due at or before `until`; returns the number of steps taken."""
        steps = 0
        while True:
            timer = self._next_timer()
            event_time = self._events[0].time if self._events else None
            if timer is not None and timer[0] <= until and (event_time is None or timer[0] <= event_time):
                self._set_clock(timer[0])
                self._fire_timers(self.devices[timer[1]], timer[0])
            elif event_time is not None and event_time <= until:
                event = heapq.heappop(self._events)
                self._set_clock(event.time)
                self._dispatch(event)
            else:
                break
            steps += 1
        self._set_clock(until)
        return steps

    def run(self) -> int:
        """Run until no packet events remain (periodic timers alone do not keep it going)."""
        steps = 0
        while self._events:
            steps += self.run_until(self._events[0].time)
        return steps

    def _dispatch(self, event: Event) -> None:
        if event.kind == "inject":
            self.counts.injected += 1
            self._receive(*event.args)
        elif event.kind == "arrive":
            self._receive(*event.args)
        elif event.kind == "drain":
            self._drain(*event.args)
        elif event.kind == "call":
            event.args[0]()
        else:
            raise ValueError(f"unknown event kind {event.kind!r}")

    def _receive(self, device_id: str, port: int, data: bytes) -> None:
        device = self.devices[device_id]
        outcome = device.process_packet(PacketBuffer(data, port, self.now))
        if outcome.dropped:
            self.counts.dropped += 1
            if is_probe_packet(data):
                self.log.probe_drops += 1
            else:
                self.log.drops[device_id] = self.log.drops.get(device_id, 0) + 1
            reason = outcome.drop_reason or "unknown"
            self.log.drop_reasons[reason] = self.log.drop_reasons.get(reason, 0) + 1
        elif not outcome.emitted and not outcome.queued:
            self.counts.absorbed += 1
        self._settle(device, outcome)

    def _fire_timers(self, device: Device, at: int) -> None:
        for firing in device.advance_clock(at):
            self.counts.generated += len(firing.outcome.emitted)
            self._settle(device, firing.outcome)

    def _drain(self, device_id: str, port: int) -> None:
        device = self.devices[device_id]
        outcome = device.dequeue(port)
        self._settle(device, outcome)
        queue = device.queues.get(port)
        if queue is not None and queue.depth and queue.service_ns:
            self.schedule(self.now + queue.service_ns, "drain", device_id, port)
        else:
            self._draining[(device_id, port)] = False

    def _settle(self, device: Device, outcome: ForwardingOutcome) -> None:
        if outcome.reports:
            self._report(device, outcome.reports)
        for port, data in outcome.emitted:
            self._transmit(device.device_id, port, data)
        for port in outcome.queued:
            queue = device.queues.get(port)
            key = (device.device_id, port)
            if queue is not None and queue.service_ns and not self._draining.get(key):
                self._draining[key] = True
                self.schedule(self.now + queue.service_ns, "drain", device.device_id, port)

    def _report(self, device: Device, reports: List[Report]) -> None:
        for r in reports:
            self.log.reports.append([r.ts, r.device_id, int(r.template), [int(v) for v in r.values]])
        self.agents[device.device_id].publish(reports)

    def _transmit(self, device_id: str, port: int, data: bytes) -> None:
        peer = self.topology.peer(device_id, port)
        if peer is None:
            self.counts.emitted += 1
            self.log.emissions.append([self.now, device_id, port, data.hex()])
            return
        far_device, far_port, link = peer
        self.log.hops += 1
        self.schedule(self.now + link.latency_ns, "arrive", far_device, far_port, data)

    # ---------------- scripted queue load -----------------

    def enqueue(self, device_id: str, port: int, data: bytes) -> None:
        """Put a packet straight onto an egress queue; counts as injected."""
        self.counts.injected += 1
        outcome = self.devices[device_id].enqueue(port, data)
        if outcome.dropped:
            self.counts.dropped += 1
            self.log.drops[device_id] = self.log.drops.get(device_id, 0) + 1
        self._settle(self.devices[device_id], outcome)

    def dequeue(self, device_id: str, port: int) -> None:
        self._settle(self.devices[device_id], self.devices[device_id].dequeue(port))

    # ---------------- accounting -----------------

    def conservation(self) -> dict:
        return self.counts.as_dict(self.in_flight())

    def conserved(self) -> bool:
        c = self.counts
        return c.injected + c.generated == c.emitted + c.dropped + c.absorbed + self.in_flight()

    def probe_packets_emitted(self) -> int:
        return sum(1 for e in self.log.emissions if is_probe_packet(bytes.fromhex(e[3])))
