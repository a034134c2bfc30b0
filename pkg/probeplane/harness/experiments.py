"""
Experiment drivers: scripted scenarios on a simulated network, baseline
comparison, deployment-latency measurement and the throughput bench.

Scenario scripts are JSON, a list of timed control actions (or
{"actions": [...]}); `at` is virtual nanoseconds:

    [{"at": 1000000000, "do": "probe_install", "device": "A",
      "spec": {"kind": "counter", "attach": {"kind": "port_ingress", "port": 1}}},
     {"at": 1500000000, "do": "query_run", "query": "query_link_latency.json"},
     {"at": 1800000000, "do": "query_revoke", "handle": "lat-ab/lat-ab"}]

Actions:

    probe_install   device, spec[, app]
    probe_revoke    device, probe_id[, force]
    query_run       query (inline or file)[, app]
    query_revoke    handle
    config_load     device, config (inline or file)
    hook            device, point ("ingress" | "egress"), port, asm
    permissive      device, value
    enqueue         device, port[, count, size]
    dequeue         device, port[, count]
    deploy_dynamic  device, spec          (timed; see measure_deploy)
    deploy_static   device[, config]      (timed; see measure_deploy)
"""
import asyncio
import logging
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from probeplane.channel.codec import MsgType
from probeplane.controller.collector import Controller
from probeplane.controller.query import Query
from probeplane.controller.topology import Topology, resolve_document
from probeplane.dataplane.config import load_config
from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import PacketBuffer, is_probe_packet
from probeplane.errors import ScriptError, SeedMismatch
from probeplane.harness import traffic as traffic_mod
from probeplane.harness.simnet import SimNetwork
from probeplane.harness.traffic import TrafficProfile
from probeplane.probes.runtime import DnpRuntime
from probeplane.probes.spec import AttachKind, AttachPoint, ProbeKind, ProbeSpec
from probeplane.settings import SETTINGS, Settings
from probeplane.utils.json_utils import canonical_dumps
from probeplane.vm.assembler import assemble
from probeplane.vm.cost import DeviceCaps, estimate_throughput

logger = logging.getLogger(__name__)

ACTIONS = ("probe_install", "probe_revoke", "query_run", "query_revoke", "config_load", "hook",
           "permissive", "enqueue", "dequeue", "deploy_dynamic", "deploy_static")
SETTLE_NS = 10_000_000


@dataclass(frozen=True)
class ScriptAction:
    at: int
    do: str
    args: dict
    index: int = 0


def parse_script(script, end_ns: Optional[int] = None) -> List[ScriptAction]:
    """Validate a script; every action must be known and fall within [0, end_ns]."""
    if isinstance(script, dict):
        script = script.get("actions", [])
    actions = []
    for i, item in enumerate(script or []):
        if not isinstance(item, dict) or "do" not in item:
            raise ScriptError(f"action {i}: needs a 'do' field")
        if item["do"] not in ACTIONS:
            raise ScriptError(f"action {i}: unknown action {item['do']!r}")
        try:
            at = int(item.get("at", 0))
        except (TypeError, ValueError):
            raise ScriptError(f"action {i}: bad time {item.get('at')!r}") from None
        if at < 0 or (end_ns is not None and at > end_ns):
            raise ScriptError(f"action {i}: time {at} outside the traffic span [0, {end_ns}]")
        args = {k: v for k, v in item.items() if k not in ("at", "do")}
        actions.append(ScriptAction(at, item["do"], args, i))
    return sorted(actions, key=lambda a: (a.at, a.index))


@dataclass
class ExperimentRecord:
    seed: int
    until: int = 0
    emissions: List[list] = field(default_factory=list)
    reports: List[list] = field(default_factory=list)
    drops: Dict[str, int] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    timeline: List[list] = field(default_factory=list)
    results: Dict[str, List[dict]] = field(default_factory=dict)
    wall_pps: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "until": self.until, "emissions": self.emissions, "reports": self.reports,
            "drops": self.drops, "counts": self.counts, "timeline": self.timeline, "results": self.results,
            "wall_pps": self.wall_pps,
        }

    def dumps(self) -> str:
        return canonical_dumps(self.to_dict())

    def rows(self, handle: str, name: str) -> list:
        return [r["values"].get(name) for r in self.results.get(handle, [])]


@dataclass
class ScenarioRun:
    net: SimNetwork
    controller: Controller
    timeline: List[list] = field(default_factory=list)
    measurements: List[dict] = field(default_factory=list)
    base_dir: Optional[str] = None


def _query(doc, base_dir) -> Query:
    return Query.from_dict(resolve_document(doc, base_dir))


async def perform_action(run: ScenarioRun, action: ScriptAction, settings: Settings) -> None:
    net, ctl, a = run.net, run.controller, action.args
    now = net.now
    try:
        if action.do == "probe_install":
            spec = ProbeSpec.from_dict(resolve_document(a["spec"], run.base_dir))
            reply = await ctl.call(a["device"], MsgType.PROBE_INSTALL, app_id=a.get("app", ""), spec=spec.to_dict())
            run.timeline.append([now, "probe_install", a["device"], reply["value"]])
        elif action.do == "probe_revoke":
            await ctl.call(a["device"], MsgType.PROBE_REVOKE, probe_id=int(a["probe_id"]), force=int(a.get("force", 0)))
            run.timeline.append([now, "probe_revoke", a["device"], int(a["probe_id"])])
        elif action.do == "query_run":
            handle = await ctl.run_query(_query(a["query"], run.base_dir), a.get("app"))
            run.timeline.append([now, "query_run", handle.handle_id])
        elif action.do == "query_revoke":
            await ctl.revoke_query(a["handle"])
            run.timeline.append([now, "query_revoke", a["handle"]])
        elif action.do == "config_load":
            reply = await ctl.call(a["device"], MsgType.CONFIG_LOAD, config=resolve_document(a["config"], run.base_dir))
            run.timeline.append([now, "config_load", a["device"], reply["value"]])
        elif action.do == "hook":
            slot = (await ctl.call(a["device"], MsgType.LOAD_ACTION, slot=None, block=assemble(a["asm"])))["value"]
            await ctl.call(a["device"], MsgType.SET_POINTER, holder=f"{a['point']}:{int(a['port'])}", slot=slot)
            run.timeline.append([now, "hook", a["device"], a["point"], int(a["port"]), slot])
        elif action.do == "permissive":
            net.devices[a["device"]].permissive = bool(a.get("value", True))
            run.timeline.append([now, "permissive", a["device"], bool(a.get("value", True))])
        elif action.do == "enqueue":
            data = bytes(int(a.get("size", 64)))
            for _ in range(int(a.get("count", 1))):
                net.enqueue(a["device"], int(a["port"]), data)
            run.timeline.append([now, "enqueue", a["device"], int(a["port"]), int(a.get("count", 1))])
        elif action.do == "dequeue":
            for _ in range(int(a.get("count", 1))):
                net.dequeue(a["device"], int(a["port"]))
            run.timeline.append([now, "dequeue", a["device"], int(a["port"]), int(a.get("count", 1))])
        elif action.do == "deploy_dynamic":
            await _deploy_dynamic(run, a)
        elif action.do == "deploy_static":
            await _deploy_static(run, a, settings)
    except KeyError as e:
        raise ScriptError(f"action {action.index} ({action.do}) is missing {e}") from None


async def _deploy_dynamic(run: ScenarioRun, a: dict) -> None:
    device = a["device"]
    spec = ProbeSpec.from_dict(resolve_document(a["spec"], run.base_dir))
    t0 = time.perf_counter()
    reply = await run.controller.call(device, MsgType.PROBE_INSTALL, app_id="", spec=spec.to_dict())
    wall = time.perf_counter() - t0
    run.measurements.append({"mode": "dynamic", "device": device, "latency_s": wall, "window_ns": 0,
                             "at": run.net.now, "offline_before": run.net.devices[device].counters.offline_drops})
    run.timeline.append([run.net.now, "deploy_dynamic", device, reply["value"]])


async def _deploy_static(run: ScenarioRun, a: dict, settings: Settings) -> None:
    device_id = a["device"]
    device = run.net.devices[device_id]
    doc = a.get("config") or run.net.topology.device(device_id).pipeline
    doc = resolve_document(doc, run.base_dir)
    offline_before = device.counters.offline_drops
    t0 = time.perf_counter()
    device.online = False
    await run.controller.call(device_id, MsgType.CONFIG_LOAD, config=doc)
    wall = time.perf_counter() - t0
    # the device stays out of service for the reprogramming window in virtual time
    window = max(settings.static_min_window_ns, int(wall * 1e9))

    def back_online():
        device.online = True

    run.net.call_at(run.net.now + window, back_online)
    run.measurements.append({"mode": "static", "device": device_id, "latency_s": wall, "window_ns": window,
                             "at": run.net.now, "offline_before": offline_before})
    run.timeline.append([run.net.now, "deploy_static", device_id, window])


async def drive(run: ScenarioRun, actions: List[ScriptAction], until: int, settings: Settings) -> None:
    i = 0
    while True:
        due = run.controller.next_poll_due()
        candidates = [until] + ([actions[i].at] if i < len(actions) else []) + ([due] if due is not None else [])
        t = min(candidates)
        run.net.run_until(t)
        await run.controller.pump()
        if due is not None and due <= t:
            await run.controller.poll(t)
        while i < len(actions) and actions[i].at <= t:
            await perform_action(run, actions[i], settings)
            i += 1
            await run.controller.pump()
        if t >= until:
            break


def _span(topology: Topology, profile: TrafficProfile, actions: List[ScriptAction]) -> int:
    latest = max([profile.end_ns] + [a.at for a in actions])
    slowest = max([link.latency_ns for link in topology.links] or [0])
    return latest + 2 * slowest + SETTLE_NS


async def run_scenario_async(topology: Topology, profile: TrafficProfile, script=(), *,
                             settings: Settings = SETTINGS, until: Optional[int] = None,
                             base_dir: Optional[str] = None, packets=None) -> Tuple[ExperimentRecord, ScenarioRun]:
    actions = parse_script(script, profile.end_ns)
    net = SimNetwork(topology, settings=settings)
    controller = Controller(topology, hub=net.hub, clock=net.clock)
    await controller.connect(net.addresses())
    device = profile.device or sorted(topology.devices)[0]
    if packets is None:
        packets = traffic_mod.load(profile)
    net.inject_trace(device, packets)
    run = ScenarioRun(net, controller, base_dir=base_dir)
    horizon = _span(topology, profile, actions) if until is None else until
    try:
        await drive(run, actions, horizon, settings)
    finally:
        await controller.close()
    record = ExperimentRecord(
        seed=profile.seed,
        until=horizon,
        emissions=net.log.emissions,
        reports=net.log.reports,
        drops=dict(sorted(net.log.drops.items())),
        counts={**net.conservation(), "probe_drops": net.log.probe_drops},
        timeline=run.timeline,
        results={h["handle"]: controller.results(h["handle"]).to_records() for h in controller.list_queries()},
    )
    logger.info("scenario seed %d: %d emissions, %d reports, %d drops", profile.seed,
                len(record.emissions), len(record.reports), sum(record.drops.values()))
    return record, run


def run_scenario(topology: Topology, profile: TrafficProfile, script=(), **kwargs) -> ExperimentRecord:
    """Run a scripted scenario to completion; same inputs give a byte-identical record."""
    record, _ = asyncio.run(run_scenario_async(topology, profile, script, **kwargs))
    return record


# ---------------- baseline comparison -----------------

@dataclass
class BaselineDiff:
    missing: List[list] = field(default_factory=list)  # in the baseline, not in the other run
    extra: List[list] = field(default_factory=list)    # in the other run only
    probe_packets_ignored: int = 0

    @property
    def empty(self) -> bool:
        return not self.missing and not self.extra

    def to_dict(self) -> dict:
        return {"missing": self.missing, "extra": self.extra, "probe_packets_ignored": self.probe_packets_ignored}


def compare_baseline(baseline: ExperimentRecord, other: ExperimentRecord) -> BaselineDiff:
    """Diff physical-port emissions, ignoring controller reports and marked probe packets."""
    if baseline.seed != other.seed:
        raise SeedMismatch(f"records come from seeds {baseline.seed} and {other.seed}")
    ignored = 0

    def forwarded(record):
        nonlocal ignored
        out = []
        for e in record.emissions:
            if is_probe_packet(bytes.fromhex(e[3])):
                ignored += 1
                continue
            out.append(tuple(e))
        return Counter(out)

    a, b = forwarded(baseline), forwarded(other)
    diff = BaselineDiff(
        missing=[list(e) for e in sorted((a - b).elements())],
        extra=[list(e) for e in sorted((b - a).elements())],
        probe_packets_ignored=ignored,
    )
    return diff


# ---------------- deployment latency -----------------

@dataclass
class DeployMeasurement:
    mode: str
    latency_s: float
    window_ns: int
    dropped: int

    def to_dict(self) -> dict:
        return vars(self).copy()


def measure_deploy(topology: Topology, profile: TrafficProfile, mode: str, *, device: Optional[str] = None,
                   spec: Optional[dict] = None, at: Optional[int] = None,
                   settings: Settings = SETTINGS) -> DeployMeasurement:
    """
    Deploy monitoring mid-traffic, either as a runtime probe install
    ("dynamic") or as a full pipeline teardown and reload ("static").
    """
    if mode not in ("dynamic", "static"):
        raise ValueError(f"mode must be dynamic or static, got {mode!r}")
    device = device or profile.device or sorted(topology.devices)[0]
    at = profile.start_ns + profile.duration_ns // 2 if at is None else at
    if mode == "dynamic":
        port = topology.device(device).ports[0]
        spec = spec or ProbeSpec(ProbeKind.COUNTER, AttachPoint(AttachKind.PORT_INGRESS, port=port)).to_dict()
        action = {"at": at, "do": "deploy_dynamic", "device": device, "spec": spec}
    else:
        action = {"at": at, "do": "deploy_static", "device": device}
    profile = replace(profile, device=device)
    _, run = asyncio.run(run_scenario_async(topology, profile, [action], settings=settings))
    m = run.measurements[0]
    dropped = run.net.devices[device].counters.offline_drops - m["offline_before"]
    result = DeployMeasurement(mode, m["latency_s"], m["window_ns"], dropped)
    logger.info("%s deploy on %s: %.6fs wall, %dns window, %d dropped", mode, device,
                result.latency_s, result.window_ns, result.dropped)
    return result


# ---------------- throughput bench -----------------

@dataclass
class BenchPoint:
    n_probes: int
    mem_accesses: int
    pps_runs: List[float]
    pps: float
    predicted: float = 0.0

    @property
    def ratio(self) -> float:
        return self.pps / self.predicted if self.predicted else 0.0

    def to_dict(self) -> dict:
        return {"n_probes": self.n_probes, "mem_accesses": self.mem_accesses, "pps": self.pps,
                "predicted_pps": self.predicted, "ratio": self.ratio, "pps_runs": self.pps_runs}


def _bench_device(pipeline: dict, n: int, settings: Settings) -> Tuple[Device, DnpRuntime]:
    bench_settings = replace(settings, max_block_len=max(settings.max_block_len, n + 16))
    device = Device("bench", settings=bench_settings, caps=DeviceCaps(floor_pps=1.0))
    load_config(device, pipeline)
    runtime = DnpRuntime(device, bench_settings)
    port = device.ports[0]
    for _ in range(n):
        runtime.install(ProbeSpec(ProbeKind.COUNTER, AttachPoint(AttachKind.PORT_INGRESS, port=port)))
    return device, runtime


def calibrate(points: Sequence[BenchPoint]) -> DeviceCaps:
    """Least-squares fit of the serial cost model 1/pps = 1/base + mem/budget."""
    mem = np.array([p.mem_accesses for p in points], dtype=float)
    inv = np.array([1.0 / p.pps for p in points], dtype=float)
    design = np.vstack([np.ones_like(mem), mem]).T
    (intercept, slope), *_ = np.linalg.lstsq(design, inv, rcond=None)
    intercept = max(float(intercept), 1e-12)
    slope = max(float(slope), 1e-15)
    return DeviceCaps(base_pps=1.0 / intercept, mem_access_budget_per_sec=1.0 / slope, serial=True)


def bench_throughput(pipeline_config: Union[dict, str, None] = None,
                     probes_per_packet: Sequence[int] = (0, 1, 2, 4, 8, 16, 32, 64), *,
                     runs: int = 3, packets: int = 2048, seed: int = 0,
                     settings: Settings = SETTINGS, tracker=None) -> List[BenchPoint]:
    """
    Wall-clock packets/sec of one device with n counter probes on every
    packet, median of `runs`; annotated with the calibrated serial model.
    """
    pipeline = resolve_document(pipeline_config or "pipeline_line.json")
    n_flows = 32
    profile = TrafficProfile(seed=seed, n_flows=n_flows, packets_per_flow=max(1, packets // n_flows))
    frames = [p.data for p in traffic_mod.generate(profile)[0]]
    points = []
    for n in probes_per_packet:
        device, runtime = _bench_device(pipeline, n, settings)
        port = device.ports[0]
        samples = []
        for _ in range(max(3, runs)):
            t0 = time.perf_counter()
            for data in frames:
                device.process_packet(PacketBuffer(data, port))
            samples.append(len(frames) / max(time.perf_counter() - t0, 1e-9))
        point = BenchPoint(n, runtime.active_cost.mem_accesses, samples, statistics.median(samples))
        points.append(point)
        logger.debug("bench n=%d: %.0f pps", n, point.pps)
    caps = calibrate(points)
    for point, n in zip(points, probes_per_packet):
        _, runtime = _bench_device(pipeline, n, settings)
        point.predicted = estimate_throughput(runtime.active_cost, caps)
        if tracker is not None:
            tracker.record("bench", n_probes=n, mem_accesses=point.mem_accesses,
                           pps=round(point.pps, 1), predicted_pps=round(point.predicted, 1))
    return points


def curve_frame(points: Sequence[BenchPoint]):
    """The curve as a pandas DataFrame (one row per probe count)."""
    return pd.DataFrame([{k: v for k, v in p.to_dict().items() if k != "pps_runs"} for p in points])


def write_curve(points: Sequence[BenchPoint], path: str) -> None:
    curve_frame(points).to_csv(path, index=False)

