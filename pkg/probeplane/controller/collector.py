"""
The controller: one session per device, query deployment across devices,
pull polling, push report routing and post-processing into result rows.

Deployment is all-or-nothing. Admission is checked on every target device
before anything is installed, probes go live in the plan's constraint
order, identical probes already on a device are shared by subscription,
and any failure revokes everything this deployment did.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from probeplane.channel.agent import report_from_message
from probeplane.channel.codec import MsgType, msg
from probeplane.channel.session import DEFAULT_HUB, InprocHub, Session, connect
from probeplane.controller.compiler import PostProcess, QueryPlan, compile_query
from probeplane.controller.query import Query, QueryMode, ResultRow, ResultSet
from probeplane.controller.topology import Topology
from probeplane.dataplane.packet import Report
from probeplane.errors import AdmissionRejected, DeployFailed, NoSuchQuery, ProbePlaneError, SessionClosed
from probeplane.probes.catalog import NS_PER_SEC
from probeplane.probes.spec import ProbeSpec
from probeplane.resources.clock import WallClock

logger = logging.getLogger(__name__)


@dataclass
class DeployedProbe:
    device: str
    probe_id: int
    spec: ProbeSpec
    subscribers: Set[str] = field(default_factory=set)
    resources: Dict[str, str] = field(default_factory=dict)


class Reducer:
    """Applies a plan's post-processing to reports and poll reads, one row per input."""

    def __init__(self, plan: QueryPlan):
        self.plan = plan
        self._sums: Dict[int, int] = {}
        self._counts: Dict[int, int] = {}
        self._last_read: Dict[int, Tuple[int, int]] = {}

    def on_report(self, probe: str, ts: int, values: tuple) -> Optional[dict]:
        named = dict(zip(self.plan.probe(probe).fields, values))
        return self._apply(probe, "report", ts, named)

    def on_poll(self, probe: str, ts: int, values: dict) -> Optional[dict]:
        return self._apply(probe, "poll", ts, values)

    def _apply(self, probe: str, source: str, ts: int, named: dict) -> Optional[dict]:
        out = {}
        for i, post in enumerate(self.plan.post):
            if post.probe == probe and post.source == source:
                out.update(self._one(i, post, ts, named))
        return out or None

    def _one(self, i: int, post: PostProcess, ts: int, named: dict) -> dict:
        if post.op == "subtract":
            a, b = post.inputs
            return {post.output: named[a] - named[b]}
        if post.op == "sum":
            self._sums[i] = self._sums.get(i, 0) + named[post.inputs[0]]
            return {post.output: self._sums[i]}
        if post.op == "count":
            self._counts[i] = self._counts.get(i, 0) + 1
            return {post.output: self._counts[i]}
        if post.op == "rate":
            name = post.inputs[0]
            value = named[name]
            if post.source == "report":
                return {name: value, post.output: value * NS_PER_SEC / post.interval_ns}
            previous = self._last_read.get(i)
            self._last_read[i] = (ts, value)
            if previous is None:
                return {}
            dt = ts - previous[0]
            return {name: value, post.output: (value - previous[1]) * NS_PER_SEC / dt if dt > 0 else 0.0}
        # dump
        if len(post.inputs) == 1 and post.output != "value":
            return {post.output: named[post.inputs[0]]}
        return {name: named[name] for name in post.inputs}


@dataclass
class QueryHandle:
    handle_id: str
    app_id: str
    plan: QueryPlan
    probes: Dict[str, DeployedProbe]
    results: ResultSet
    reducer: Reducer
    next_poll: Optional[int] = None
    active: bool = True

    @property
    def query_id(self) -> str:
        return self.plan.query.query_id

    @property
    def one_shot(self) -> bool:
        return self.plan.query.mode == QueryMode.ONE_SHOT

    def to_dict(self) -> dict:
        return {
            "handle": self.handle_id,
            "query_id": self.query_id,
            "kind": self.plan.query.kind.value,
            "mode": self.plan.query.mode.value,
            "active": self.active,
            "probes": {name: [p.device, p.probe_id] for name, p in sorted(self.probes.items())},
            "rows": len(self.results.rows),
            "complete": self.results.complete,
        }


class Controller:
    def __init__(self, topology: Topology, *, hub: InprocHub = DEFAULT_HUB, timeout: Optional[float] = None,
                 clock=None, trace=None):
        self.topology = topology
        self.hub = hub
        self.timeout = timeout
        self.clock = clock or WallClock()
        self.trace = trace
        self.sessions: Dict[str, Session] = {}
        self.deployed: Dict[Tuple[str, str], DeployedProbe] = {}
        self.handles: Dict[str, QueryHandle] = {}
        self.finished: Dict[str, QueryHandle] = {}
        self.report_log: List[Report] = []

    # ---------------- sessions -----------------

    async def connect(self, addresses: Dict[str, str]) -> None:
        for device in sorted(addresses):
            self.sessions[device] = await connect(addresses[device], hub=self.hub,
                                                  timeout=self.timeout, trace=self.trace)
        logger.info("controller connected to %d devices", len(self.sessions))

    def session(self, device: str) -> Session:
        session = self.sessions.get(device)
        if session is None or session.closed:
            raise SessionClosed(f"no session to {device}")
        return session

    async def close(self) -> None:
        for session in self.sessions.values():
            await session.close()
        self.sessions.clear()

    async def call(self, device: str, msg_type: MsgType, **body):
        return await self.session(device).call(msg(msg_type, 0, **body))

    async def snapshot(self, device: str) -> dict:
        return (await self.call(device, MsgType.SNAPSHOT_REQ))["snapshot"]

    # ---------------- deployment -----------------

    def _handle_id(self, app_id: str, query_id: str) -> str:
        base = f"{app_id}/{query_id}"
        if base not in self.handles and base not in self.finished:
            return base
        n = 2
        while f"{base}#{n}" in self.handles or f"{base}#{n}" in self.finished:
            n += 1
        return f"{base}#{n}"

    async def check_admission(self, plan: QueryPlan) -> None:
        """Dry-run every device's share of `plan`; raise before anything is installed."""
        fresh: Dict[str, List[ProbeSpec]] = {}
        for probe in plan.probes:
            if (probe.device, probe.spec.canonical()) not in self.deployed:
                fresh.setdefault(probe.device, []).append(probe.spec)
        for device in sorted(fresh):
            reply = await self.call(device, MsgType.PROBE_CHECK, specs=[s.to_dict() for s in fresh[device]])
            if not reply["accepted"]:
                raise AdmissionRejected(reply["estimate"], reply["floor"], device, reply["candidates"])

    async def deploy(self, plan: QueryPlan, app_id: Optional[str] = None) -> QueryHandle:
        app_id = app_id or plan.query.query_id
        for device in plan.devices:
            self.session(device)
        await self.check_admission(plan)

        handle_id = self._handle_id(app_id, plan.query.query_id)
        done: List[Tuple[str, DeployedProbe]] = []
        probes: Dict[str, DeployedProbe] = {}
        for planned in plan.deploy_order():
            key = (planned.device, planned.spec.canonical())
            shared = self.deployed.get(key)
            try:
                if shared is not None:
                    await self.call(planned.device, MsgType.SUBSCRIBE, probe_id=shared.probe_id, app_id=handle_id)
                    shared.subscribers.add(handle_id)
                    done.append(("subscribe", shared))
                    probes[planned.name] = shared
                    continue
                reply = await self.call(planned.device, MsgType.PROBE_INSTALL, app_id=handle_id,
                                        spec=planned.spec.to_dict())
                deployed = DeployedProbe(planned.device, reply["value"], planned.spec, {handle_id})
                self.deployed[key] = deployed
                done.append(("install", deployed))
                info = await self.call(planned.device, MsgType.PROBE_QUERY_REQ, probe_id=deployed.probe_id)
                deployed.resources = dict(info["result"]["resources"])
                probes[planned.name] = deployed
            except ProbePlaneError as e:
                logger.warning("deploy of %s failed on %s: %s; rolling back %d steps",
                               handle_id, planned.device, e, len(done))
                await self._undo(handle_id, done)
                raise DeployFailed(planned.device, e) from e

        handle = QueryHandle(handle_id, app_id, plan, probes, ResultSet(plan.query.query_id), Reducer(plan))
        if plan.poll is not None:
            handle.next_poll = self.clock.now() + plan.poll.interval_ns
        self.handles[handle_id] = handle
        logger.info("deployed %s: %s", handle_id,
                    ", ".join(f"{p.device}#{p.probe_id}" for p in probes.values()))
        return handle

    async def _undo(self, handle_id: str, done: List[Tuple[str, DeployedProbe]]) -> None:
        for action, probe in reversed(done):
            try:
                if action == "install":
                    await self.call(probe.device, MsgType.PROBE_REVOKE, probe_id=probe.probe_id, force=1)
                    self.deployed.pop((probe.device, probe.spec.canonical()), None)
                else:
                    await self.call(probe.device, MsgType.UNSUBSCRIBE, probe_id=probe.probe_id, app_id=handle_id)
                    probe.subscribers.discard(handle_id)
            except ProbePlaneError as e:
                logger.error("rollback step %s %s#%d failed: %s", action, probe.device, probe.probe_id, e)

    async def run_query(self, query: Query, app_id: Optional[str] = None) -> QueryHandle:
        return await self.deploy(compile_query(query, self.topology), app_id)

    def handle(self, handle_id: str) -> QueryHandle:
        handle = self.handles.get(handle_id)
        if handle is None:
            raise NoSuchQuery(f"no active query {handle_id!r}")
        return handle

    async def revoke_query(self, handle_id: str) -> None:
        """Unsubscribe; probes left without subscribers are revoked on their device."""
        handle = self.handle(handle_id)
        for planned in reversed(handle.plan.deploy_order()):
            probe = handle.probes[planned.name]
            if handle_id not in probe.subscribers:
                continue
            probe.subscribers.discard(handle_id)
            remaining = (await self.call(probe.device, MsgType.UNSUBSCRIBE,
                                         probe_id=probe.probe_id, app_id=handle_id))["value"]
            if remaining == 0:
                await self.call(probe.device, MsgType.PROBE_REVOKE, probe_id=probe.probe_id, force=0)
                self.deployed.pop((probe.device, probe.spec.canonical()), None)
        handle.active = False
        self.finished[handle_id] = self.handles.pop(handle_id)
        logger.info("revoked %s", handle_id)

    async def refine_query(self, handle_id: str, query: Query) -> QueryHandle:
        """Replace a continuous query with a new version: revoke, then deploy the new plan."""
        old = self.handle(handle_id)
        plan = compile_query(query, self.topology)
        await self.revoke_query(handle_id)
        return await self.deploy(plan, old.app_id)

    # ---------------- collection -----------------

    def _owner(self, device: str, probe_id: int) -> List[Tuple[QueryHandle, str]]:
        owners = []
        for handle in self.handles.values():
            for name, probe in handle.probes.items():
                if probe.device == device and probe.probe_id == probe_id and handle.active:
                    owners.append((handle, name))
        return owners

    def _emit(self, handle: QueryHandle, ts: int, values: Optional[dict]) -> None:
        if values is None or handle.results.complete:
            return
        handle.results.append(ResultRow(ts, dict(handle.plan.key), values))
        if handle.one_shot:
            handle.results.complete = True

    def route(self, report: Report) -> int:
        """Feed one pushed report to every query subscribed to its probe."""
        self.report_log.append(report)
        owners = self._owner(report.device_id, report.probe_id) if report.probe_id else []
        for handle, name in owners:
            self._emit(handle, report.ts, handle.reducer.on_report(name, report.ts, report.values))
        return len(owners)

    async def pump(self) -> int:
        """Route every report that has reached the controller so far."""
        routed = 0
        for device in sorted(self.sessions):
            session = self.sessions[device]
            await session.settle()
            for message in session.drain_reports():
                self.route(report_from_message(message))
                routed += 1
        await self._retire_one_shots()
        return routed

    def next_poll_due(self) -> Optional[int]:
        due = [h.next_poll for h in self.handles.values() if h.active and h.next_poll is not None]
        return min(due) if due else None

    async def poll(self, now: Optional[int] = None) -> int:
        """Run every poll that is due at `now`."""
        now = self.clock.now() if now is None else now
        polled = 0
        for handle in sorted(self.handles.values(), key=lambda h: h.handle_id):
            schedule = handle.plan.poll
            if schedule is None or handle.next_poll is None or handle.next_poll > now or handle.results.complete:
                continue
            probe = handle.probes[schedule.probe]
            info = (await self.call(probe.device, MsgType.PROBE_QUERY_REQ, probe_id=probe.probe_id))["result"]
            values = {name: info["values"].get(name, 0) for name in schedule.resources}
            self._emit(handle, info["read_ts"], handle.reducer.on_poll(schedule.probe, info["read_ts"], values))
            while handle.next_poll <= now:
                handle.next_poll += schedule.interval_ns
            polled += 1
        await self._retire_one_shots()
        return polled

    async def _retire_one_shots(self) -> None:
        for handle_id in [h.handle_id for h in self.handles.values() if h.one_shot and h.results.complete]:
            await self.revoke_query(handle_id)

    async def collect(self, handle_id: str) -> ResultSet:
        """Bring the results of a query up to date and return them."""
        if handle_id in self.finished:
            return self.finished[handle_id].results
        self.handle(handle_id)
        await self.pump()
        await self.poll()
        return self.results(handle_id)

    def results(self, handle_id: str) -> ResultSet:
        handle = self.handles.get(handle_id) or self.finished.get(handle_id)
        if handle is None:
            raise NoSuchQuery(f"no query {handle_id!r}")
        return handle.results

    def list_queries(self) -> List[dict]:
        return [h.to_dict() for h in sorted([*self.handles.values(), *self.finished.values()],
                                            key=lambda h: h.handle_id)]

    def report_records(self) -> List[dict]:
        return [{"device": r.device_id, "template": int(r.template), "ts": r.ts, "values": list(r.values)}
                for r in self.report_log]
