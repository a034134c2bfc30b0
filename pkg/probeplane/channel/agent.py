"""
Device side of the control channel: decodes requests, applies them to the
device (or its probe runtime) and answers every request with exactly one
reply. Errors never tear the session down; they become ERROR replies.
"""
import asyncio
import logging
from typing import Callable, Dict, List, Optional

from probeplane.channel.codec import NO_SLOT, Message, MsgType, ack, decode, encode, error_message, holder_from_text, msg
from probeplane.channel.session import FrameChannel, StreamChannel
from probeplane.dataplane.config import dump_config, load_config
from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import Report
from probeplane.dataplane.tables import TableDef
from probeplane.errors import CodecError, ProbePlaneError, SessionClosed, UnknownType
from probeplane.probes.runtime import DnpRuntime
from probeplane.probes.spec import ProbeSpec
from probeplane.resources.types import ResourceClass, TimerMode

logger = logging.getLogger(__name__)


def report_message(report: Report) -> Message:
    return msg(MsgType.REPORT, 0, device_id=report.device_id, template=int(report.template),
               ts=report.ts, values=tuple(int(v) for v in report.values), payload=bytes(report.payload))


def report_from_message(message: Message) -> Report:
    return Report(message["device_id"], message["template"], message["ts"],
                  tuple(message["values"]), message["payload"])


class DeviceAgent:
    def __init__(self, device: Device, runtime: Optional[DnpRuntime] = None):
        self.device = device
        self.runtime = runtime or DnpRuntime(device, device.settings)
        self.channels: List[FrameChannel] = []
        self.on_config_load: Optional[Callable[[Device], None]] = None
        self._handlers: Dict[MsgType, Callable[[Message], Message]] = {
            MsgType.HELLO: lambda m: ack(m.xid, len(self.device.ports)),
            MsgType.LOAD_ACTION: self._load_action,
            MsgType.DELETE_ACTION: lambda m: self._ack(m, self.device.delete_action(m["slot"])),
            MsgType.SWITCH_POINTER: lambda m: self._ack(m, self.device.switch_action_pointer(m["slot"], m["block_ref"])),
            MsgType.CREATE_TABLE: self._create_table,
            MsgType.DELETE_TABLE: lambda m: self._ack(m, self.device.delete_table(m["table_id"]).table_id),
            MsgType.INSERT_ENTRY: lambda m: self._ack(m, self.device.insert_entry(
                m["table_id"], m["key"], m["priority"], m["slot"], m["params"])),
            MsgType.DELETE_ENTRY: lambda m: self._ack(m, self.device.delete_entry(m["table_id"], m["entry_id"]).entry_id),
            MsgType.MODIFY_ENTRY: self._modify_entry,
            MsgType.SET_POINTER: self._set_pointer,
            MsgType.ALLOC_RESOURCE: lambda m: self._ack(m, self.device.alloc(ResourceClass(m["cls"]), m["params"]).index),
            MsgType.RELEASE_RESOURCE: lambda m: self._ack(m, self.device.release(m["handle"])),
            MsgType.SET_TIMER: lambda m: self._ack(m, self.device.set_timer(m["interval"], TimerMode(m["mode"]), m["slot"])),
            MsgType.CANCEL_TIMER: lambda m: self._ack(m, self.device.cancel_timer(m["timer_id"]).timer_id),
            MsgType.READ_COUNTER_REQ: self._read_counter,
            MsgType.STB_DUMP_REQ: self._stb_dump,
            MsgType.PROBE_INSTALL: self._probe_install,
            MsgType.PROBE_REVOKE: lambda m: self._ack(m, self.runtime.revoke(m["probe_id"], force=bool(m["force"]))),
            MsgType.SUBSCRIBE: lambda m: self._ack(m, self.runtime.subscribe(m["probe_id"], m["app_id"])),
            MsgType.UNSUBSCRIBE: lambda m: self._ack(m, self.runtime.unsubscribe(m["probe_id"], m["app_id"])),
            MsgType.PROBE_CHECK: self._probe_check,
            MsgType.PROBE_QUERY_REQ: lambda m: msg(MsgType.PROBE_QUERY_REPLY, m.xid,
                                                   result=self.runtime.query(m["probe_id"])),
            MsgType.SNAPSHOT_REQ: lambda m: msg(MsgType.SNAPSHOT_REPLY, m.xid, snapshot=self.snapshot()),
            MsgType.CONFIG_LOAD: self._config_load,
            MsgType.CONFIG_DUMP_REQ: lambda m: msg(MsgType.CONFIG_DUMP_REPLY, m.xid, config=dump_config(self.device)),
        }

    # ---------------- request handling -----------------

    @staticmethod
    def _ack(message: Message, value) -> Message:
        return ack(message.xid, value if isinstance(value, int) else 0)

    def _load_action(self, m: Message) -> Message:
        return ack(m.xid, self.device.load_action(m["block"], slot=m["slot"]))

    def _create_table(self, m: Message) -> Message:
        table_def = TableDef(m["table_id"], m["key_spec"], m["miss_slot"], bool(m["writable"]))
        return ack(m.xid, self.device.create_table(table_def, after=m["after"]))

    def _modify_entry(self, m: Message) -> Message:
        params = m["params"] if m["set_params"] else None
        self.device.modify_entry(m["table_id"], m["entry_id"], action_slot=m["slot"], params=params)
        return ack(m.xid)

    def _set_pointer(self, m: Message) -> Message:
        previous = self.device.set_pointer(holder_from_text(m["holder"]), m["slot"])
        return ack(m.xid, NO_SLOT if previous is None else previous)

    def _read_counter(self, m: Message) -> Message:
        reading = self.device.read_counter(m["handle"])
        return msg(MsgType.READ_COUNTER_REPLY, m.xid, value=reading.value, unit=int(reading.unit), ts=reading.read_ts)

    def _stb_dump(self, m: Message) -> Message:
        entries = [[hex(k), v, ts] for k, v, ts in self.device.stb_dump(m["handle"])]
        return msg(MsgType.STB_DUMP_REPLY, m.xid, entries=entries)

    def _probe_install(self, m: Message) -> Message:
        spec = ProbeSpec.from_dict(m["spec"])
        handle = self.runtime.install(spec, app_id=m["app_id"] or None)
        return ack(m.xid, handle.probe_id)

    def _probe_check(self, m: Message) -> Message:
        specs = [ProbeSpec.from_dict(d) for d in m["specs"]]
        decision = self.runtime.probe_check(specs)
        return msg(MsgType.PROBE_CHECK_REPLY, m.xid, accepted=int(decision.accepted),
                   estimate=float(decision.estimate), floor=float(decision.floor),
                   candidates=tuple(decision.candidates))

    def _config_load(self, m: Message) -> Message:
        # static path: the old pipeline and every probe on it are gone
        self.device.teardown()
        self.runtime = DnpRuntime(self.device, self.device.settings)
        slots = load_config(self.device, m["config"])
        if self.on_config_load is not None:
            self.on_config_load(self.device)
        return ack(m.xid, len(slots))

    def snapshot(self) -> dict:
        snap = self.device.snapshot()
        snap["probes"] = self.runtime.snapshot()["probes"]
        return snap

    def handle(self, message: Message) -> Message:
        handler = self._handlers.get(message.type)
        if handler is None:
            return error_message(message.xid, UnknownType.code, f"unsupported request {message.type.name}")
        try:
            return handler(message)
        except ProbePlaneError as e:
            logger.debug("%s: %s failed: %s", self.device.device_id, message.type.name, e)
            return error_message(message.xid, e.code, str(e))
        except (ValueError, KeyError, TypeError) as e:
            logger.debug("%s: %s rejected: %r", self.device.device_id, message.type.name, e)
            return error_message(message.xid, ProbePlaneError.code, f"{type(e).__name__}: {e}")

    def handle_frame(self, frame: bytes) -> Optional[bytes]:
        try:
            message = decode(frame)
        except UnknownType as e:
            return encode(error_message(e.xid, e.code, str(e)))
        except CodecError as e:
            logger.warning("%s: undecodable frame: %s", self.device.device_id, e)
            return encode(error_message(0, e.code, str(e)))
        return encode(self.handle(message))

    async def serve(self, channel: FrameChannel) -> None:
        """Answer requests on `channel` until the peer goes away."""
        self.channels.append(channel)
        try:
            while True:
                frame = await channel.recv()
                reply = self.handle_frame(frame)
                if reply is not None:
                    await channel.send(reply)
        except SessionClosed:
            pass
        finally:
            if channel in self.channels:
                self.channels.remove(channel)

    # ---------------- push -----------------

    def publish(self, reports) -> int:
        """Push REPORT messages to every connected session, in emission order."""
        sent = 0
        for report in reports:
            frame = encode(report_message(report))
            for channel in list(self.channels):
                try:
                    channel.send_nowait(frame)
                    sent += 1
                except SessionClosed:
                    self.channels.remove(channel)
        return sent


async def serve_tcp(agent: DeviceAgent, host: str = "127.0.0.1", port: int = 0) -> asyncio.AbstractServer:
    """Listen for controller sessions on a stream socket."""
    async def on_connect(reader, writer):
        await agent.serve(StreamChannel(reader, writer))

    server = await asyncio.start_server(on_connect, host, port)
    logger.info("%s: agent listening on %s", agent.device.device_id,
                ", ".join(str(s.getsockname()) for s in server.sockets))
    return server
