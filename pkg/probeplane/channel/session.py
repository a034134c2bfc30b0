"""
Controller-side sessions over a framed byte channel.

Two transports share the exact framing: an in-process pipe (harness mode,
address "inproc://<device>") and asyncio stream sockets (live mode,
address "tcp://host:port"). A session matches replies to requests by xid,
so requests can be pipelined and answered in any order, and hands REPORT
messages to an ordered queue.
"""
import asyncio
import itertools
import logging
from typing import AsyncIterator, Callable, Dict, Optional, Tuple

from probeplane.channel.codec import HEADER, HEADER_LEN, Message, MsgType, decode, describe_frame, encode
from probeplane.errors import CodecError, RemoteError, SessionClosed, XidTimeout

logger = logging.getLogger(__name__)


class FrameChannel:
    """One end of a bidirectional frame pipe."""

    async def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def send_nowait(self, frame: bytes) -> None:
        """Queue a frame from synchronous code (device report push)."""
        raise NotImplementedError

    async def recv(self) -> bytes:
        """Next complete frame; raises SessionClosed once the peer is gone."""
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError

    def pending(self) -> int:
        """Frames delivered to this end but not yet received."""
        return 0


class QueueChannel(FrameChannel):
    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue):
        self.inbox = inbox
        self.outbox = outbox
        self.closed = False

    async def send(self, frame: bytes) -> None:
        if self.closed:
            raise SessionClosed("channel closed")
        await self.outbox.put(bytes(frame))

    def send_nowait(self, frame: bytes) -> None:
        if self.closed:
            raise SessionClosed("channel closed")
        self.outbox.put_nowait(bytes(frame))

    async def recv(self) -> bytes:
        if self.closed:
            raise SessionClosed("channel closed")
        frame = await self.inbox.get()
        if frame is None:
            self.closed = True
            raise SessionClosed("peer closed the channel")
        return frame

    def pending(self) -> int:
        return self.inbox.qsize()

    async def close(self) -> None:
        if not self.closed:
            self.closed = True
            await self.outbox.put(None)


def channel_pair() -> Tuple[QueueChannel, QueueChannel]:
    a_to_b: asyncio.Queue = asyncio.Queue()
    b_to_a: asyncio.Queue = asyncio.Queue()
    return QueueChannel(b_to_a, a_to_b), QueueChannel(a_to_b, b_to_a)


class StreamChannel(FrameChannel):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer

    async def send(self, frame: bytes) -> None:
        if self.writer.is_closing():
            raise SessionClosed("socket closed")
        self.writer.write(frame)
        await self.writer.drain()

    def send_nowait(self, frame: bytes) -> None:
        if self.writer.is_closing():
            raise SessionClosed("socket closed")
        self.writer.write(frame)

    async def recv(self) -> bytes:
        try:
            head = await self.reader.readexactly(HEADER_LEN)
            body = await self.reader.readexactly(HEADER.unpack(head)[3])
        except (asyncio.IncompleteReadError, ConnectionError) as e:
            raise SessionClosed(f"socket closed: {e}") from None
        return head + body

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            pass


class InprocHub:
    """Registry of in-process device agents, addressed as inproc://<name>."""

    def __init__(self):
        self.agents: Dict[str, object] = {}
        self.tasks = []

    def register(self, name: str, agent) -> str:
        self.agents[name] = agent
        return f"inproc://{name}"

    def unregister(self, name: str) -> None:
        self.agents.pop(name, None)

    async def dial(self, name: str) -> FrameChannel:
        agent = self.agents.get(name)
        if agent is None:
            raise SessionClosed(f"no device listening at inproc://{name}")
        ours, theirs = channel_pair()
        self.tasks.append(asyncio.get_running_loop().create_task(agent.serve(theirs)))
        return ours


DEFAULT_HUB = InprocHub()


class Session:
    def __init__(self, channel: FrameChannel, *, name: str = "", timeout: Optional[float] = None,
                 trace: Optional[Callable[[str], None]] = None):
        self.channel = channel
        self.name = name
        self.timeout = timeout
        self.trace = trace
        self.reports: asyncio.Queue = asyncio.Queue()
        self._pending: Dict[int, asyncio.Future] = {}
        self._xids = itertools.count(1)
        self._reader: Optional[asyncio.Task] = None
        self.closed = False

    def start(self) -> "Session":
        self._reader = asyncio.get_running_loop().create_task(self._read_loop())
        return self

    def next_xid(self) -> int:
        xid = next(self._xids)
        while xid in self._pending:
            xid = next(self._xids)
        return xid & 0xFFFFFFFF

    async def _read_loop(self) -> None:
        try:
            while True:
                frame = await self.channel.recv()
                if self.trace:
                    self.trace(describe_frame(frame, f"<< {self.name} "))
                try:
                    message = decode(frame)
                except CodecError as e:
                    logger.warning("%s: dropped bad frame: %s", self.name, e)
                    continue
                if message.type == MsgType.REPORT:
                    await self.reports.put(message)
                    continue
                future = self._pending.pop(message.xid, None)
                if future is None:
                    logger.warning("%s: reply for unknown xid %d", self.name, message.xid)
                elif not future.done():
                    future.set_result(message)
        except SessionClosed as e:
            self._fail_all(e)
        except asyncio.CancelledError:
            self._fail_all(SessionClosed("session closed"))
            raise

    def _fail_all(self, error: SessionClosed) -> None:
        self.closed = True
        for xid, future in list(self._pending.items()):
            if not future.done():
                future.set_exception(SessionClosed(f"{self.name}: xid {xid}: {error}"))
        self._pending.clear()
        self.reports.put_nowait(None)

    async def submit(self, message: Message) -> asyncio.Future:
        """Send without waiting; the future resolves to the reply with the same xid."""
        if self.closed:
            raise SessionClosed(f"{self.name}: session closed")
        if not message.xid:
            message.xid = self.next_xid()
        future = asyncio.get_running_loop().create_future()
        self._pending[message.xid] = future
        frame = encode(message)
        if self.trace:
            self.trace(describe_frame(frame, f">> {self.name} "))
        try:
            await self.channel.send(frame)
        except SessionClosed:
            self._pending.pop(message.xid, None)
            raise
        return future

    async def request(self, message: Message) -> Message:
        """One reply per request: ACK, a typed reply, or ERROR."""
        future = await self.submit(message)
        xid = message.xid
        try:
            return await asyncio.wait_for(future, self.timeout)
        except asyncio.TimeoutError:
            self._pending.pop(xid, None)
            raise XidTimeout(f"{self.name}: no reply to xid {xid} within {self.timeout}s") from None

    async def call(self, message: Message) -> Message:
        """Like request(), but an ERROR reply is raised as RemoteError."""
        reply = await self.request(message)
        if reply.type == MsgType.ERROR:
            raise RemoteError(reply["code"], reply["detail"])
        return reply

    async def report_stream(self) -> AsyncIterator[Message]:
        while True:
            report = await self.reports.get()
            if report is None:
                return
            yield report

    async def settle(self) -> None:
        """Yield until every frame already delivered has been read and dispatched."""
        await asyncio.sleep(0)
        while self.channel.pending() and not self.closed:
            await asyncio.sleep(0)

    def drain_reports(self) -> list:
        """Every report received so far, in arrival order."""
        out = []
        while not self.reports.empty():
            report = self.reports.get_nowait()
            if report is None:
                self.reports.put_nowait(None)
                break
            out.append(report)
        return out

    async def close(self) -> None:
        if self._reader is not None:
            self._reader.cancel()
            try:
                await self._reader
            except (asyncio.CancelledError, SessionClosed):
                pass
        await self.channel.close()
        self.closed = True


async def connect(address: str, *, hub: InprocHub = DEFAULT_HUB, timeout: Optional[float] = None,
                  trace: Optional[Callable[[str], None]] = None) -> Session:
    if address.startswith("inproc://"):
        name = address[len("inproc://"):]
        channel = await hub.dial(name)
    elif address.startswith("tcp://"):
        host, _, port = address[len("tcp://"):].rpartition(":")
        try:
            reader, writer = await asyncio.open_connection(host, int(port))
        except OSError as e:
            raise SessionClosed(f"cannot reach {address}: {e}") from None
        channel = StreamChannel(reader, writer)
        name = address
    else:
        raise ValueError(f"unsupported address {address!r}")
    session = Session(channel, name=name, timeout=timeout, trace=trace).start()
    hello = await session.request(Message(MsgType.HELLO))
    if hello.type != MsgType.ACK:
        raise SessionClosed(f"{address}: handshake refused")
    logger.debug("connected to %s", address)
    return session
