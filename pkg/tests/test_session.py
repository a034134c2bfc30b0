import asyncio

import pytest

from probeplane.channel.agent import DeviceAgent
from probeplane.channel.codec import HEADER, MsgType, ack, decode, encode, msg
from probeplane.channel.session import InprocHub, Session, channel_pair, connect
from probeplane.dataplane.packet import Report, ReportTemplate
from probeplane.errors import NoSuchProbe, RemoteError, SessionClosed, UnknownType, XidTimeout
from probeplane.resources.types import ResourceClass
from probeplane.vm import assemble


@pytest.fixture
def hub(device):
    hub = InprocHub()
    hub.register("A", DeviceAgent(device))
    return hub


async def test_replies_match_by_xid_in_any_order():
    ours, theirs = channel_pair()
    session = Session(ours, name="fake").start()
    futures = [await session.submit(msg(MsgType.HELLO)) for _ in range(3)]
    requests = [decode(await theirs.recv()) for _ in range(3)]
    for request in reversed(requests):
        await theirs.send(encode(ack(request.xid, request.xid * 10)))
    replies = await asyncio.gather(*futures)
    assert [r["value"] for r in replies] == [r.xid * 10 for r in requests]
    await session.close()


async def test_silent_peer_times_out():
    ours, _theirs = channel_pair()
    session = Session(ours, name="mute", timeout=0.01).start()
    with pytest.raises(XidTimeout):
        await session.request(msg(MsgType.HELLO))
    await session.close()


async def test_peer_going_away_fails_pending_requests():
    ours, theirs = channel_pair()
    session = Session(ours, name="gone").start()
    future = await session.submit(msg(MsgType.HELLO))
    await theirs.close()
    with pytest.raises(SessionClosed):
        await future
    with pytest.raises(SessionClosed):
        await session.submit(msg(MsgType.HELLO))


async def test_handshake_reports_port_count(hub):
    session = await connect("inproc://A", hub=hub)
    reply = await session.call(msg(MsgType.HELLO))
    assert reply["value"] == 2
    await session.close()


async def test_device_errors_come_back_as_remote_errors(hub):
    session = await connect("inproc://A", hub=hub)
    with pytest.raises(RemoteError) as info:
        await session.call(msg(MsgType.PROBE_REVOKE, probe_id=99, force=0))
    assert info.value.remote_code == NoSuchProbe.code
    # the session survives the error
    assert (await session.call(msg(MsgType.ALLOC_RESOURCE, cls=int(ResourceClass.COUNTER), params=())))["value"] == 0
    await session.close()


async def test_agent_drives_the_device(hub, device):
    session = await connect("inproc://A", hub=hub)
    slot = (await session.call(msg(MsgType.LOAD_ACTION, slot=None, block=assemble("DROP"))))["value"]
    assert device.block_at(slot) == assemble("DROP")
    previous = await session.call(msg(MsgType.SET_POINTER, holder="ingress:1", slot=slot))
    assert previous["value"] == 0xFFFFFFFF
    await session.close()


def test_unknown_message_type_gets_an_error_with_its_xid(device):
    agent = DeviceAgent(device)
    reply = decode(agent.handle_frame(HEADER.pack(1, 200, 31, 0)))
    assert reply.type == MsgType.ERROR
    assert (reply.xid, reply["code"]) == (31, UnknownType.code)


async def test_reports_arrive_in_order(hub, device):
    session = await connect("inproc://A", hub=hub)
    agent = hub.agents["A"]
    reports = [Report("A", ReportTemplate.MISS, ts, (ts, 2**100)) for ts in range(5)]
    assert agent.publish(reports) == 5
    await session.call(msg(MsgType.HELLO))
    got = session.drain_reports()
    assert [m["ts"] for m in got] == list(range(5))
    assert got[0]["values"] == (0, 2**100)
    await session.close()


async def test_damaged_frames_leave_the_agent_serving(device):
    ours, theirs = channel_pair()
    serving = asyncio.create_task(DeviceAgent(device).serve(theirs))
    hello = encode(msg(MsgType.HELLO, 7))
    damaged = [
        hello[:3],
        HEADER.pack(2, int(MsgType.HELLO), 8, 0),
        HEADER.pack(1, int(MsgType.HELLO), 9, 4),
        hello + b"\x00",
        HEADER.pack(1, 250, 10, 0),
    ]
    for frame in damaged:
        await ours.send(frame)
        assert decode(await ours.recv()).type == MsgType.ERROR
    await ours.send(hello)
    reply = decode(await ours.recv())
    assert (reply.type, reply.xid, reply["value"]) == (MsgType.ACK, 7, 2)
    await ours.close()
    await serving
