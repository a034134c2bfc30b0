import random

import pytest

from probeplane.channel.codec import (
    BODIES,
    HEADER,
    HEADER_LEN,
    MsgType,
    NO_SLOT,
    decode,
    describe_frame,
    encode,
    holder_from_text,
    holder_to_text,
    iter_messages,
    msg,
    split_frames,
)
from probeplane.dataplane.packet import FieldRef, MatchKey
from probeplane.errors import BadLength, BadVersion, CodecError, Truncated, UnknownType
from probeplane.resources.types import Handle, ResourceClass
from probeplane.vm import assemble


def random_value(kind, rng):
    if kind in ("u8", "u16", "u32", "u64"):
        return rng.getrandbits({"u8": 8, "u16": 16, "u32": 32, "u64": 64}[kind])
    if kind == "slot":
        return None if rng.random() < 0.3 else rng.getrandbits(16)
    if kind == "f64":
        return rng.uniform(-1e9, 1e9)
    if kind == "str":
        return "".join(rng.choice("abcé/#:") for _ in range(rng.randrange(12)))
    if kind == "bytes":
        return bytes(rng.getrandbits(8) for _ in range(rng.randrange(40)))
    if kind == "json":
        return {"n": rng.randrange(100), "items": [rng.random() for _ in range(3)], "tag": "x"}
    if kind == "block":
        return assemble(f"CNTR_ADD counter:{rng.randrange(9)}, meta[0:64], -; "
                        "BRANCH_GE pkt[240:32], 7, +2; GEN_PKT 5, ctrl, [pkt[0:48]]; HALT")
    if kind == "key":
        mask = rng.getrandbits(32)
        return MatchKey(rng.getrandbits(32) & mask, mask, 32)
    if kind == "refs":
        return tuple(FieldRef.parse(f"pkt[{8 * rng.randrange(40)}:32]") for _ in range(rng.randrange(4)))
    if kind == "handle":
        return Handle(rng.choice(list(ResourceClass)), rng.getrandbits(20))
    if kind == "u64s":
        return tuple(rng.getrandbits(64) for _ in range(rng.randrange(5)))
    if kind == "u128s":
        return tuple(rng.getrandbits(128) for _ in range(rng.randrange(5)))
    raise AssertionError(kind)


@pytest.mark.parametrize("msg_type", list(MsgType))
def test_every_message_type_survives_the_wire(msg_type):
    rng = random.Random(int(msg_type))
    for _ in range(5):
        body = {name: random_value(kind, rng) for name, kind in BODIES[msg_type]}
        original = msg(msg_type, rng.getrandbits(32), **body)
        assert decode(encode(original)) == original


def random_message(msg_type, rng):
    body = {name: random_value(kind, rng) for name, kind in BODIES[msg_type]}
    return msg(msg_type, rng.getrandbits(32), **body)


@pytest.mark.slow
def test_ten_thousand_random_messages_survive_the_wire():
    rng = random.Random(2024)
    types = list(MsgType)
    for _ in range(10_000):
        original = random_message(rng.choice(types), rng)
        assert decode(encode(original)) == original


@pytest.mark.parametrize("msg_type", list(MsgType))
def test_damaged_frames_are_rejected(msg_type):
    rng = random.Random(1000 + int(msg_type))
    frame = encode(random_message(msg_type, rng))
    body_len = len(frame) - HEADER_LEN
    for n in range(len(frame)):
        with pytest.raises(Truncated):
            decode(frame[:n])
    damaged = [
        HEADER.pack(2, int(msg_type), 1, body_len) + frame[HEADER_LEN:],
        HEADER.pack(1, int(msg_type), 1, body_len + 1) + frame[HEADER_LEN:],
        frame + b"\x00",
    ]
    if body_len:
        damaged.append(HEADER.pack(1, int(msg_type), 1, body_len - 1) + frame[HEADER_LEN:])
    for data in damaged:
        with pytest.raises(CodecError):
            decode(data)
    # flipped body bytes either still parse or fail as a codec error, nothing else
    for _ in range(200):
        if not body_len:
            break
        data = bytearray(frame)
        data[HEADER_LEN + rng.randrange(body_len)] ^= 1 << rng.randrange(8)
        try:
            decode(bytes(data))
        except CodecError:
            pass


def test_header_layout():
    frame = encode(msg(MsgType.SUBSCRIBE, 77, probe_id=3, app_id="ops"))
    assert HEADER.unpack_from(frame) == (1, int(MsgType.SUBSCRIBE), 77, len(frame) - HEADER_LEN)


def test_short_frames_are_truncated():
    frame = encode(msg(MsgType.ACK, 1, value=9))
    with pytest.raises(Truncated):
        decode(frame[:HEADER_LEN - 1])
    with pytest.raises(Truncated):
        decode(frame[:-1])


def test_wrong_version_is_rejected():
    frame = bytearray(encode(msg(MsgType.HELLO, 1)))
    frame[0] = 2
    with pytest.raises(BadVersion):
        decode(bytes(frame))


def test_trailing_byte_is_rejected():
    with pytest.raises(BadLength):
        decode(encode(msg(MsgType.ACK, 1, value=9)) + b"\x00")


def test_body_that_disagrees_with_its_length():
    # a HELLO with a one-byte body: the length is consistent but the schema is empty
    frame = HEADER.pack(1, int(MsgType.HELLO), 5, 1) + b"\x00"
    with pytest.raises(BadLength):
        decode(frame)


def test_unknown_type_keeps_the_xid():
    with pytest.raises(UnknownType) as info:
        decode(HEADER.pack(1, 250, 42, 0))
    assert (info.value.msg_type, info.value.xid) == (250, 42)


def test_missing_and_extra_fields_refuse_to_encode():
    with pytest.raises(ValueError):
        encode(msg(MsgType.ACK, 1))
    with pytest.raises(ValueError):
        encode(msg(MsgType.HELLO, 1, value=3))


def test_no_slot_travels_as_all_ones():
    frame = encode(msg(MsgType.LOAD_ACTION, 3, slot=None, block=assemble("DROP")))
    assert frame[HEADER_LEN:HEADER_LEN + 4] == NO_SLOT.to_bytes(4, "little")
    assert decode(frame)["slot"] is None


def test_stream_splitting():
    frames = [encode(msg(MsgType.ACK, i, value=i)) for i in range(3)]
    stream = b"".join(frames)
    got, rest = split_frames(stream + frames[0][:4])
    assert got == frames and rest == frames[0][:4]
    assert [m.xid for m in iter_messages(stream)] == [0, 1, 2]
    with pytest.raises(Truncated):
        list(iter_messages(stream + b"\x01"))


def test_holders_as_text():
    assert holder_to_text(("entry", 0, 12)) == "entry:0:12"
    assert holder_from_text("timer:4") == ("timer", 4)


def test_describe_frame_never_raises():
    assert "ACK" in describe_frame(encode(msg(MsgType.ACK, 1, value=2)))
    assert "undecodable" in describe_frame(b"\x09\x09")
