"""
Seeded traffic and recorded traces.

A generated profile yields TCP flows (Ethernet/IPv4/TCP built with scapy)
whose packets follow a handshake pattern: SYN, then ACK-flagged packets,
then FIN|ACK. A fraction `never_acked` of the flows only ever sends SYNs.
The same profile and seed always give the same packet sequence.

Trace files are a flat run of little-endian records

    u64 ts_ns | u16 port | u32 length | length bytes

and pcap captures can be imported through scapy.
"""
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from scapy.layers.inet import IP, TCP
from scapy.layers.l2 import Ether
from scapy.packet import Raw
from scapy.utils import rdpcap

from probeplane.errors import ConfigError
from probeplane.utils.file_utils import dump_bytes, load_bytes

logger = logging.getLogger(__name__)

TRACE_RECORD = struct.Struct("<QHI")
HEADER_BYTES = 54  # Ethernet + IPv4 + TCP, no options


@dataclass(frozen=True)
class TracePacket:
    ts: int
    port: int
    data: bytes
    flow: int = -1


@dataclass(frozen=True)
class TrafficProfile:
    """
    What to inject and where. `trace` (a trace or .pcap path) replaces the
    generator; generated packets land on `ports` of `device`, one port per flow.
    """
    seed: int = 0
    device: str = ""
    ports: Tuple[int, ...] = (1,)
    n_flows: int = 16
    packets_per_flow: int = 8
    duration_ns: int = 1_000_000_000
    start_ns: int = 0
    sizes: Tuple[int, int] = (64, 256)
    never_acked: float = 0.0
    dst_prefix: Tuple[int, int] = (0x0A000000, 12)  # 10.0.0.0/12
    trace: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrafficProfile":
        try:
            prefix = d.get("dst_prefix", [0x0A000000, 12])
            return cls(
                seed=int(d.get("seed", 0)), device=str(d.get("device", "")),
                ports=tuple(int(p) for p in d.get("ports", [1])),
                n_flows=int(d.get("n_flows", 16)), packets_per_flow=int(d.get("packets_per_flow", 8)),
                duration_ns=int(d.get("duration_ns", 1_000_000_000)), start_ns=int(d.get("start_ns", 0)),
                sizes=tuple(int(s) for s in d.get("sizes", [64, 256])),
                never_acked=float(d.get("never_acked", 0.0)),
                dst_prefix=(int(prefix[0]), int(prefix[1])), trace=d.get("trace"),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad traffic profile: {e}") from None

    @property
    def end_ns(self) -> int:
        return self.start_ns + self.duration_ns


@dataclass
class FlowTruth:
    """Ground truth about one generated flow, for oracles."""
    flow: int
    src: str
    dst: str
    sport: int
    dport: int
    acked: bool
    packets: List[int] = field(default_factory=list)  # indexes into the packet list


def _ip(value: int) -> str:
    return ".".join(str((value >> s) & 0xFF) for s in (24, 16, 8, 0))


def _frame(rng: random.Random, flow: FlowTruth, flags: str, size: int) -> bytes:
    pkt = (Ether(src="02:00:00:00:00:01", dst="02:00:00:00:00:02")
           / IP(src=flow.src, dst=flow.dst, id=0)
           / TCP(sport=flow.sport, dport=flow.dport, flags=flags, seq=0, ack=0, window=8192))
    pad = max(0, size - HEADER_BYTES)
    if pad:
        pkt = pkt / Raw(bytes(rng.getrandbits(8) for _ in range(pad)))
    return bytes(pkt)


def generate(profile: TrafficProfile) -> Tuple[List[TracePacket], List[FlowTruth]]:
    rng = random.Random(profile.seed)
    prefix, plen = profile.dst_prefix
    host_bits = 32 - plen
    lo, hi = profile.sizes
    flows: List[FlowTruth] = []
    timed = []
    for f in range(profile.n_flows):
        flow = FlowTruth(
            flow=f,
            src=_ip(0xC0A80000 | rng.randrange(1, 1 << 16)),
            dst=_ip(prefix | rng.randrange(1, 1 << host_bits)),
            sport=rng.randrange(1024, 65536),
            dport=rng.choice((80, 443, 8080, rng.randrange(1024, 65536))),
            acked=rng.random() >= profile.never_acked,
        )
        flows.append(flow)
        port = profile.ports[f % len(profile.ports)]
        times = sorted(rng.randrange(profile.duration_ns) for _ in range(profile.packets_per_flow))
        n = len(times)
        for i, t in enumerate(times):
            if not flow.acked or i == 0:
                flags = "S"
            elif i == n - 1 and n > 2:
                flags = "FA"
            else:
                flags = "A" if i == 1 else "PA"
            timed.append((profile.start_ns + t, f, i, port, _frame(rng, flow, flags, rng.randint(lo, hi))))
    timed.sort(key=lambda p: (p[0], p[1], p[2]))
    packets = []
    for ts, f, _, port, data in timed:
        flows[f].packets.append(len(packets))
        packets.append(TracePacket(ts, port, data, f))
    logger.debug("generated %d packets in %d flows (seed %d)", len(packets), len(flows), profile.seed)
    return packets, flows


def load(profile: TrafficProfile) -> List[TracePacket]:
    """The profile's packets: its trace file if it names one, generated otherwise."""
    if profile.trace is None:
        return generate(profile)[0]
    if profile.trace.endswith((".pcap", ".pcapng")):
        return import_pcap(profile.trace, profile.ports[0], profile.start_ns)
    return read_trace(profile.trace)


# ---------------- trace files -----------------

def encode_trace(packets: List[TracePacket]) -> bytes:
    out = bytearray()
    for p in packets:
        out += TRACE_RECORD.pack(p.ts, p.port, len(p.data))
        out += p.data
    return bytes(out)


def decode_trace(data: bytes) -> List[TracePacket]:
    packets = []
    at = 0
    while at < len(data):
        if at + TRACE_RECORD.size > len(data):
            raise ConfigError(f"trace truncated in record header at byte {at}")
        ts, port, length = TRACE_RECORD.unpack_from(data, at)
        at += TRACE_RECORD.size
        if at + length > len(data):
            raise ConfigError(f"trace truncated in packet body at byte {at}")
        packets.append(TracePacket(ts, port, bytes(data[at:at + length])))
        at += length
    return packets


def write_trace(packets: List[TracePacket], path: str) -> None:
    dump_bytes(encode_trace(packets), path)


def read_trace(path: str) -> List[TracePacket]:
    return decode_trace(load_bytes(path))


def import_pcap(path: str, port: int, start_ns: int = 0) -> List[TracePacket]:
    """Capture packets, re-timed so the first one arrives at `start_ns`."""
    captured = rdpcap(path)
    if not captured:
        return []
    t0 = captured[0].time
    return [TracePacket(start_ns + int((p.time - t0) * 1_000_000_000), port, bytes(p)) for p in captured]
