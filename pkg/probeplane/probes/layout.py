"""
Fixed field locations probe snippets rely on.

Probe scratch lives in metadata bytes 192..255 (eight 64-bit words); base
pipeline actions keep to bytes 0..191. Default header offsets assume
Ethernet + IPv4 without options + TCP, which is what the traffic generator
emits; every one of them can be overridden through probe params.
"""
from probeplane.dataplane.device import QUEUE_DEPTH_BITS
from probeplane.dataplane.packet import FieldRef, meta, pkt

SCRATCH_BASE_BITS = 192 * 8


def scratch(i: int) -> FieldRef:
    if not 0 <= i < 8:
        raise ValueError(f"scratch word {i} out of range")
    return meta(SCRATCH_BASE_BITS + 64 * i, 64)


QUEUE_DEPTH = meta(QUEUE_DEPTH_BITS, 64)

ETHERTYPE = pkt(96, 16)
IPV4_SRC = pkt(208, 32)
IPV4_DST = pkt(240, 32)
IPV4_PROTO = pkt(184, 8)
TCP_SPORT = pkt(272, 16)
TCP_DPORT = pkt(288, 16)
TCP_FLAGS = pkt(376, 8)
FLOW_SIGNATURE = (IPV4_SRC, IPV4_DST, TCP_SPORT, TCP_DPORT)

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_ACK = 0x10
