import random

import pytest
from scapy.layers.inet import IP, TCP
from scapy.layers.l2 import Ether
from scapy.packet import Raw

from probeplane.controller.collector import Controller
from probeplane.controller.topology import Topology, resolve_document
from probeplane.dataplane.config import load_config
from probeplane.dataplane.device import Device
from probeplane.harness.simnet import SimNetwork
from probeplane.settings import SETTINGS


def tcp_frame(dst="10.0.0.5", src="192.168.0.9", flags="S", sport=40000, dport=80, size=64) -> bytes:
    pkt = (Ether(src="02:00:00:00:00:01", dst="02:00:00:00:00:02")
           / IP(src=src, dst=dst, id=0)
           / TCP(sport=sport, dport=dport, flags=flags, seq=0, ack=0, window=8192))
    pad = size - len(pkt)
    if pad > 0:
        pkt = pkt / Raw(bytes(pad))
    return bytes(pkt)


@pytest.fixture
def frame():
    return tcp_frame


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def settings():
    return SETTINGS


@pytest.fixture
def line_pipeline():
    return resolve_document("pipeline_line.json")


@pytest.fixture
def device(line_pipeline, settings):
    dev = Device("A", ports=[1, 2], settings=settings)
    load_config(dev, line_pipeline)
    return dev


@pytest.fixture
def topology():
    """A - B - C with 5ms and 1ms links."""
    return Topology.from_file("topology_line.json")


@pytest.fixture
async def network(topology):
    net = SimNetwork(topology)
    controller = Controller(topology, hub=net.hub, clock=net.clock)
    await controller.connect(net.addresses())
    yield net, controller
    await controller.close()
