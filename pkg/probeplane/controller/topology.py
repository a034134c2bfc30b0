"""
Network topology documents (JSON):

    {
      "devices": [
        {"id": "A", "ports": [1, 2], "pipeline": "pipeline_forward.json",
         "caps": {"base_pps": 10000000, "mem_access_budget_per_sec": 425000000}}
      ],
      "links": [
        {"a": "A", "port_a": 2, "b": "B", "port_b": 1, "latency_ns": 5000000, "capacity_pps": 0}
      ]
    }

`pipeline` is either an inline pipeline configuration or a file name,
looked up next to the topology file and then in probeplane/environments.
Links are bidirectional.
"""
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from probeplane.errors import ConfigError, UnresolvedSelector
from probeplane.utils.file_utils import f_exists, f_join
from probeplane.utils.json_utils import load_json
from probeplane.vm.cost import DeviceCaps

ENVIRONMENTS_DIR = f_join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "environments")


@dataclass(frozen=True)
class DeviceInfo:
    device_id: str
    ports: Tuple[int, ...]
    caps: DeviceCaps = field(default_factory=DeviceCaps)
    pipeline: Optional[dict] = None


@dataclass(frozen=True)
class Link:
    a: str
    port_a: int
    b: str
    port_b: int
    latency_ns: int = 0
    capacity_pps: int = 0

    def to_dict(self) -> dict:
        return {"a": self.a, "port_a": self.port_a, "b": self.b, "port_b": self.port_b,
                "latency_ns": self.latency_ns, "capacity_pps": self.capacity_pps}


class Topology:
    def __init__(self, devices: List[DeviceInfo], links: List[Link]):
        self.devices: Dict[str, DeviceInfo] = {}
        for d in devices:
            if d.device_id in self.devices:
                raise ConfigError(f"device {d.device_id!r} declared twice")
            self.devices[d.device_id] = d
        self.links = list(links)
        self._peers: Dict[Tuple[str, int], Tuple[str, int, Link]] = {}
        for link in self.links:
            if link.latency_ns < 0:
                raise ConfigError(f"link {link.a}.{link.port_a}-{link.b}.{link.port_b} has negative latency")
            for end_dev, end_port in ((link.a, link.port_a), (link.b, link.port_b)):
                if end_dev not in self.devices or end_port not in self.devices[end_dev].ports:
                    raise ConfigError(f"link references missing port {end_dev}.{end_port}")
                if (end_dev, end_port) in self._peers:
                    raise ConfigError(f"port {end_dev}.{end_port} is on two links")
            self._peers[(link.a, link.port_a)] = (link.b, link.port_b, link)
            self._peers[(link.b, link.port_b)] = (link.a, link.port_a, link)

    def __repr__(self):
        return f"Topology(devices={sorted(self.devices)}, links={len(self.links)})"

    def device(self, device_id: str) -> DeviceInfo:
        try:
            return self.devices[device_id]
        except KeyError:
            raise UnresolvedSelector(f"unknown device {device_id!r}") from None

    def port(self, device_id: str, port: int) -> int:
        if int(port) not in self.device(device_id).ports:
            raise UnresolvedSelector(f"device {device_id!r} has no port {port}")
        return int(port)

    def peer(self, device_id: str, port: int) -> Optional[Tuple[str, int, Link]]:
        """Far end of the link on (device, port), or None for an edge port."""
        return self._peers.get((device_id, port))

    def link_between(self, a: str, port_a: int, b: str, port_b: int) -> Link:
        peer = self.peer(a, port_a)
        if peer is None or peer[:2] != (b, port_b):
            raise UnresolvedSelector(f"no link {a}.{port_a} -> {b}.{port_b}")
        return peer[2]

    def edge_ports(self, device_id: str) -> List[int]:
        return [p for p in self.device(device_id).ports if (device_id, p) not in self._peers]

    def to_dict(self) -> dict:
        return {
            "devices": [{"id": d.device_id, "ports": list(d.ports)} for d in self.devices.values()],
            "links": [link.to_dict() for link in self.links],
        }

    # ---------------- loading -----------------

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[str] = None) -> "Topology":
        try:
            devices = [_device(d, base_dir) for d in doc["devices"]]
            links = [
                Link(l["a"], int(l["port_a"]), l["b"], int(l["port_b"]),
                     int(l.get("latency_ns", 0)), int(l.get("capacity_pps", 0)))
                for l in doc.get("links", [])
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad topology document: {e}") from None
        return cls(devices, links)

    @classmethod
    def from_file(cls, path: str) -> "Topology":
        if not f_exists(path) and f_exists(ENVIRONMENTS_DIR, path):
            path = f_join(ENVIRONMENTS_DIR, path)
        return cls.from_dict(load_json(path), base_dir=os.path.dirname(os.path.abspath(path)))


def resolve_document(ref, base_dir: Optional[str] = None) -> dict:
    """An inline document, or the JSON file it names."""
    if isinstance(ref, dict):
        return ref
    for folder in (base_dir, ENVIRONMENTS_DIR):
        if folder and f_exists(folder, ref):
            return load_json(folder, ref)
    if f_exists(ref):
        return load_json(ref)
    raise ConfigError(f"cannot find document {ref!r}")


def _device(d: dict, base_dir: Optional[str]) -> DeviceInfo:
    caps = d.get("caps", {})
    pipeline = d.get("pipeline")
    return DeviceInfo(
        device_id=str(d["id"]),
        ports=tuple(sorted(int(p) for p in d["ports"])),
        caps=DeviceCaps(
            base_pps=float(caps.get("base_pps", DeviceCaps.base_pps)),
            mem_access_budget_per_sec=float(caps.get("mem_access_budget_per_sec",
                                                     DeviceCaps.mem_access_budget_per_sec)),
            floor_pps=float(caps.get("floor_pps", 0.0)),
            serial=bool(caps.get("serial", False)),
        ),
        pipeline=None if pipeline is None else resolve_document(pipeline, base_dir),
    )
