from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class CostProfile:
    instr_count: int = 0
    mem_accesses: int = 0
    gen_pkt_count_max: int = 0
    needs_packet: bool = False

    def __add__(self, other: "CostProfile") -> "CostProfile":
        return CostProfile(
            self.instr_count + other.instr_count,
            self.mem_accesses + other.mem_accesses,
            self.gen_pkt_count_max + other.gen_pkt_count_max,
            self.needs_packet or other.needs_packet,
        )

    def __sub__(self, other: "CostProfile") -> "CostProfile":
        return CostProfile(
            self.instr_count - other.instr_count,
            self.mem_accesses - other.mem_accesses,
            self.gen_pkt_count_max - other.gen_pkt_count_max,
            self.needs_packet,
        )


ZERO_COST = CostProfile()


@dataclass(frozen=True)
class DeviceCaps:
    """
    Throughput model inputs. `serial=False` is the bound model (forwarding
    and counter memory are independent limits); `serial=True` adds the two
    per-packet service times, which is what a software target measures.
    """
    base_pps: float = 10_000_000.0
    mem_access_budget_per_sec: float = 425_000_000.0
    floor_pps: float = 0.0
    serial: bool = False

    def floor(self, floor_ratio: float) -> float:
        return self.floor_pps or self.base_pps * floor_ratio


def aggregate(profiles: Iterable[CostProfile]) -> CostProfile:
    total = ZERO_COST
    for p in profiles:
        total = total + p
    return total


def estimate_throughput(profiles, caps: DeviceCaps) -> float:
    """Packets/sec sustainable with `profiles` executed on every packet."""
    if isinstance(profiles, CostProfile):
        profiles = [profiles]
    mem = aggregate(profiles).mem_accesses
    if mem <= 0:
        return float(caps.base_pps)
    if caps.serial:
        return 1.0 / (1.0 / caps.base_pps + mem / caps.mem_access_budget_per_sec)
    return min(float(caps.base_pps), caps.mem_access_budget_per_sec / max(1, mem))
