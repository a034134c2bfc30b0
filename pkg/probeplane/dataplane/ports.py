from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional

from probeplane.errors import ConfigError


@dataclass
class EgressQueue:
    """
    FIFO in front of a physical port. `service_ns` is the per-packet
    transmission time the simulator drains at; 0 means the queue is only
    drained by explicit dequeue calls.
    """
    port: int
    capacity: int = 64
    low_watermark: int = 8
    high_watermark: int = 32
    service_ns: int = 0
    enqueue_hook: Optional[int] = None
    dequeue_hook: Optional[int] = None
    packets: Deque[bytes] = field(default_factory=deque)
    overflows: int = 0

    def __post_init__(self):
        if not 0 <= self.low_watermark <= self.high_watermark <= self.capacity:
            raise ConfigError(
                f"queue on port {self.port}: need 0 <= low <= high <= capacity, "
                f"got {self.low_watermark}/{self.high_watermark}/{self.capacity}"
            )

    @property
    def depth(self) -> int:
        return len(self.packets)

    def push(self, data: bytes) -> bool:
        if len(self.packets) >= self.capacity:
            self.overflows += 1
            return False
        self.packets.append(data)
        return True

    def pop(self) -> Optional[bytes]:
        return self.packets.popleft() if self.packets else None

    def config(self) -> dict:
        return {
            "port": self.port, "capacity": self.capacity, "low": self.low_watermark,
            "high": self.high_watermark, "service_ns": self.service_ns,
        }

    def snapshot(self) -> dict:
        return {**self.config(), "depth": self.depth,
                "enqueue_hook": self.enqueue_hook, "dequeue_hook": self.dequeue_hook}
