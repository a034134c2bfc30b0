import re
from enum import IntEnum
from typing import NamedTuple


class ResourceClass(IntEnum):
    COUNTER = 1
    METER = 2
    REGISTER = 3
    STATE_TABLE = 4
    TIMER = 5
    SAMPLER = 6


CLASS_NAMES = {
    ResourceClass.COUNTER: "counter",
    ResourceClass.METER: "meter",
    ResourceClass.REGISTER: "reg",
    ResourceClass.STATE_TABLE: "stb",
    ResourceClass.TIMER: "timer",
    ResourceClass.SAMPLER: "sampler",
}
_NAMES_TO_CLASS = {v: k for k, v in CLASS_NAMES.items()}
_HANDLE_RE = re.compile(r"^(counter|meter|reg|stb|timer|sampler):(\d+)$")


class Handle(NamedTuple):
    cls: ResourceClass
    index: int

    def __str__(self):
        return f"{CLASS_NAMES[self.cls]}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Handle":
        m = _HANDLE_RE.match(text.strip())
        if not m:
            raise ValueError(f"bad resource handle {text!r}")
        return cls(_NAMES_TO_CLASS[m.group(1)], int(m.group(2)))


class CounterUnit(IntEnum):
    PACKETS = 0
    BYTES = 1


class TimerMode(IntEnum):
    ONE_SHOT = 0
    PERIODIC = 1


class MeterColor(IntEnum):
    GREEN = 0
    YELLOW = 1
    RED = 2
