"""
Time sources behind one interface: virtual nanoseconds for the harness,
wall-clock nanoseconds for live devices.
"""
import time


class VirtualClock:
    def __init__(self, now: int = 0):
        self._now = now

    def now(self) -> int:
        return self._now

    def set(self, t: int) -> None:
        if t < self._now:
            raise ValueError(f"virtual time cannot go backwards ({t} < {self._now})")
        self._now = t

    def advance(self, dt: int) -> None:
        self.set(self._now + dt)


class WallClock:
    def __init__(self):
        self._origin = time.monotonic_ns()

    def now(self) -> int:
        return time.monotonic_ns() - self._origin

    def set(self, t: int) -> None:
        # live devices do not jump; timers are serviced against the real clock
        pass

    def advance(self, dt: int) -> None:
        pass
