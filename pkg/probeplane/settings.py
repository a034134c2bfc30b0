import os
from dataclasses import dataclass, field
from os.path import dirname, join

from dotenv import load_dotenv

load_dotenv(join(dirname(__file__), ".env"))


def _int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


def _float(name: str, default: float) -> float:
    return float(os.getenv(name, str(default)))


@dataclass(frozen=True)
class PoolCapacities:
    counters: int = 16384
    meters: int = 1024
    registers: int = 4096
    state_tables: int = 64
    state_table_entries: int = 65536
    timers: int = 256
    samplers: int = 1024

    @classmethod
    def from_env(cls) -> "PoolCapacities":
        return cls(
            counters=_int("PROBEPLANE_POOL_COUNTERS", cls.counters),
            meters=_int("PROBEPLANE_POOL_METERS", cls.meters),
            registers=_int("PROBEPLANE_POOL_REGISTERS", cls.registers),
            state_tables=_int("PROBEPLANE_POOL_STATE_TABLES", cls.state_tables),
            state_table_entries=_int("PROBEPLANE_POOL_STATE_TABLE_ENTRIES", cls.state_table_entries),
            timers=_int("PROBEPLANE_POOL_TIMERS", cls.timers),
            samplers=_int("PROBEPLANE_POOL_SAMPLERS", cls.samplers),
        )


@dataclass(frozen=True)
class Settings:
    """
    Device and runtime bounds. Every field can be overridden from the
    environment (or a .env file next to the package).
    """
    mtu: int = 2048
    max_stages: int = 32
    max_params: int = 64
    metadata_bytes: int = 256
    max_block_len: int = 64
    floor_ratio: float = 0.9
    xid_timeout: float = 5.0
    static_min_window_ns: int = 1_000_000
    log_level: str = "INFO"
    pools: PoolCapacities = field(default_factory=PoolCapacities)

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            mtu=_int("PROBEPLANE_MTU", cls.mtu),
            max_stages=_int("PROBEPLANE_MAX_STAGES", cls.max_stages),
            max_params=_int("PROBEPLANE_MAX_PARAMS", cls.max_params),
            metadata_bytes=_int("PROBEPLANE_METADATA_BYTES", cls.metadata_bytes),
            max_block_len=_int("PROBEPLANE_MAX_BLOCK_LEN", cls.max_block_len),
            floor_ratio=_float("PROBEPLANE_FLOOR_RATIO", cls.floor_ratio),
            xid_timeout=_float("PROBEPLANE_XID_TIMEOUT", cls.xid_timeout),
            static_min_window_ns=_int("PROBEPLANE_STATIC_MIN_WINDOW_NS", cls.static_min_window_ns),
            log_level=os.getenv("PROBEPLANE_LOG_LEVEL", cls.log_level),
            pools=PoolCapacities.from_env(),
        )


SETTINGS = Settings.from_env()
