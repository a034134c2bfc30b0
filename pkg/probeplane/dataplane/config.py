"""
Pipeline configuration documents (JSON). Loaded at boot, dumped at
runtime, and reloaded wholesale by the static reprogramming path.

    {
      "ports": [1, 2, 3],
      "entry_table": 0,
      "resources": [{"handle": "counter:0", "params": [0]}],
      "actions": [{"name": "fwd2", "asm": "CNTR_ADD counter:0, 1, -; OUTPUT 2"}],
      "tables": [
        {"id": 0, "key": ["pkt[96:16]"], "miss": "fwd2", "next": null, "writable": false,
         "entries": [{"key": "0x0800/0xffff", "priority": 10, "action": "fwd2", "params": ""}]}
      ],
      "queues": [{"port": 2, "capacity": 64, "low": 8, "high": 32, "service_ns": 0}],
      "hooks": {"ingress": {"1": "name"}, "egress": {}},
      "timers": [{"interval": 1000000, "mode": 1, "action": "name"}]
    }

Actions may carry an explicit "slot". A table without "miss" gets the
default miss action (report to controller, then drop).
"""
import logging
from typing import Dict

from probeplane.dataplane.device import Device
from probeplane.dataplane.packet import FieldRef, MatchKey, ReportTemplate
from probeplane.dataplane.ports import EgressQueue
from probeplane.dataplane.tables import TableDef
from probeplane.errors import ConfigError
from probeplane.resources.pool import CounterCell, MeterCell, RegisterCell, SamplerCell, StateTable
from probeplane.resources.types import Handle, ResourceClass, TimerMode
from probeplane.utils.json_utils import dump_json, load_json
from probeplane.vm.assembler import assemble, disassemble

logger = logging.getLogger(__name__)

DEFAULT_MISS_ASM = f"GEN_PKT {int(ReportTemplate.MISS)}, ctrl, []; DROP"


def load_config(device: Device, doc: dict) -> Dict[str, int]:
    """Build the pipeline described by `doc` on `device`; returns action name -> slot."""
    try:
        return _load(device, doc)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad pipeline configuration: {e}") from None


def _load(device: Device, doc: dict) -> Dict[str, int]:
    if "ports" in doc:
        device.ports = sorted(set(int(p) for p in doc["ports"]))

    for res in doc.get("resources", []):
        handle = Handle.parse(res["handle"])
        device.alloc(handle.cls, res.get("params", []), index=handle.index)

    slots: Dict[str, int] = {}
    for action in doc.get("actions", []):
        name = action["name"]
        if name in slots:
            raise ConfigError(f"action {name!r} defined twice")
        slots[name] = device.load_action(assemble(action["asm"]), slot=action.get("slot"))

    def slot_of(name):
        if name not in slots:
            raise ConfigError(f"unknown action {name!r}")
        return slots[name]

    default_miss = None
    tables = doc.get("tables", [])
    for tdef in tables:
        miss = tdef.get("miss")
        if miss is None:
            if default_miss is None:
                default_miss = device.load_action(assemble(DEFAULT_MISS_ASM))
            miss_slot = default_miss
        else:
            miss_slot = slot_of(miss)
        key_spec = tuple(FieldRef.parse(k) for k in tdef["key"])
        device.create_table(TableDef(int(tdef["id"]), key_spec, miss_slot, bool(tdef.get("writable", False))))
    # explicit edges override the append order create_table used
    for tdef in tables:
        if "next" in tdef:
            nxt = tdef["next"]
            if nxt is not None and int(nxt) not in device.tables:
                raise ConfigError(f"table {tdef['id']} points at unknown table {nxt}")
            device.tables[int(tdef["id"])].next_table = None if nxt is None else int(nxt)
    if "entry_table" in doc and doc["entry_table"] is not None:
        device.table(int(doc["entry_table"]))
        device.entry_table = int(doc["entry_table"])

    for tdef in tables:
        table = device.table(int(tdef["id"]))
        for e in tdef.get("entries", []):
            device.insert_entry(
                table.table_id,
                MatchKey.parse(e["key"], table.key_width),
                int(e.get("priority", 0)),
                slot_of(e["action"]),
                bytes.fromhex(e.get("params", "")),
                entry_id=e.get("id"),
            )

    for q in doc.get("queues", []):
        device.add_queue(EgressQueue(
            port=int(q["port"]), capacity=int(q.get("capacity", 64)),
            low_watermark=int(q.get("low", 8)), high_watermark=int(q.get("high", 32)),
            service_ns=int(q.get("service_ns", 0)),
        ))
        for kind in ("enqueue", "dequeue"):
            if q.get(kind):
                device.set_pointer((kind, int(q["port"])), slot_of(q[kind]))

    for kind, hooks in doc.get("hooks", {}).items():
        for port, name in hooks.items():
            device.set_pointer((kind, int(port)), slot_of(name))

    for t in doc.get("timers", []):
        device.set_timer(int(t["interval"]), TimerMode(int(t.get("mode", 1))), slot_of(t["action"]))

    logger.info("%s: loaded pipeline with %d tables, %d actions",
                device.device_id, len(device.tables), len(slots))
    return slots


def _resource_params(cell) -> list:
    if isinstance(cell, CounterCell):
        return [int(cell.unit)]
    if isinstance(cell, MeterCell):
        return [cell.cir, cell.cbs, cell.pir, cell.pbs]
    if isinstance(cell, RegisterCell):
        return [cell.value]
    if isinstance(cell, StateTable):
        return [cell.key_width, cell.capacity]
    if isinstance(cell, SamplerCell):
        return [cell.n]
    return []


def dump_config(device: Device) -> dict:
    """Configuration document that rebuilds the current pipeline (resource contents excepted)."""
    name = "a{}".format
    doc = {
        "ports": list(device.ports),
        "entry_table": device.entry_table,
        "resources": [
            {"handle": str(h), "params": _resource_params(device.pool.get(h))}
            for h in device.pool.live_handles() if h.cls != ResourceClass.TIMER
        ],
        "actions": [
            {"name": name(slot), "slot": slot, "asm": disassemble(device.block_at(slot))}
            for slot in sorted(device.actions.slots)
        ],
        "tables": [],
        "queues": [],
        "hooks": {kind: {str(p): name(s) for p, s in sorted(h.items())} for kind, h in device.hooks.items()},
        "timers": [
            {"interval": t.interval, "mode": int(t.mode), "action": name(t.linked_slot)}
            for t in device.pool.timers()
        ],
    }
    for tid in sorted(device.tables):
        table = device.tables[tid]
        doc["tables"].append({
            "id": tid,
            "key": [str(r) for r in table.key_spec],
            "miss": name(table.miss_slot),
            "next": table.next_table,
            "writable": table.writable_by_actions,
            "entries": [
                {"id": e.entry_id, "key": str(e.key), "priority": e.priority,
                 "action": name(e.action_slot), "params": e.params.hex()}
                for e in sorted(table.entries.values(), key=lambda e: e.entry_id)
            ],
        })
    for port in sorted(device.queues):
        q = device.queues[port]
        entry = q.config()
        if q.enqueue_hook is not None:
            entry["enqueue"] = name(q.enqueue_hook)
        if q.dequeue_hook is not None:
            entry["dequeue"] = name(q.dequeue_hook)
        doc["queues"].append(entry)
    return doc


def load_config_file(device: Device, path: str) -> Dict[str, int]:
    return load_config(device, load_json(path))


def dump_config_file(device: Device, path: str) -> None:
    dump_json(dump_config(device), path, indent=2)
