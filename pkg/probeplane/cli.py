"""
Operator console: an interactive REPL, or a batch run over a command file.

    probe-console --topo topology_line.json --seed 7 --traffic traffic.json
    probe-console --script session.txt --json

Commands (one per line, `#` starts a comment):

    topo load <file> [--traffic <profile>]
    dev list
    probe install <spec> --device <d> [--app <id>]
    probe revoke <probe_id> --device <d> [--force]
    probe list --device <d>
    query run <file> [--app <id>]
    query revoke <handle>
    query list
    pools --device <d>
    read-counter <handle> --device <d>
    stb-dump <handle> --device <d>
    advance <ns>
    scenario run <script> [--traffic <profile>]
    bench [--probes 0,1,4,16] [--runs 3] [--packets 2048] [--out curve.csv]
    dump-report-log
    help | quit

Exit status in batch mode: 0 when every command succeeded, 1 on the first
failing command, 2 on a usage error (unknown verb, bad arguments).
"""
import argparse
import asyncio
import difflib
import logging
import os
import shlex
import sys
from typing import Callable, Dict, List, Optional, Tuple

from scapy.utils import hexdump

from probeplane.channel.codec import MsgType
from probeplane.controller.topology import Topology, resolve_document
from probeplane.errors import ParseError, ProbePlaneError, RemoteError
from probeplane.harness import experiments
from probeplane.harness.traffic import TrafficProfile
from probeplane.probe_env import ProbeNetEnv
from probeplane.probes.spec import ProbeSpec
from probeplane.resources.types import Handle
from probeplane.settings import SETTINGS
from probeplane.utils.json_utils import canonical_dumps

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

VERBS = ("topo load", "dev list", "probe install", "probe revoke", "probe list", "query run", "query revoke",
         "query list", "pools", "read-counter", "stb-dump", "advance", "scenario run", "bench",
         "dump-report-log", "help", "quit")


def split_command(line: str, lineno: int = 0) -> Tuple[str, List[str], Dict[str, object]]:
    """Split a command line into (verb, positionals, options); raises ParseError."""
    try:
        tokens = shlex.split(line, comments=True)
    except ValueError as e:
        raise ParseError(lineno, str(e)) from None
    if not tokens:
        return "", [], {}
    verb = None
    if len(tokens) >= 2 and f"{tokens[0]} {tokens[1]}" in VERBS:
        verb, rest = f"{tokens[0]} {tokens[1]}", tokens[2:]
    elif tokens[0] in VERBS:
        verb, rest = tokens[0], tokens[1:]
    if verb is None:
        typed = " ".join(tokens[:2])
        close = difflib.get_close_matches(typed, VERBS, n=1) or difflib.get_close_matches(tokens[0], VERBS, n=1)
        hint = f"unknown command {typed!r}" + (f"; did you mean {close[0]!r}?" if close else "; try 'help'")
        raise ParseError(lineno, hint)
    positionals, options = [], {}
    i = 0
    while i < len(rest):
        token = rest[i]
        if token.startswith("--"):
            name = token[2:]
            if i + 1 < len(rest) and not rest[i + 1].startswith("--"):
                options[name] = rest[i + 1]
                i += 2
            else:
                options[name] = True
                i += 1
        else:
            positionals.append(token)
            i += 1
    return verb, positionals, options


class Console:
    """Runs console commands against a simulated network and renders the results."""

    def __init__(self, topo: str = "topology_line.json", *, seed: int = 0, json_output: bool = False,
                 traffic: Optional[str] = None, trace_frames: bool = False, out=None):
        self.topo = topo
        self.seed = seed
        self.json_output = json_output
        self.traffic = traffic
        self.trace_frames = trace_frames
        self.out = out or sys.stdout
        self.env: Optional[ProbeNetEnv] = None
        self.base_dir: Optional[str] = None
        self._frames_shown = 0
        self._commands: Dict[str, Callable] = {
            "topo load": self.topo_load, "dev list": self.dev_list,
            "probe install": self.probe_install, "probe revoke": self.probe_revoke, "probe list": self.probe_list,
            "query run": self.query_run, "query revoke": self.query_revoke, "query list": self.query_list,
            "pools": self.pools, "read-counter": self.read_counter, "stb-dump": self.stb_dump,
            "advance": self.advance, "scenario run": self.scenario_run, "bench": self.bench,
            "dump-report-log": self.dump_report_log, "help": self.help,
        }

    # ---------------- plumbing -----------------

    def emit(self, command: str, result=None, error: Optional[ProbePlaneError] = None) -> None:
        if self.json_output:
            record = {"cmd": command, "ok": error is None}
            if error is None:
                record["result"] = result
            else:
                record["code"] = error.remote_code if isinstance(error, RemoteError) else error.code
                record["error"] = str(error)
            print(canonical_dumps(record), file=self.out)
            return
        if error is not None:
            print(f"error [{error.code}]: {error}", file=self.out)
        elif result is not None:
            print(render(result), file=self.out)

    def _arg(self, args: List[str], i: int, name: str, lineno: int) -> str:
        if len(args) <= i:
            raise ParseError(lineno, f"missing <{name}>")
        return args[i]

    def _int(self, text, name: str, lineno: int) -> int:
        try:
            return int(str(text), 0)
        except ValueError:
            raise ParseError(lineno, f"{name} must be an integer, got {text!r}") from None

    def _device(self, opts: dict, lineno: int) -> str:
        device = opts.get("device")
        if not isinstance(device, str):
            raise ParseError(lineno, "needs --device <id>")
        return device

    def _doc(self, ref: str):
        return resolve_document(ref, self.base_dir)

    async def _ready(self) -> ProbeNetEnv:
        if self.env is None:
            await self._load(self.topo, self.traffic)
        return self.env

    async def _load(self, topo: str, traffic: Optional[str]) -> dict:
        if self.env is not None:
            await self.env.close()
        self.topo, self.traffic = topo, traffic
        self.base_dir = os.path.dirname(os.path.abspath(topo)) if os.path.exists(topo) else None
        profile = None
        if traffic:
            profile = dict(self._doc(traffic))
        self.env = ProbeNetEnv(topo, traffic_profile=profile, base_dir=self.base_dir)
        _, info = await self.env.reset(seed=self.seed)
        self._frames_shown = 0
        return {"devices": sorted(self.env.topology.devices), "links": len(self.env.topology.links),
                "injected": info["injected"]}

    async def _step(self, action: dict):
        env = await self._ready()
        _, _, _, _, info = await env.step(action)
        if env.last_error is not None and "error" in info:
            error, env.last_error = env.last_error, None
            raise error
        self._show_frames()
        return env.run.timeline[-1] if env.run.timeline else None

    def _show_frames(self) -> None:
        if not self.trace_frames or self.env is None:
            return
        emissions = self.env.net.log.emissions[self._frames_shown:]
        self._frames_shown += len(emissions)
        for ts, device, port, data in emissions:
            print(f"# t={ts} {device}.{port}", file=self.out)
            print(hexdump(bytes.fromhex(data), dump=True), file=self.out)

    # ---------------- commands -----------------

    async def topo_load(self, args, opts, lineno):
        return await self._load(self._arg(args, 0, "file", lineno), opts.get("traffic"))

    async def dev_list(self, args, opts, lineno):
        env = await self._ready()
        out = []
        for device_id, device in sorted(env.net.devices.items()):
            snap = await env.controller.snapshot(device_id)
            out.append({"device": device_id, "ports": list(device.ports), "online": device.online,
                        "tables": len(snap["tables"]), "probes": len(snap["probes"]),
                        **device.counters.as_dict()})
        return out

    async def probe_install(self, args, opts, lineno):
        device = self._device(opts, lineno)
        spec = ProbeSpec.from_dict(self._doc(self._arg(args, 0, "spec", lineno)))
        timeline = await self._step({"do": "probe_install", "device": device, "spec": spec.to_dict(),
                                     "app": opts.get("app", "")})
        return {"probe_id": timeline[3]}

    async def probe_revoke(self, args, opts, lineno):
        device = self._device(opts, lineno)
        pid = self._int(self._arg(args, 0, "probe_id", lineno), "probe_id", lineno)
        await self._step({"do": "probe_revoke", "device": device, "probe_id": pid, "force": int(bool(opts.get("force")))})
        return {"revoked": pid}

    async def probe_list(self, args, opts, lineno):
        env = await self._ready()
        snap = await env.controller.snapshot(self._device(opts, lineno))
        return [{"probe_id": p["probe_id"], "kind": p["spec"]["kind"], "attached": p["attached"],
                 "subscribers": p["subscribers"], "mem_accesses": p["mem_accesses"]} for p in snap["probes"]]

    async def query_run(self, args, opts, lineno):
        doc = self._doc(self._arg(args, 0, "file", lineno))
        timeline = await self._step({"do": "query_run", "query": doc, "app": opts.get("app")})
        return {"handle": timeline[2]}

    async def query_revoke(self, args, opts, lineno):
        handle = self._arg(args, 0, "handle", lineno)
        await self._step({"do": "query_revoke", "handle": handle})
        return {"revoked": handle}

    async def query_list(self, args, opts, lineno):
        env = await self._ready()
        return env.controller.list_queries()

    async def pools(self, args, opts, lineno):
        env = await self._ready()
        snap = await env.controller.snapshot(self._device(opts, lineno))
        return [{"class": name, "capacity": s[0], "allocated": s[1], "free": s[2]}
                for name, s in sorted(snap["pool"]["stats"].items())]

    def _handle(self, args, lineno) -> Handle:
        text = self._arg(args, 0, "handle", lineno)
        try:
            return Handle.parse(text)
        except (KeyError, ValueError):
            raise ParseError(lineno, f"bad resource handle {text!r} (expected e.g. counter:3)") from None

    async def read_counter(self, args, opts, lineno):
        env = await self._ready()
        handle = self._handle(args, lineno)
        reply = await env.controller.call(self._device(opts, lineno), MsgType.READ_COUNTER_REQ, handle=handle)
        return {"handle": str(handle), "value": reply["value"], "unit": reply["unit"], "ts": reply["ts"]}

    async def stb_dump(self, args, opts, lineno):
        env = await self._ready()
        handle = self._handle(args, lineno)
        reply = await env.controller.call(self._device(opts, lineno), MsgType.STB_DUMP_REQ, handle=handle)
        return [{"key": k, "value": v, "ts": ts} for k, v, ts in reply["entries"]]

    async def advance(self, args, opts, lineno):
        ns = self._int(self._arg(args, 0, "ns", lineno), "ns", lineno)
        if ns < 0:
            raise ParseError(lineno, "cannot advance by a negative time")
        env = await self._ready()
        await self._step({"advance_ns": ns})
        return {"now": env.net.now}

    async def scenario_run(self, args, opts, lineno):
        script = self._doc(self._arg(args, 0, "script", lineno))
        topology = Topology.from_file(self.topo)
        traffic = opts.get("traffic") or self.traffic
        profile = TrafficProfile.from_dict({**(self._doc(traffic) if traffic else {}), "seed": self.seed})
        record, _ = await experiments.run_scenario_async(topology, profile, script, base_dir=self.base_dir)
        if self.trace_frames:
            for ts, device, port, data in record.emissions:
                print(f"# t={ts} {device}.{port}", file=self.out)
                print(hexdump(bytes.fromhex(data), dump=True), file=self.out)
        if self.json_output:
            return record.to_dict()
        return {"seed": record.seed, "until": record.until, "emissions": len(record.emissions),
                "reports": len(record.reports), "drops": sum(record.drops.values()),
                "results": {h: len(rows) for h, rows in record.results.items()}}

    async def bench(self, args, opts, lineno):
        probes = opts.get("probes", "0,1,2,4,8,16,32,64")
        try:
            counts = [int(p) for p in str(probes).split(",")]
        except ValueError:
            raise ParseError(lineno, f"--probes takes a comma list of integers, got {probes!r}") from None
        pipeline = opts.get("pipeline")
        points = experiments.bench_throughput(
            self._doc(pipeline) if isinstance(pipeline, str) else None, counts,
            runs=self._int(opts.get("runs", 3), "runs", lineno),
            packets=self._int(opts.get("packets", 2048), "packets", lineno), seed=self.seed)
        if isinstance(opts.get("out"), str):
            experiments.write_curve(points, opts["out"])
        return [{k: v for k, v in p.to_dict().items() if k != "pps_runs"} for p in points]

    async def dump_report_log(self, args, opts, lineno):
        env = await self._ready()
        await env.controller.pump()
        return {"reports": env.controller.report_records(),
                "results": {q["handle"]: env.controller.results(q["handle"]).to_records()
                            for q in env.controller.list_queries()}}

    async def help(self, args, opts, lineno):
        return list(VERBS)

    # ---------------- driving -----------------

    async def execute(self, line: str, lineno: int = 0) -> Optional[int]:
        """Run one command line; returns None to continue or an exit status to stop."""
        try:
            verb, args, opts = split_command(line, lineno)
        except ParseError as e:
            self.emit(line.strip(), error=e)
            return EXIT_USAGE
        if not verb:
            return None
        if verb == "quit":
            return EXIT_OK
        try:
            result = await self._commands[verb](args, opts, lineno)
        except ParseError as e:
            self.emit(line.strip(), error=e)
            return EXIT_USAGE
        except ProbePlaneError as e:
            self.emit(line.strip(), error=e)
            return EXIT_FAILED
        self.emit(line.strip(), result)
        return None

    async def batch(self, lines: List[str]) -> int:
        try:
            for lineno, line in enumerate(lines, start=1):
                status = await self.execute(line, lineno)
                if status is not None:
                    return status
            return EXIT_OK
        finally:
            await self.close()

    async def repl(self, stdin=None) -> int:
        stdin = stdin or sys.stdin
        lineno = 0
        try:
            while True:
                if stdin.isatty():
                    print("probe> ", end="", file=self.out, flush=True)
                line = await asyncio.get_running_loop().run_in_executor(None, stdin.readline)
                if not line:
                    return EXIT_OK
                lineno += 1
                status = await self.execute(line, lineno)
                # the REPL keeps going after failures
                if status == EXIT_OK:
                    return EXIT_OK
        finally:
            await self.close()

    async def close(self) -> None:
        if self.env is not None:
            await self.env.close()
            self.env = None


def render(result) -> str:
    """Plain-text table for lists of records, key: value lines for a record."""
    if isinstance(result, list) and result and all(isinstance(r, dict) for r in result):
        columns = list(dict.fromkeys(k for r in result for k in r))
        cells = [[str(r.get(c, "")) for c in columns] for r in result]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines)
    if isinstance(result, list):
        return "\n".join(str(r) for r in result) if result else "(none)"
    if isinstance(result, dict):
        return "\n".join(f"{k}: {v}" for k, v in result.items())
    return str(result)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probe-console", description="DNP data-plane console")
    parser.add_argument("--topo", default="topology_line.json", help="Topology JSON (default: topology_line.json)")
    parser.add_argument("--seed", type=int, default=0, help="Traffic seed (default: 0)")
    parser.add_argument("--traffic", default=None, help="Traffic profile JSON to inject on load")
    parser.add_argument("--json", action="store_true", help="Machine-readable output, one JSON record per command")
    parser.add_argument("--script", default=None, help="Run the commands in this file, then exit")
    parser.add_argument("--trace-frames", action="store_true", help="Hex-dump frames emitted at edge ports")
    parser.add_argument("--log-level", default=SETTINGS.log_level, help="Logging level")
    parser.add_argument("command", nargs=argparse.REMAINDER, help="A single command to run instead of a REPL")
    return parser


async def run(argv: Optional[List[str]] = None, stdin=None, out=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='%(asctime)s - %(levelname)s - %(message)s', force=True,
                        handlers=[logging.StreamHandler(sys.stderr)])
    console = Console(args.topo, seed=args.seed, json_output=args.json, traffic=args.traffic,
                      trace_frames=args.trace_frames, out=out)
    if args.script:
        try:
            with open(args.script, "r") as f:
                lines = f.read().splitlines()
        except OSError as e:
            print(f"cannot read script: {e}", file=sys.stderr)
            return EXIT_USAGE
        return await console.batch(lines)
    if args.command:
        return await console.batch([shlex.join(args.command)])
    return await console.repl(stdin)


def main(argv: Optional[List[str]] = None) -> int:
    return asyncio.run(run(argv))


if __name__ == "__main__":
    sys.exit(main())
