#!/usr/bin/env python3
"""
Run the DNP experiment set over many seeds in parallel batches.

Each experiment is a plain function of (topology, seed) returning a dict
with an "ok" flag; batches run concurrently on worker threads (every
scenario owns its own event loop and virtual clock). Records land in
ckpt/records, one progress row per run in ckpt/bench_progress.csv.

    uv run python run_experiment_batch.py --seeds 10 --batch-size 8
    uv run python run_experiment_batch.py --only latency deploy
"""

import argparse
import asyncio
import logging
import os
import sys
import time

# Add to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from probeplane.controller.topology import Topology
from probeplane.harness import experiments
from probeplane.harness.traffic import TrafficProfile
from probeplane.utils import BenchTracker, ExperimentRecorder

CATALOG_SPECS = [
    {"kind": "counter", "attach": {"kind": "port_ingress", "port": 1}},
    {"kind": "threshold_push", "attach": {"kind": "port_ingress", "port": 1}, "params": {"threshold": 16}},
    {"kind": "timer_poll", "attach": {"kind": "port_ingress", "port": 1}, "params": {"interval": 50_000_000}},
    {"kind": "fsm_half_open", "attach": {"kind": "port_ingress", "port": 1}},
    {"kind": "flow_duration", "attach": {"kind": "port_ingress", "port": 1}},
    {"kind": "filter", "attach": {"kind": "table_entry", "table": 0, "key": "0x0a000000/0xff000000"},
     "params": {"digest_fields": ["pkt[240:32]"]}},
    {"kind": "latency_source", "attach": {"kind": "timer"}, "params": {"port": 2, "interval": 20_000_000}},
]


def traffic_for(seed: int, packets: int) -> TrafficProfile:
    flows = max(1, packets // 16)
    return TrafficProfile(seed=seed, device="A", n_flows=flows, packets_per_flow=16,
                          duration_ns=1_000_000_000, never_acked=0.2)


def hitless(topology: Topology, seed: int, packets: int) -> dict:
    """Install every catalog probe mid-run; forwarding must match the probe-free run exactly."""
    profile = traffic_for(seed, packets)
    baseline = experiments.run_scenario(topology, profile)
    script = [{"at": 400_000_000 + i * 10_000_000, "do": "probe_install", "device": "A", "spec": spec}
              for i, spec in enumerate(CATALOG_SPECS)]
    probed = experiments.run_scenario(topology, profile, script, until=baseline.until)
    diff = experiments.compare_baseline(baseline, probed)
    dropped = sum(probed.drops.values()) - sum(baseline.drops.values())
    return {"ok": diff.empty and dropped == 0, "missing": len(diff.missing), "extra": len(diff.extra),
            "dropped": dropped, "probe_packets": diff.probe_packets_ignored, "record": probed}


def deploy(topology: Topology, seed: int, packets: int) -> dict:
    """Runtime install vs full reload of the same device, mid-traffic."""
    profile = traffic_for(seed, packets)
    dynamic = experiments.measure_deploy(topology, profile, "dynamic")
    static = experiments.measure_deploy(topology, profile, "static")
    ok = dynamic.window_ns == 0 and dynamic.dropped == 0 and dynamic.latency_s < static.latency_s
    return {"ok": ok, "latency_s": dynamic.latency_s, "static_latency_s": static.latency_s,
            "window_ns": static.window_ns, "dropped": static.dropped}


def latency(topology: Topology, seed: int, packets: int) -> dict:
    """Every collected latency row equals the configured link latency."""
    profile = traffic_for(seed, packets)
    script = [{"at": 100_000_000, "do": "query_run", "query": "query_link_latency.json"}]
    record = experiments.run_scenario(topology, profile, script)
    expected = topology.link_between("A", 2, "B", 1).latency_ns
    rows = record.rows("lat-ab/lat-ab", "latency_ns")
    return {"ok": bool(rows) and all(r == expected for r in rows), "rows": len(rows),
            "expected_ns": expected, "record": record}


EXPERIMENTS = {"hitless": hitless, "deploy": deploy, "latency": latency}


async def run_single_experiment(name: str, topology: Topology, seed: int, packets: int,
                                recorder: ExperimentRecorder, tracker: BenchTracker) -> bool:
    print(f"  🚀 Starting {name} seed {seed}")
    try:
        result = await asyncio.to_thread(EXPERIMENTS[name], topology, seed, packets)
    except Exception as e:
        logging.error(f"{name} seed {seed} raised: {e}", exc_info=True)
        tracker.record(name, ok=False, error=str(e)[:200])
        print(f"  ❌ {name} seed {seed} failed")
        return False

    record = result.pop("record", None)
    if record is not None:
        recorder.record(record, f"{name}_seed{seed}")
    tracker.record(name, ok=result["ok"], **{k: v for k, v in result.items()
                                             if k in BenchTracker.COLUMNS and k != "ok"})
    if result["ok"]:
        print(f"  ✅ {name} seed {seed} passed")
    else:
        print(f"  ❌ {name} seed {seed} failed: {result}")
    return result["ok"]


async def run_parallel_batch(experiment_list, batch_size, topology, packets, recorder, tracker):
    """Run the experiments batch by batch, each batch concurrently."""
    results = []
    total = len(experiment_list)

    for i in range(0, total, batch_size):
        batch = experiment_list[i:i + batch_size]
        batch_num = i // batch_size + 1
        total_batches = (total + batch_size - 1) // batch_size

        print(f"\n📦 Batch {batch_num}/{total_batches} ({len(batch)} experiments)")
        print("─" * 50)

        batch_start = time.time()
        tasks = [
            run_single_experiment(name, topology, seed, packets, recorder, tracker)
            for name, seed in batch
        ]
        batch_results = await asyncio.gather(*tasks, return_exceptions=True)

        for (name, seed), result in zip(batch, batch_results):
            if isinstance(result, Exception):
                print(f"  ⚠️  {name} seed {seed}: Exception - {result}")
                results.append(False)
            else:
                results.append(result)

        print(f"  ⏱️  Batch completed in {time.time() - batch_start:.1f} seconds")

    return results


async def run_batch(args):
    topology = Topology.from_file(args.topo)
    names = args.only or list(EXPERIMENTS)
    recorder = ExperimentRecorder(args.ckpt_dir, resume=args.resume)
    tracker = BenchTracker(args.ckpt_dir, resume=args.resume)

    print("=" * 60)
    print("DNP EXPERIMENT BATCH (PARALLEL)")
    print("=" * 60)
    print(f"Topology: {args.topo}")
    print(f"Experiments: {', '.join(names)}")
    print(f"Seeds per experiment: {args.seeds}")
    print(f"Packets per trace: {args.packets}")
    print(f"Parallel batch size: {args.batch_size}")

    experiment_list = [(name, seed) for name in names for seed in range(args.seeds)]
    start_time = time.time()
    results = await run_parallel_batch(experiment_list, args.batch_size, topology, args.packets, recorder, tracker)

    if args.bench:
        print("\n📈 Throughput bench")
        points = experiments.bench_throughput(probes_per_packet=(0, 1, 2, 4, 8, 16, 32, 64), tracker=tracker)
        curve = os.path.join(args.ckpt_dir, "bench_curve.csv")
        experiments.write_curve(points, curve)
        print(f"  Curve saved to {curve}")

    total_duration = time.time() - start_time
    success_count = sum(1 for r in results if r)
    print(f"\n{'=' * 60}")
    print("BATCH COMPLETE!")
    print(f"{'=' * 60}")
    print(f"Total experiments: {len(experiment_list)}")
    print(f"Successful: {success_count}/{len(experiment_list)}")
    print(f"Failed: {len(experiment_list) - success_count}")
    print(f"\n⏱️  Total time: {total_duration:.1f} seconds")

    print(f"\n📊 Results by experiment:")
    for name in names:
        outcome = [r for (n, _), r in zip(experiment_list, results) if n == name]
        print(f"  {name}: {sum(1 for r in outcome if r)}/{len(outcome)} passed")

    tracker.export_summary_report()
    print(f"\n📈 To plot the results, run:")
    print("  uv run python analyze_bench_results.py")
    print(f"{'=' * 60}")
    return success_count == len(experiment_list)


def main():
    parser = argparse.ArgumentParser(description="Run the DNP experiment set in parallel batches")
    parser.add_argument("--topo", default="topology_line.json", help="Topology JSON (default: topology_line.json)")
    parser.add_argument("--seeds", type=int, default=10, help="Seeds per experiment (default: 10)")
    parser.add_argument("--packets", type=int, default=10_000, help="Packets per generated trace (default: 10000)")
    parser.add_argument("--batch-size", type=int, default=8, help="Experiments run concurrently (default: 8)")
    parser.add_argument("--only", nargs="+", choices=sorted(EXPERIMENTS), default=None)
    parser.add_argument("--bench", action="store_true", help="Also run the throughput bench")
    parser.add_argument("--ckpt-dir", default="ckpt")
    parser.add_argument("--resume", action="store_true")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s', force=True)
    ok = asyncio.run(run_batch(args))
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
