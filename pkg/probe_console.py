#!/usr/bin/env python3
"""
DNP console entry point.

    uv run python probe_console.py                          # REPL on topology_line.json
    uv run python probe_console.py --script session.txt --json
    uv run python probe_console.py --seed 3 query run query_link_latency.json
"""
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from probeplane.cli import main

if __name__ == "__main__":
    sys.exit(main())
