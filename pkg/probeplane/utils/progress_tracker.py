import csv
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional


class BenchTracker:
    """
    Records experiment batch progress: one CSV row per measurement plus a
    JSON summary at the end.
    """

    COLUMNS = [
        'run',
        'timestamp',
        'experiment',
        'n_probes',
        'mem_accesses',
        'pps',
        'predicted_pps',
        'latency_s',
        'window_ns',
        'dropped',
        'ok',
        'error',
    ]

    def __init__(self, ckpt_dir: str = "ckpt", resume: bool = False):
        self.ckpt_dir = ckpt_dir
        self.progress_file = os.path.join(ckpt_dir, "bench_progress.csv")
        self.current_run = 0
        self.failures = 0
        self.rows: List[Dict[str, Any]] = []

        os.makedirs(ckpt_dir, exist_ok=True)

        if resume and os.path.exists(self.progress_file):
            self._load_existing_progress()
        else:
            self._init_progress_file()

    def _init_progress_file(self):
        with open(self.progress_file, 'w', newline='') as f:
            csv.writer(f).writerow(self.COLUMNS)

    def _load_existing_progress(self):
        with open(self.progress_file, 'r') as f:
            self.rows = list(csv.DictReader(f))
        if self.rows:
            self.current_run = int(self.rows[-1]['run'])
            self.failures = sum(1 for row in self.rows if row['ok'] == 'False')

    def record(self, experiment: str, ok: bool = True, error: Optional[str] = None, **values):
        self.current_run += 1
        if not ok:
            self.failures += 1
        row = {
            'run': self.current_run,
            'timestamp': datetime.now().isoformat(),
            'experiment': experiment,
            'ok': ok,
            'error': error or '',
        }
        for column in self.COLUMNS:
            row.setdefault(column, values.get(column, ''))
        self.rows.append(row)

        with open(self.progress_file, 'a', newline='') as f:
            csv.writer(f).writerow([row[c] for c in self.COLUMNS])

        colour = "92" if ok else "91"
        detail = " | ".join(f"{k}: {v}" for k, v in values.items() if v not in (None, ''))
        logging.info(f"\033[{colour}m📊 Bench: run {self.current_run} | {experiment} | {detail}\033[0m")

    def get_summary(self) -> Dict[str, Any]:
        per_experiment: Dict[str, int] = {}
        for row in self.rows:
            per_experiment[row['experiment']] = per_experiment.get(row['experiment'], 0) + 1
        return {
            'runs': self.current_run,
            'failures': self.failures,
            'per_experiment': per_experiment,
        }

    def export_summary_report(self) -> str:
        report_file = os.path.join(self.ckpt_dir, "bench_summary.json")
        with open(report_file, 'w') as f:
            json.dump(self.get_summary(), f, indent=2)
        logging.info(f"\033[92m📈 Summary report saved to {report_file}\033[0m")
        return report_file
