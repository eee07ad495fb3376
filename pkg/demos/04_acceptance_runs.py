"""Summarise the cached toy-scale runs behind the end-to-end acceptance checks.

Reads artifacts/acceptance (filled by tests/acceptance_runs.py or the
acceptance tests) and prints each run's training curve and final metrics.

    python demos/04_acceptance_runs.py
"""
import json
from pathlib import Path

from reftr.harness.train import read_log

root = Path(__file__).resolve().parents[1] / "artifacts" / "acceptance"
for run in sorted(p for p in root.iterdir() if (p / "metrics.csv").exists()):
    rows = read_log(run / "metrics.csv")
    done = run / "done.json"
    state = f"finished, best epoch {json.loads(done.read_text())['best_epoch']}" if done.exists() else "in progress"
    print(f"\n{run.name} ({state})")
    print("  epoch  loss     P@0.5  mIoU   IE")
    for r in rows:
        print(f"  {r['epoch']:5d}  {r['loss']:7.3f}  {r['p_at_50']:.3f}  {r['miou']:.3f}  {r['ie']:.3f}")
