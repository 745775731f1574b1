"""Roll every run's evaluation averages into one cross-run comparison table.

Reads each ``<runs_dir>/<run>/evaluation/report.csv`` (written by ``rimml.pipeline.cmd_evaluate``
→ ``rimml.metrics.compute_report``) and keeps the overall-average row of every model.

Usage:
    python analysis/build_metrics_rollup.py [runs_dir] [output_csv]

Defaults: runs_dir = runs, output_csv = runs/metrics_rollup.csv
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from rimml.metrics import rollup_metrics

REPO = Path(__file__).resolve().parents[1]
runs = sys.argv[1] if len(sys.argv) > 1 else str(REPO / 'runs')
out = sys.argv[2] if len(sys.argv) > 2 else str(Path(runs) / 'metrics_rollup.csv')

df = rollup_metrics(runs, output_path=out)
if df.empty:
    print(f"No report.csv found under {runs}")
else:
    print(df.to_string(index=False))
    print(f"\nWrote {out} ({df['run'].nunique()} runs)")
