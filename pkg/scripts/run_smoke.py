#!/usr/bin/env python3
"""Run the committed smoke experiment end to end: prepare, train, evaluate, phase study.

Usage, from the repository root:

    python3 scripts/run_smoke.py              # writes runs/smoke/
    python3 scripts/run_smoke.py runs/try2    # custom output directory

Equivalent to calling ``python -m rimml.cli --config experiments/smoke/config.ini <verb>``
for each verb in turn; stops at the first non-zero exit status.
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from rimml.cli import main

REPO = Path(__file__).resolve().parents[1]
CONFIG = str(REPO / 'experiments' / 'smoke' / 'config.ini')
VERBS = (['prepare'], ['train'], ['evaluate'], ['phase-study'])


def run(out_dir: str) -> int:
    for verb in VERBS:
        print(f"\n▶ {' '.join(verb)}", flush=True)
        status = main(['--config', CONFIG, '--out', out_dir] + verb)
        if status != 0:
            return status
    return 0


if __name__ == '__main__':
    sys.exit(run(sys.argv[1] if len(sys.argv) > 1 else str(REPO / 'runs' / 'smoke')))
