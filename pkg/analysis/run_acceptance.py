"""Long-running acceptance checks on the committed smoke experiment.

Covers the properties that need real training runs and so stay out of the pytest suite:

1. phase study (white noise, -12..12 dB): SSNR strictly increasing, mask fraction non-decreasing
2. trained RI-CNN vs noisy input at 0 dB: SSNR +2 dB or more, LSD at least 10% lower
3. beta sweep {0, 0.1}: LSD(0.1) <= LSD(0), SSNR loss below 0.5 dB
4. determinism: a second identical run gives byte-identical loss log and report

Usage:
    python analysis/run_acceptance.py [work_dir]

Default work_dir = runs/acceptance. Exit status is the number of failed checks.
"""
import dataclasses
import filecmp
import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from rimml.config import load_config
from rimml.metrics import averaged_rows
from rimml.pipeline import cmd_beta_sweep, cmd_evaluate, cmd_phase_study, cmd_prepare, cmd_train

REPO = Path(__file__).resolve().parents[1]
work = sys.argv[1] if len(sys.argv) > 1 else str(REPO / 'runs' / 'acceptance')
base = load_config(str(REPO / 'experiments' / 'smoke' / 'config.ini'), out_dir=work)
results = []


def check(name: str, ok: bool, detail: str) -> None:
    results.append(ok)
    print(f"{'✅' if ok else '❌'} {name}: {detail}", flush=True)


# 1. phase study
phase = cmd_phase_study(dataclasses.replace(base, out_dir=os.path.join(work, 'phase')),
                        [-12, -6, 0, 6, 12], 'white')
ssnr = phase['ssnr_db'].tolist()
frac = phase['mask_fraction'].tolist()
check('phase study SSNR strictly increasing', all(b > a for a, b in zip(ssnr, ssnr[1:])),
      ', '.join(f'{v:.2f}' for v in ssnr))
check('phase agreement non-decreasing', all(b >= a for a, b in zip(frac, frac[1:])),
      ', '.join(f'{v:.3f}' for v in frac))


# 2. smoke training vs the noisy baseline at 0 dB
def train_and_evaluate(out_dir: str):
    cfg = dataclasses.replace(base, out_dir=out_dir)
    cmd_prepare(cfg)
    cmd_train(cfg)
    return cmd_evaluate(cfg)


run_a = os.path.join(work, 'smoke_a')
report = train_and_evaluate(run_a)
at0 = averaged_rows(report)
at0 = at0[at0['snr_db'] == 0.0].set_index('model')
noisy, model = at0.loc['noisy'], at0.loc[base.model.arch]
check('SSNR gain at 0 dB >= 2 dB', model['ssnr_db'] - noisy['ssnr_db'] >= 2.0,
      f"{noisy['ssnr_db']:.2f} -> {model['ssnr_db']:.2f} dB")
check('LSD reduction at 0 dB >= 10%', model['lsd_db'] <= 0.9 * noisy['lsd_db'],
      f"{noisy['lsd_db']:.2f} -> {model['lsd_db']:.2f} dB")

# 3. beta sweep
sweep = cmd_beta_sweep(dataclasses.replace(base, out_dir=os.path.join(work, 'sweep')), [0.0, 0.1])
b0, b1 = sweep.iloc[0], sweep.iloc[1]
check('LSD(beta=0.1) <= LSD(beta=0)', b1['lsd_db'] <= b0['lsd_db'],
      f"{b0['lsd_db']:.3f} vs {b1['lsd_db']:.3f} dB")
check('SSNR loss at beta=0.1 < 0.5 dB', b0['ssnr_db'] - b1['ssnr_db'] < 0.5,
      f"{b0['ssnr_db']:.3f} vs {b1['ssnr_db']:.3f} dB")

# 4. determinism
run_b = os.path.join(work, 'smoke_b')
train_and_evaluate(run_b)
for rel in ('loss_log.csv', os.path.join('evaluation', 'report.csv')):
    same = filecmp.cmp(os.path.join(run_a, rel), os.path.join(run_b, rel), shallow=False)
    check(f'identical {rel}', same, 'byte-identical' if same else 'files differ')

print(f"\n{sum(results)}/{len(results)} checks passed")
sys.exit(len(results) - sum(results))
