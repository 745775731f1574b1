"""Enhancement quality metrics and evaluation reports.

Two objective measures are computed for every scored utterance:

- **SSNR** (segmental SNR, dB): time-domain, mean over frames of the clamped per-frame
  ``10 log10(sum ref^2 / sum (ref - test)^2)``; frames whose reference energy is below
  ``silence_floor`` times the loudest frame are skipped.
- **LSD** (log-spectral distortion, dB): frequency-domain, per-frame RMS over bins of the
  dB power difference, averaged over frames.

:func:`compute_report` assembles per-utterance rows into the evaluation table and writes
(to ``{output_dir}``):

- ``report.csv``         - one row per (utterance, model) plus per-SNR and overall averages
- ``metrics_summary.md`` - human-readable per-SNR table

:func:`rollup_metrics` concatenates many runs' ``report.csv`` averages for cross-run comparison.
"""
import glob
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from rimml.dsp_utils import LOG_FLOOR, StftConfig, Waveform, stft, synthesis_support

SSNR_FRAME = 512
SSNR_HOP = 256
SSNR_CLAMP = (-10.0, 35.0)
SILENCE_FLOOR = 1e-8

REPORT_COLUMNS = ['utterance_id', 'snr_db', 'noise_kind', 'model', 'ssnr_db', 'lsd_db']
AVG_ID = 'AVG'


@dataclass(frozen=True)
class MetricReport:
    utterance_id: str
    ssnr_db: float
    lsd_db: float
    frames_scored: int

    def __post_init__(self):
        if self.frames_scored < 1:
            raise ValueError("frames_scored must be >= 1")


def _check_pair(reference: Waveform, test: Waveform) -> Tuple[np.ndarray, np.ndarray]:
    if not isinstance(reference, Waveform) or not isinstance(test, Waveform):
        raise TypeError("reference and test must be Waveform instances")
    if len(reference) != len(test):
        raise ValueError(f"length mismatch: reference {len(reference)} vs test {len(test)}")
    return reference.samples, test.samples


def segmental_snr_frames(
    reference: Waveform,
    test: Waveform,
    frame_len: int = SSNR_FRAME,
    hop: int = SSNR_HOP,
    clamp: Tuple[float, float] = SSNR_CLAMP,
    silence_floor: float = SILENCE_FLOOR,
) -> np.ndarray:
    """Clamped per-frame SNR (dB) of every non-silent frame."""
    ref, tst = _check_pair(reference, test)
    lo, hi = clamp
    if not lo < hi:
        raise ValueError("clamp must satisfy lo < hi")
    if frame_len <= 0 or hop <= 0:
        raise ValueError("frame_len and hop must be positive")
    if len(ref) < frame_len:
        raise ValueError(f"signal shorter than one SSNR frame ({len(ref)} < {frame_len})")

    ref_frames = np.lib.stride_tricks.sliding_window_view(ref, frame_len)[::hop]
    err_frames = np.lib.stride_tricks.sliding_window_view(ref - tst, frame_len)[::hop]
    energy = np.sum(ref_frames ** 2, axis=1)
    err = np.sum(err_frames ** 2, axis=1)

    peak = energy.max()
    active = energy > silence_floor * peak if peak > 0 else np.zeros_like(energy, dtype=bool)
    if not active.any():
        raise ValueError("all frames are silent; SSNR is undefined")

    with np.errstate(divide='ignore'):
        per_frame = 10.0 * np.log10(energy[active] / err[active])
    return np.clip(per_frame, lo, hi)


def ssnr(
    reference: Waveform,
    test: Waveform,
    frame_len: int = SSNR_FRAME,
    hop: int = SSNR_HOP,
    clamp: Tuple[float, float] = SSNR_CLAMP,
) -> float:
    """Segmental SNR in dB (see module docstring)."""
    return float(np.mean(segmental_snr_frames(reference, test, frame_len, hop, clamp)))


def lsd(reference: Waveform, test: Waveform, cfg: StftConfig, eps: float = LOG_FLOOR) -> float:
    """Log-spectral distortion in dB with powers floored at ``eps``."""
    _check_pair(reference, test)
    if eps <= 0:
        raise ValueError("eps must be positive")
    p_ref = np.maximum(stft(reference, cfg).power(), eps)
    p_tst = np.maximum(stft(test, cfg).power(), eps)
    diff = 10.0 * np.log10(p_ref) - 10.0 * np.log10(p_tst)
    return float(np.mean(np.sqrt(np.mean(diff ** 2, axis=1))))


def score_utterance(
    utterance_id: str,
    reference: Waveform,
    test: Waveform,
    cfg: StftConfig,
    frame_len: int = SSNR_FRAME,
    hop: int = SSNR_HOP,
    clamp: Tuple[float, float] = SSNR_CLAMP,
) -> MetricReport:
    frames = segmental_snr_frames(reference, test, frame_len, hop, clamp)
    return MetricReport(
        utterance_id=utterance_id,
        ssnr_db=float(np.mean(frames)),
        lsd_db=lsd(reference, test, cfg),
        frames_scored=int(len(frames)),
    )


def score_in_support(utterance_id: str, reference: Waveform, test: Waveform,
                     cfg: StftConfig) -> MetricReport:
    """Score only the fully overlapped synthesis region of the reference's frames.

    ``test`` may be shorter than ``reference`` (resynthesis drops the trailing partial frame)
    as long as it covers that region.
    """
    region = synthesis_support(len(reference), cfg)
    if len(test) < region.stop:
        raise ValueError(f"test signal ({len(test)} samples) does not cover the scored region "
                         f"ending at sample {region.stop}")
    return score_utterance(utterance_id,
                           Waveform(reference.samples[region], reference.sample_rate),
                           Waveform(test.samples[region], test.sample_rate), cfg)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def summarize_report(rows: pd.DataFrame) -> pd.DataFrame:
    """Append one averaged row per (SNR level, model) and one overall row per model."""
    if rows.empty:
        raise ValueError("no scored utterances to summarize")
    per_utt = rows[REPORT_COLUMNS].copy()
    by_snr = (per_utt.groupby(['snr_db', 'model'], sort=True)[['ssnr_db', 'lsd_db']]
              .mean().reset_index())
    by_snr['utterance_id'] = AVG_ID
    by_snr['noise_kind'] = 'all'
    overall = per_utt.groupby('model', sort=True)[['ssnr_db', 'lsd_db']].mean().reset_index()
    overall['utterance_id'] = AVG_ID
    overall['noise_kind'] = 'all'
    overall['snr_db'] = np.nan
    return pd.concat([per_utt, by_snr[REPORT_COLUMNS], overall[REPORT_COLUMNS]], ignore_index=True)


def compute_report(
    rows: Sequence[Dict[str, object]],
    output_dir: Optional[str] = None,
    *,
    title: str = 'Evaluation',
) -> pd.DataFrame:
    """Build (and optionally save) the evaluation report.

    Parameters
    ----------
    rows : sequence of dict
        One dict per scored (utterance, model) with the keys of ``REPORT_COLUMNS``.
    output_dir : str, optional
        When given, write ``report.csv`` and ``metrics_summary.md`` there.
    title : str
        Heading used in the markdown summary.

    Returns
    -------
    pandas.DataFrame
        Per-utterance rows followed by the averaged rows (``utterance_id == 'AVG'``).
    """
    report = summarize_report(pd.DataFrame(list(rows), columns=REPORT_COLUMNS))
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        report.to_csv(os.path.join(output_dir, 'report.csv'), index=False, float_format='%.9g')
        _write_markdown(report, title, os.path.join(output_dir, 'metrics_summary.md'))
    return report


def averaged_rows(report: pd.DataFrame, model: Optional[str] = None) -> pd.DataFrame:
    """The per-SNR averaged rows of a report, optionally for a single model."""
    avg = report[(report['utterance_id'] == AVG_ID) & report['snr_db'].notna()]
    if model is not None:
        avg = avg[avg['model'] == model]
    return avg.reset_index(drop=True)


def overall_means(report: pd.DataFrame, model: str) -> Tuple[float, float]:
    """(mean SSNR, mean LSD) over all utterances for ``model``."""
    rows = report[(report['utterance_id'] != AVG_ID) & (report['model'] == model)]
    if rows.empty:
        raise ValueError(f"no rows for model '{model}'")
    return float(rows['ssnr_db'].mean()), float(rows['lsd_db'].mean())


def _write_markdown(report: pd.DataFrame, title: str, path: str) -> None:
    avg = averaged_rows(report)
    models = sorted(avg['model'].unique())
    n_utts = report.loc[report['utterance_id'] != AVG_ID, 'utterance_id'].nunique()
    L = [
        f"# {title}\n",
        f"*{n_utts} scored utterances; SSNR and LSD in dB (higher SSNR / lower LSD is better).*\n",
        "| SNR (dB) | " + " | ".join(f"{m} LSD | {m} SSNR" for m in models) + " |",
        "|---|" + "---|---|" * len(models),
    ]
    for snr in sorted(avg['snr_db'].unique(), reverse=True):
        cells = []
        for m in models:
            hit = avg[(avg['snr_db'] == snr) & (avg['model'] == m)]
            cells.append(f"{hit['lsd_db'].iloc[0]:.3f} | {hit['ssnr_db'].iloc[0]:.3f}"
                         if len(hit) else "- | -")
        L.append(f"| {snr:g} | " + " | ".join(cells) + " |")
    overall = report[(report['utterance_id'] == AVG_ID) & report['snr_db'].isna()]
    cells = []
    for m in models:
        hit = overall[overall['model'] == m]
        cells.append(f"**{hit['lsd_db'].iloc[0]:.3f}** | **{hit['ssnr_db'].iloc[0]:.3f}**")
    L.append("| **Avg** | " + " | ".join(cells) + " |")
    with open(path, 'w') as fh:
        fh.write("\n".join(L) + "\n")


def rollup_metrics(
    runs_dir: str,
    output_path: Optional[str] = None,
) -> pd.DataFrame:
    """Concatenate the overall-average rows of every ``report.csv`` below ``runs_dir``.

    The run name is the report's directory relative to ``runs_dir`` (a trailing
    ``evaluation`` component is dropped).

    Parameters
    ----------
    runs_dir : str
        Directory searched recursively for ``report.csv`` files.
    output_path : str, optional
        When given, also write the combined table to this CSV path.

    Returns
    -------
    pandas.DataFrame
        One row per (run, model); empty DataFrame if no reports are found.
    """
    paths = sorted(glob.glob(os.path.join(runs_dir, '**', 'report.csv'), recursive=True))
    frames: List[pd.DataFrame] = []
    for p in paths:
        rep = pd.read_csv(p)
        overall = rep[(rep['utterance_id'] == AVG_ID) & rep['snr_db'].isna()].copy()
        run_dir = os.path.dirname(p)
        if os.path.basename(run_dir) == 'evaluation':
            run_dir = os.path.dirname(run_dir)
        overall.insert(0, 'run', os.path.relpath(run_dir, runs_dir).replace(os.sep, '/'))
        frames.append(overall[['run', 'model', 'ssnr_db', 'lsd_db']])
    combined = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    if output_path and not combined.empty:
        combined.to_csv(output_path, index=False, float_format='%.9g')
    return combined
