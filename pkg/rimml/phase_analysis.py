"""Noisy-phase study: how much does reusing the noisy phase cost at each SNR?

For a clean utterance and a noise recording, every SNR level is mixed, the clean magnitude
is recombined with the noisy phase, the result is resynthesized, and its SSNR against the
clean signal is reported together with the fraction of T-F units whose clean/noisy phase
difference stays below a threshold.
"""
import os
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from rimml.dataset_utils import mix_at_snr
from rimml.dsp_utils import (
    RISpectrogram,
    StftConfig,
    Waveform,
    combine_magnitude_phase,
    istft,
    stft,
)
from rimml.metrics import score_in_support

DEFAULT_THRESHOLD = 0.1


@dataclass(frozen=True, eq=False)
class PhaseDiffMask:
    threshold: float
    mask: np.ndarray

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    @property
    def fraction(self) -> float:
        return float(np.mean(self.mask)) if self.mask.size else 0.0


def phase_of(ri: RISpectrogram) -> np.ndarray:
    """Four-quadrant phase in (-pi, pi]; zero-magnitude bins get phase 0."""
    phase = np.arctan2(ri.imag, ri.real)
    phase[phase <= -np.pi] = np.pi
    phase[(ri.real == 0) & (ri.imag == 0)] = 0.0
    return phase


def wrap_phase(x: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(x + np.pi, 2 * np.pi) - np.pi
    wrapped[wrapped <= -np.pi] = np.pi
    return wrapped


def phase_diff_mask(clean: np.ndarray, noisy: np.ndarray,
                    threshold: float = DEFAULT_THRESHOLD) -> PhaseDiffMask:
    """True where the wrapped clean/noisy phase difference is below ``threshold``."""
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noisy.shape}")
    return PhaseDiffMask(threshold, np.abs(wrap_phase(clean - noisy)) < threshold)


def resynthesize_with_noisy_phase(clean: Waveform, noisy: Waveform, cfg: StftConfig) -> Waveform:
    """Waveform from the clean magnitude and the noisy phase."""
    if len(clean) != len(noisy):
        raise ValueError(f"length mismatch: clean {len(clean)} vs noisy {len(noisy)}")
    combined = combine_magnitude_phase(stft(clean, cfg).magnitude(), phase_of(stft(noisy, cfg)))
    return istft(combined, cfg, clean.sample_rate)


def noisy_phase_ssnr_table(
    clean: Waveform,
    noise: Waveform,
    snr_levels: Iterable[float],
    cfg: Optional[StftConfig] = None,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    mask_dir: Optional[str] = None,
    mask_prefix: str = 'mask',
) -> pd.DataFrame:
    """SSNR of clean-magnitude/noisy-phase resynthesis at each input SNR.

    Parameters
    ----------
    clean, noise : Waveform
        Clean utterance and a noise recording at least as long.
    snr_levels : iterable of float
        Input SNRs in dB; ``inf`` is allowed (noise scaled to zero).
    cfg : StftConfig, optional
        Framing; defaults to the 512/256 Hann setup.
    seed : int
        Seed for the noise crop offset (shared by all levels).
    threshold : float
        Phase-difference threshold in radians for the agreement mask.
    mask_dir : str, optional
        When given, each level's mask is written as ``{mask_prefix}_{snr}dB.pgm``.

    Returns
    -------
    pandas.DataFrame
        Columns ``snr_db, ssnr_db, mask_fraction`` in the order of ``snr_levels``.
    """
    levels = [float(s) for s in snr_levels]
    if not levels:
        raise ValueError("snr_levels must be non-empty")
    cfg = cfg or StftConfig()
    clean_phase = phase_of(stft(clean, cfg))

    rows = []
    for snr in levels:
        noisy = mix_at_snr(clean, noise, snr, seed)
        resynth = resynthesize_with_noisy_phase(clean, noisy, cfg)
        mask = phase_diff_mask(clean_phase, phase_of(stft(noisy, cfg)), threshold)
        rows.append({'snr_db': snr,
                     'ssnr_db': score_in_support('noisy_phase', clean, resynth, cfg).ssnr_db,
                     'mask_fraction': mask.fraction})
        if mask_dir:
            write_mask_pgm(os.path.join(mask_dir, f'{mask_prefix}_{snr:+g}dB.pgm'), mask)
    return pd.DataFrame(rows, columns=['snr_db', 'ssnr_db', 'mask_fraction'])


def write_mask_pgm(path: str, mask: PhaseDiffMask) -> None:
    """ASCII PGM (P2): frequency on the vertical axis (low bins at the bottom), 1 = agreement."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    img = mask.mask.T[::-1].astype(int)
    lines = ['P2', f'# phase difference < {mask.threshold:g} rad',
             f'{img.shape[1]} {img.shape[0]}', '1']
    lines.extend(' '.join(str(v) for v in row) for row in img)
    with open(path, 'w') as fh:
        fh.write('\n'.join(lines) + '\n')
