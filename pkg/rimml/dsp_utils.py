"""Short-time Fourier analysis/synthesis and the fixed synthesis matrices.

Conventions used everywhere in RIShift:

- Forward DFT carries no scale; the inverse carries ``1/N`` (it lives inside ``C`` and ``S``).
- A stacked RI vector is laid out ``[real bins 0..L-1, imag bins 0..L-1]`` (length ``2L``).
- Frames are taken with no padding; a trailing partial frame is dropped.

The matrices ``U1, U2, C, S, F, P`` express the inverse DFT of one half-spectrum as a single
linear map ``F`` (frame = ``F @ y``) and the per-bin power as ``P @ y**2``. They are the fixed
weights of the pseudo layers the loss functions in :mod:`rimml.losses` back-propagate through.
"""
import functools
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
import soundfile as sf
from scipy import signal

DEFAULT_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-8
_COLA_TOL = 1e-10

# Window kinds accepted by StftConfig -> scipy.signal.get_window name
_WINDOWS = {
    'hann': 'hann',
    'hamming': 'hamming',
    'rect': 'boxcar',
}


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono real-valued signal."""
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D (mono), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, 'samples', samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def power(self) -> float:
        return float(np.mean(self.samples ** 2)) if len(self.samples) else 0.0


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters. ``bins`` (L) is derived as ``fft_size // 2 + 1``."""
    fft_size: int = 512
    hop: int = 256
    window: str = 'hann'

    def __post_init__(self):
        if self.fft_size < 2 or self.fft_size % 2 != 0:
            raise ValueError("fft_size must be an even integer >= 2")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError("hop must be in (0, fft_size]")
        if self.window not in _WINDOWS:
            raise ValueError(f"window must be one of {sorted(_WINDOWS)}, got '{self.window}'")
        win = self.window_array()
        if not signal.check_COLA(win, self.fft_size, self.fft_size - self.hop, tol=_COLA_TOL):
            raise ValueError(
                f"{self.window} window of length {self.fft_size} is not COLA at hop {self.hop}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.fft_size)

    @property
    def cola_gain(self) -> float:
        """Constant overlap-add sum of the analysis window at this hop."""
        return float(self.window_array().sum() / self.hop)


@functools.lru_cache(maxsize=None)
def _window(kind: str, n: int) -> np.ndarray:
    win = signal.get_window(_WINDOWS[kind], n, fftbins=True).astype(np.float64)
    win.setflags(write=False)
    return win


@dataclass(frozen=True, eq=False)
class RISpectrogram:
    """Per-frame real/imaginary half spectra, each ``T x L``."""
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        real = np.asarray(self.real, dtype=np.float64)
        imag = np.asarray(self.imag, dtype=np.float64)
        if real.ndim != 2 or real.shape != imag.shape:
            raise ValueError(f"real/imag must be matching T x L matrices, got {real.shape} and {imag.shape}")
        if not (np.all(np.isfinite(real)) and np.all(np.isfinite(imag))):
            raise ValueError("spectrogram contains NaN or Inf")
        object.__setattr__(self, 'real', real)
        object.__setattr__(self, 'imag', imag)

    @property
    def frames(self) -> int:
        return self.real.shape[0]

    @property
    def bins(self) -> int:
        return self.real.shape[1]

    def stacked(self) -> np.ndarray:
        """``T x 2L`` matrix of stacked RI vectors."""
        return np.concatenate([self.real, self.imag], axis=1)

    @classmethod
    def from_stacked(cls, stacked: np.ndarray) -> 'RISpectrogram':
        stacked = np.atleast_2d(np.asarray(stacked, dtype=np.float64))
        if stacked.shape[1] % 2 != 0:
            raise ValueError("stacked RI rows must have even length 2L")
        n_bins = stacked.shape[1] // 2
        return cls(stacked[:, :n_bins], stacked[:, n_bins:])

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    def power(self) -> np.ndarray:
        return self.real ** 2 + self.imag ** 2


@dataclass(frozen=True, eq=False)
class SynthesisMatrices:
    """Fixed pseudo-layer weights for a half-spectrum of ``L`` bins (``N = 2L - 2``)."""
    U1: np.ndarray
    U2: np.ndarray
    C: np.ndarray
    S: np.ndarray
    F: np.ndarray
    P: np.ndarray
    bins: int

    @property
    def frame_length(self) -> int:
        return 2 * self.bins - 2


# ---------------------------------------------------------------------------
# Analysis / synthesis
# ---------------------------------------------------------------------------

def frame_count(n_samples: int, cfg: StftConfig) -> int:
    """Number of whole frames in ``n_samples`` (trailing partial frame dropped)."""
    if n_samples < cfg.fft_size:
        return 0
    return 1 + (n_samples - cfg.fft_size) // cfg.hop


def stft(w: Waveform, cfg: StftConfig) -> RISpectrogram:
    """Windowed half-spectrum of every whole frame of ``w``."""
    if not isinstance(w, Waveform):
        raise TypeError("w must be a Waveform")
    n_frames = frame_count(len(w), cfg)
    if n_frames == 0:
        raise ValueError(
            f"insufficient samples: {len(w)} < one frame of {cfg.fft_size}")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, cfg.fft_size)[::cfg.hop][:n_frames]
    spectra = np.fft.rfft(frames * cfg.window_array(), axis=1)
    return RISpectrogram(spectra.real, spectra.imag)


def istft(ri: RISpectrogram, cfg: StftConfig, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Overlap-add resynthesis normalized by the COLA gain.

    Output length is ``fft_size + (T - 1) * hop``; samples inside
    :func:`synthesis_support` reproduce the analysed signal exactly.
    """
    if ri.frames == 0:
        raise ValueError("cannot resynthesize a spectrogram with zero frames")
    if ri.bins != cfg.bins:
        raise ValueError(f"spectrogram has {ri.bins} bins, config expects {cfg.bins}")
    frames = np.fft.irfft(ri.real + 1j * ri.imag, n=cfg.fft_size, axis=1)
    out = np.zeros(cfg.fft_size + (ri.frames - 1) * cfg.hop)
    for t in range(ri.frames):
        start = t * cfg.hop
        out[start:start + cfg.fft_size] += frames[t]
    return Waveform(out / cfg.cola_gain, sample_rate)


def synthesis_support(n_samples: int, cfg: StftConfig) -> slice:
    """Sample range that is fully covered by overlapping frames after :func:`istft`.

    Everything outside it sees a partial window sum (edge taper) or no frame at all.
    """
    n_frames = frame_count(n_samples, cfg)
    if n_frames == 0:
        raise ValueError(f"insufficient samples: {n_samples} < one frame of {cfg.fft_size}")
    covered = cfg.fft_size + (n_frames - 1) * cfg.hop
    margin = cfg.fft_size - cfg.hop
    if covered - 2 * margin <= 0:
        return slice(0, covered)
    return slice(margin, covered - margin)


# ---------------------------------------------------------------------------
# Pseudo-layer matrices
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _cached_matrices(n_bins: int) -> SynthesisMatrices:
    n = 2 * n_bins - 2
    grid = np.outer(np.arange(n), np.arange(n)) * (2.0 * np.pi / n)
    C = np.cos(grid) / n
    S = np.sin(grid) / n

    U1 = np.zeros((n, n_bins))
    U2 = np.zeros((n, n_bins))
    for k in range(n_bins):
        U1[k, k] = 1.0
        U2[k, k] = 1.0
    for k in range(1, n_bins - 1):              # mirror image of the interior bins
        U1[n - k, k] = 1.0
        U2[n - k, k] = -1.0

    F = np.hstack([C @ U1, -S @ U2])
    P = np.hstack([np.eye(n_bins), np.eye(n_bins)])
    for arr in (U1, U2, C, S, F, P):
        arr.setflags(write=False)
    return SynthesisMatrices(U1=U1, U2=U2, C=C, S=S, F=F, P=P, bins=n_bins)


def build_synthesis_matrices(n_bins: int) -> SynthesisMatrices:
    """Build ``U1, U2, C, S, F, P`` for ``L = n_bins`` (memoized, read-only arrays).

    Parameters
    ----------
    n_bins : int
        Half-spectrum length L; the synthesized frame has ``N = 2L - 2`` samples.

    Returns
    -------
    SynthesisMatrices
        ``F = [C U1 | -S U2]`` maps a stacked RI vector to its time frame and
        ``P = [I | I]`` sums squared real/imaginary parts into per-bin power.
    """
    if not isinstance(n_bins, (int, np.integer)):
        raise TypeError("n_bins must be an integer")
    if n_bins < 2:
        raise ValueError("n_bins (L) must be >= 2")
    return _cached_matrices(int(n_bins))


def _check_stacked(y: np.ndarray, n_bins: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != 2 * n_bins:
        raise ValueError(f"stacked RI vector must have length {2 * n_bins}, got {y.shape[-1]}")
    return y


def frame_via_F(y: np.ndarray, m: SynthesisMatrices) -> np.ndarray:
    """Time frame(s) ``F @ y`` for a stacked RI vector or a batch of them (last axis)."""
    y = _check_stacked(y, m.bins)
    return y @ m.F.T


def lps_from_ri(y: np.ndarray, eps: float = LOG_FLOOR) -> np.ndarray:
    """Log-power spectrum ``log(max(P @ y**2, eps))`` of stacked RI vector(s)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] % 2 != 0:
        raise ValueError("stacked RI vector must have even length 2L")
    m = build_synthesis_matrices(y.shape[-1] // 2)
    return np.log(np.maximum((y ** 2) @ m.P.T, eps))


def combine_magnitude_phase(mag: np.ndarray, phase: np.ndarray) -> RISpectrogram:
    """Polar to RI. DC and Nyquist bins stay real with the sign of ``cos(phase)``."""
    mag = np.asarray(mag, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if mag.shape != phase.shape or mag.ndim != 2:
        raise ValueError(f"mag/phase must be matching T x L matrices, got {mag.shape} and {phase.shape}")
    if np.any(mag < 0):
        raise ValueError("magnitude must be non-negative")
    real = mag * np.cos(phase)
    imag = mag * np.sin(phase)
    for k in (0, mag.shape[1] - 1):
        real[:, k] = np.where(np.cos(phase[:, k]) >= 0, mag[:, k], -mag[:, k])
        imag[:, k] = 0.0
    return RISpectrogram(real, imag)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def read_wav(path: str, expected_rate: Optional[int] = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a mono PCM WAV into [-1, 1) floats (int16 / 32768)."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"WAV file not found: {path}")
    data, rate = sf.read(path, dtype='float64', always_2d=False)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz does not match expected {expected_rate} Hz")
    return Waveform(data, int(rate))


def write_wav(path: str, w: Waveform) -> None:
    """Write 16-bit PCM mono; samples outside [-1, 1) are clipped by the encoder."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sf.write(path, w.samples, w.sample_rate, subtype='PCM_16', format='WAV')


def dump_spectrogram_csv(path: str, ri: RISpectrogram) -> None:
    """Debug dump: one frame per row, columns ``r0..r{L-1}, i0..i{L-1}``."""
    cols = [f'r{k}' for k in range(ri.bins)] + [f'i{k}' for k in range(ri.bins)]
    pd.DataFrame(ri.stacked(), columns=cols).to_csv(path, index=False, float_format='%.9e')
