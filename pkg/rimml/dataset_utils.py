"""Clean/noise sources, SNR mixing, feature extraction and normalization statistics.

Clean speech comes from user WAV files or from the built-in synthetic source
``synth:vowel:<seed>`` (three formant-filtered glottal pulse trains). Noise is generated
(``white``, ``engine_like``, ``babble_like``) or read from a WAV (``file``). Every draw is
seeded, so identical manifests produce identical bytes.

Manifest CSV columns: ``utterance_id, clean_path, noise_kind, snr_db, seed, split``
(optional ``noise_path`` for ``noise_kind == 'file'``).
"""
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import signal

from rimml.dsp_utils import (
    DEFAULT_SAMPLE_RATE,
    LOG_FLOOR,
    StftConfig,
    Waveform,
    lps_from_ri,
    read_wav,
    stft,
)

NOISE_KINDS = ('white', 'engine_like', 'babble_like', 'file')
TARGET_KINDS = ('ri', 'lps')
STD_FLOOR = 1e-6
SYNTH_PREFIX = 'synth:vowel:'
SYNTH_SECONDS = 1.0
ENVELOPE_FLOOR = 0.2
BREATH_LEVEL = 2e-3

TRAIN_NOISES = ('white', 'babble_like')
TRAIN_SNRS = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0)
TEST_NOISES = ('engine_like',)
TEST_SNRS = (-12.0, -6.0, 0.0, 6.0, 12.0)

MANIFEST_COLUMNS = ['utterance_id', 'clean_path', 'noise_kind', 'snr_db', 'seed', 'split']

_NRM_MAGIC = b'NRM1'


@dataclass(frozen=True)
class MixtureSpec:
    clean_id: str
    noise_kind: str
    snr_db: float
    seed: int
    clean_path: str = ''
    split: str = 'train'
    noise_path: Optional[str] = None

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}, got '{self.noise_kind}'")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.noise_kind == 'file' and not self.noise_path:
            raise ValueError(f"{self.clean_id}: noise_kind 'file' needs a noise_path")


@dataclass(frozen=True)
class MixDetails:
    gain: float
    offset: int
    peak_scale: float


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------

def _rms_normalize(x: np.ndarray, rms: float = 0.1) -> np.ndarray:
    power = np.sqrt(np.mean(x ** 2))
    return x * (rms / power) if power > 0 else x


def generate_noise(kind: str, length: int, seed: int,
                   sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Deterministic synthetic noise.

    - ``white``: i.i.d. Gaussian samples.
    - ``engine_like``: harmonic stack on a 40-80 Hz fundamental plus 300 Hz low-passed noise.
    - ``babble_like``: six amplitude-modulated band-limited noise streams.
    """
    if kind not in NOISE_KINDS or kind == 'file':
        raise ValueError(f"unknown generated noise kind '{kind}' "
                         f"(expected one of {[k for k in NOISE_KINDS if k != 'file']})")
    if length <= 0:
        raise ValueError("length must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate

    if kind == 'white':
        return Waveform(0.1 * rng.standard_normal(length), sample_rate)

    if kind == 'engine_like':
        f0 = rng.uniform(40.0, 80.0)
        wobble = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t)
        phase = 2 * np.pi * f0 * np.cumsum(wobble) / sample_rate
        harmonics = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 7))
        b, a = signal.butter(4, 300.0, btype='low', fs=sample_rate)
        rumble = signal.lfilter(b, a, rng.standard_normal(length))
        x = _rms_normalize(harmonics) + 0.5 * _rms_normalize(rumble)
        return Waveform(_rms_normalize(x), sample_rate)

    streams = np.zeros(length)
    for _ in range(6):
        lo = rng.uniform(150.0, 600.0)
        hi = lo + rng.uniform(800.0, 2800.0)
        b, a = signal.butter(2, [lo, min(hi, 0.45 * sample_rate)], btype='band', fs=sample_rate)
        band = _rms_normalize(signal.lfilter(b, a, rng.standard_normal(length)))
        rate = rng.uniform(2.0, 6.0)                  # syllable-like modulation
        env = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        streams += band * env
    return Waveform(_rms_normalize(streams), sample_rate)


def _resonator(freq: float, bandwidth: float, sample_rate: int) -> Tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2 * np.pi * freq / sample_rate
    return np.array([1.0 - r]), np.array([1.0, -2.0 * r * np.cos(theta), r * r])


def synthesize_vowel(length: int, seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Vowel-like test utterance: three glottal pulse trains, each through one formant.

    A syllabic envelope never drops below ``ENVELOPE_FLOOR`` and a low white aspiration
    bed (``BREATH_LEVEL`` of the voiced peak) keeps the STFT power off the log floor.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate
    formants = (rng.uniform(300, 800), rng.uniform(900, 2200), rng.uniform(2300, 3200))
    gains = (1.0, 0.5, 0.25)

    out = np.zeros(length)
    for freq, gain in zip(formants, gains):
        f0 = rng.uniform(100.0, 220.0) * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))
        cycles = np.cumsum(f0) / sample_rate
        pulses = np.diff(np.floor(cycles), prepend=0.0)
        pulses = signal.lfilter([1.0], [1.0, -0.95], pulses)         # glottal roll-off
        b, a = _resonator(freq, rng.uniform(60.0, 150.0), sample_rate)
        out += gain * _rms_normalize(signal.lfilter(b, a, pulses))

    # syllabic envelope; troughs keep ENVELOPE_FLOOR of the peak amplitude
    rate = rng.uniform(2.0, 4.0)
    swing = np.sin(np.pi * rate * t + rng.uniform(0, np.pi)) ** 2
    out *= ENVELOPE_FLOOR + (1.0 - ENVELOPE_FLOOR) * swing
    b, a = signal.butter(2, 60.0, btype='high', fs=sample_rate)    # pulse trains carry DC
    out = signal.lfilter(b, a, out)
    out /= np.max(np.abs(out))
    out += BREATH_LEVEL * rng.standard_normal(length)            # aspiration bed
    return Waveform(0.5 * out / np.max(np.abs(out)), sample_rate)


def load_clean(source: str, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Clean utterance from a WAV path or a ``synth:vowel:<seed>`` source."""
    if source.startswith(SYNTH_PREFIX):
        seed = int(source[len(SYNTH_PREFIX):])
        return synthesize_vowel(int(SYNTH_SECONDS * sample_rate), seed, sample_rate)
    return read_wav(source, expected_rate=sample_rate)


def load_noise(spec: MixtureSpec, length: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Noise long enough to crop ``length`` samples at a seed-determined offset."""
    if spec.noise_kind == 'file':
        return read_wav(spec.noise_path, expected_rate=sample_rate)
    return generate_noise(spec.noise_kind, length + sample_rate // 2, spec.seed, sample_rate)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

def snr_gain(clean: Waveform, noise_segment: Waveform, snr_db: float) -> float:
    """Noise gain ``g`` such that ``clean + g * noise_segment`` has the requested SNR."""
    p_clean, p_noise = clean.power, noise_segment.power
    if p_clean <= 0:
        raise ValueError("clean signal has zero power")
    if p_noise <= 0:
        raise ValueError("noise segment has zero power")
    if np.isposinf(snr_db):
        return 0.0
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, seed: int,
               return_details: bool = False):
    """Mix ``clean`` with a crop of ``noise`` at ``snr_db`` (full-utterance SNR).

    The crop offset is drawn from ``seed``. The mixture is rescaled only when a sample
    would exceed 1 in magnitude; the applied factor is reported in :class:`MixDetails`.
    ``snr_db = +inf`` yields the clean signal.
    """
    if not isinstance(clean, Waveform) or not isinstance(noise, Waveform):
        raise TypeError("clean and noise must be Waveform instances")
    if np.isnan(snr_db) or np.isneginf(snr_db):
        raise ValueError("snr_db must be a number or +inf")
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    if len(noise) < len(clean):
        raise ValueError(f"noise shorter than clean ({len(noise)} < {len(clean)})")
    if clean.power <= 0:
        raise ValueError("clean signal has zero power")
    if noise.power <= 0:
        raise ValueError("noise has zero power")

    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, len(noise) - len(clean) + 1))
    segment = Waveform(noise.samples[offset:offset + len(clean)], noise.sample_rate)
    gain = snr_gain(clean, segment, snr_db)
    mixed = clean.samples + gain * segment.samples
    peak = float(np.max(np.abs(mixed)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    out = Waveform(mixed * scale, clean.sample_rate)
    if return_details:
        return out, MixDetails(gain=gain, offset=offset, peak_scale=scale)
    return out


def build_mixture(spec: MixtureSpec, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Tuple[Waveform, Waveform]:
    """(clean, noisy) waveforms for one manifest row.

    When the mixture had to be rescaled to avoid clipping, the clean reference gets the same
    factor so the pair stays consistent.
    """
    clean = load_clean(spec.clean_path, sample_rate)
    noise = load_noise(spec, len(clean), sample_rate)
    noisy, details = mix_at_snr(clean, noise, spec.snr_db, spec.seed, return_details=True)
    if details.peak_scale != 1.0:
        clean = Waveform(clean.samples * details.peak_scale, clean.sample_rate)
    return clean, noisy


# ---------------------------------------------------------------------------
# Normalization statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ValueError("mean/std must be matching 1-D vectors")
        if np.any(std < STD_FLOOR):
            raise ValueError(f"std entries must be >= {STD_FLOOR}")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'std', std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_bytes(self) -> bytes:
        return (_NRM_MAGIC + struct.pack('<I', self.dim)
                + self.mean.astype('<f8').tobytes() + self.std.astype('<f8').tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> Tuple['NormStats', int]:
        """Parse one NRM1 record starting at ``offset``; returns (stats, next offset)."""
        if blob[offset:offset + 4] != _NRM_MAGIC:
            raise ValueError("not a NormStats record (bad magic)")
        (dim,) = struct.unpack_from('<I', blob, offset + 4)
        start = offset + 8
        mean = np.frombuffer(blob, dtype='<f8', count=dim, offset=start)
        std = np.frombuffer(blob, dtype='<f8', count=dim, offset=start + 8 * dim)
        return cls(mean.astype(np.float64), std.astype(np.float64)), start + 16 * dim

    def save(self, path: str) -> None:
        with open(path, 'wb') as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> 'NormStats':
        if not os.path.isfile(path):
            raise FileNotFoundError(f"NormStats file not found: {path}")
        with open(path, 'rb') as fh:
            return cls.from_bytes(fh.read())[0]


def compute_norm_stats(frames: np.ndarray) -> NormStats:
    """Per-dimension mean and population std of ``frames`` (n x d), std floored at 1e-6."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        raise ValueError("cannot compute statistics of an empty frame set")
    if frames.ndim != 2:
        raise ValueError(f"frames must be an n x d matrix, got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise ValueError("need at least 2 frames to compute statistics")
    return NormStats(frames.mean(axis=0), np.maximum(frames.std(axis=0), STD_FLOOR))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainingPairs:
    """Frame-aligned (input, target) rows; ``inputs`` stacks ``2 * context + 1`` frames."""
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


def frame_features(w: Waveform, cfg: StftConfig, kind: str, eps: float = LOG_FLOOR) -> np.ndarray:
    """Per-frame feature matrix: stacked RI (T x 2L) or LPS (T x L)."""
    if kind not in TARGET_KINDS:
        raise ValueError(f"feature kind must be one of {TARGET_KINDS}, got '{kind}'")
    stacked = stft(w, cfg).stacked()
    return stacked if kind == 'ri' else lps_from_ri(stacked, eps)


def stack_context(features: np.ndarray, context: int) -> np.ndarray:
    """Concatenate frames ``t-context .. t+context`` per row, zero-padded at the edges."""
    if context < 0:
        raise ValueError("context must be >= 0")
    if context == 0:
        return features
    n_frames = features.shape[0]
    padded = np.pad(features, ((context, context), (0, 0)))
    return np.hstack([padded[i:i + n_frames] for i in range(2 * context + 1)])


def make_training_pairs(noisy: Waveform, clean: Waveform, cfg: StftConfig,
                        target_kind: str = 'ri', context: int = 0) -> TrainingPairs:
    """Noisy-feature inputs (with optional context) and single-frame clean targets."""
    if len(noisy) != len(clean):
        raise ValueError(f"length mismatch: noisy {len(noisy)} vs clean {len(clean)}")
    inputs = stack_context(frame_features(noisy, cfg, target_kind), context)
    targets = frame_features(clean, cfg, target_kind)
    return TrainingPairs(inputs, targets)


# ---------------------------------------------------------------------------
# Manifests and the feature store
# ---------------------------------------------------------------------------

def read_manifest(path: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    df = pd.read_csv(path, dtype={'utterance_id': str, 'clean_path': str, 'noise_kind': str,
                                  'split': str})
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"manifest {path} is missing columns {missing}")
    if df.empty:
        raise ValueError(f"no utterances in manifest {path}")
    if 'noise_path' not in df.columns:
        df['noise_path'] = None
    return df


def manifest_specs(df: pd.DataFrame, split: Optional[str] = None,
                   base_dir: str = '') -> List[MixtureSpec]:
    """Manifest rows as :class:`MixtureSpec`; relative WAV paths resolve against ``base_dir``."""
    rows = df if split is None else df[df['split'] == split]

    def _resolve(p):
        if p is None or (isinstance(p, float) and np.isnan(p)) or p == '':
            return None
        if str(p).startswith(SYNTH_PREFIX) or os.path.isabs(str(p)):
            return str(p)
        return os.path.join(base_dir, str(p))

    return [
        MixtureSpec(
            clean_id=str(r.utterance_id),
            noise_kind=str(r.noise_kind),
            snr_db=float(r.snr_db),
            seed=int(r.seed),
            clean_path=_resolve(r.clean_path),
            split=str(r.split),
            noise_path=_resolve(r.noise_path),
        )
        for r in rows.itertuples(index=False)
    ]


def check_sources(specs: Iterable[MixtureSpec]) -> None:
    """Raise FileNotFoundError listing every referenced WAV that does not exist."""
    missing = []
    for s in specs:
        for p in (s.clean_path, s.noise_path):
            if p and not p.startswith(SYNTH_PREFIX) and not os.path.isfile(p):
                missing.append(p)
    if missing:
        raise FileNotFoundError("missing WAV files: " + ", ".join(sorted(set(missing))))


def extract_features(specs: Sequence[MixtureSpec], cfg: StftConfig, target_kind: str,
                     context: int = 0, sample_rate: int = DEFAULT_SAMPLE_RATE,
                     workers: int = 4) -> Tuple[TrainingPairs, pd.DataFrame]:
    """Training pairs for every spec, concatenated in manifest order.

    Utterances are processed in a thread pool; ``map`` keeps results in input order.
    """
    def _one(spec: MixtureSpec) -> TrainingPairs:
        clean, noisy = build_mixture(spec, sample_rate)
        return make_training_pairs(noisy, clean, cfg, target_kind, context)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        pairs = list(ex.map(_one, specs))
    index = pd.DataFrame({
        'utterance_id': [s.clean_id for s in specs],
        'frames': [len(p) for p in pairs],
    })
    return TrainingPairs(np.vstack([p.inputs for p in pairs]),
                         np.vstack([p.targets for p in pairs])), index


def save_feature_store(store_dir: str, split: str, pairs: TrainingPairs, index: pd.DataFrame) -> None:
    os.makedirs(store_dir, exist_ok=True)
    np.save(os.path.join(store_dir, f'{split}_inputs.npy'), pairs.inputs)
    np.save(os.path.join(store_dir, f'{split}_targets.npy'), pairs.targets)
    index.to_csv(os.path.join(store_dir, f'{split}_index.csv'), index=False)


def load_feature_store(store_dir: str, split: str) -> TrainingPairs:
    path = os.path.join(store_dir, f'{split}_inputs.npy')
    if not os.path.isfile(path):
        raise FileNotFoundError(f"prepared features not found: {path} (run 'prepare' first)")
    return TrainingPairs(np.load(path), np.load(os.path.join(store_dir, f'{split}_targets.npy')))


def write_default_manifest(path: str, n_train: int = 16, n_test: int = 4, seed: int = 0,
                           clean_sources: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Mismatched-condition manifest.

    Train utterances cycle through white/babble_like noise at -15..10 dB; every test
    utterance is mixed with engine_like noise at each of -12, -6, 0, 6, 12 dB.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    rng = np.random.default_rng(seed)
    if clean_sources is None:
        clean_sources = [f'{SYNTH_PREFIX}{int(s)}'
                         for s in rng.choice(10 ** 6, size=n_train + n_test, replace=False)]
    if len(clean_sources) < n_train + n_test:
        raise ValueError(f"need {n_train + n_test} clean sources, got {len(clean_sources)}")

    rows = []
    conditions = [(k, s) for k in TRAIN_NOISES for s in TRAIN_SNRS]
    for i in range(n_train):
        kind, snr = conditions[i % len(conditions)]
        rows.append((f'train{i:03d}', clean_sources[i], kind, snr, int(rng.integers(2 ** 31)), 'train'))
    for j in range(n_test):
        src = clean_sources[n_train + j]
        for kind in TEST_NOISES:
            for snr in TEST_SNRS:
                rows.append((f'test{j:03d}_{kind}_{snr:+g}', src, kind, snr,
                             int(rng.integers(2 ** 31)), 'test'))
    df = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False)
    return df
