"""Experiment commands. Each ``cmd_*`` reads an :class:`ExperimentConfig` and writes under ``out_dir``:

==============  ==========================================================================
make-manifest   ``manifest.csv`` (mismatched train/test noise conditions, synthetic speech)
prepare         ``features/{split}_{inputs,targets}.npy``, ``features/{split}_index.csv``,
                ``features/input_stats.nrm``, ``features/target_stats.nrm``
train           ``model.riml``, ``checkpoints/epoch_NNN.riml``, ``loss_log.csv``
enhance         the enhanced WAV
evaluate        ``evaluation/report.csv``, ``evaluation/metrics_summary.md``
beta-sweep      ``beta_sweep/beta_<b>/...`` per run and ``beta_sweep.csv``
phase-study     ``phase_study.csv`` and ``masks/*.pgm``
==============  ==========================================================================
"""
import dataclasses
import glob
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from rimml.config import ConfigError, ExperimentConfig
from rimml.dataset_utils import (
    SYNTH_PREFIX,
    MixtureSpec,
    NormStats,
    build_mixture,
    check_sources,
    compute_norm_stats,
    extract_features,
    generate_noise,
    load_clean,
    load_feature_store,
    manifest_specs,
    read_manifest,
    save_feature_store,
    write_default_manifest,
)
from rimml.dsp_utils import StftConfig, Waveform, read_wav, write_wav
from rimml.losses import MMLConfig
from rimml.metrics import compute_report, overall_means, score_in_support
from rimml.network import Checkpoint, load_checkpoint
from rimml.phase_analysis import DEFAULT_THRESHOLD, noisy_phase_ssnr_table
from rimml.training import TrainingResult, enhance_waveform, train_model

Enhancer = Callable[[Waveform], Waveform]

NOISY_MODEL = 'noisy'
PHASE_STUDY_UTTERANCES = 4


def _require_manifest(cfg: ExperimentConfig) -> pd.DataFrame:
    if not cfg.manifest:
        raise ConfigError("no manifest configured (set [data] manifest)")
    return read_manifest(cfg.manifest)


def _specs(cfg: ExperimentConfig, df: pd.DataFrame, split: str) -> List[MixtureSpec]:
    return manifest_specs(df, split, base_dir=os.path.dirname(os.path.abspath(cfg.manifest)))


def cmd_make_manifest(cfg: ExperimentConfig, path: Optional[str] = None, n_train: int = 16,
                      n_test: int = 4, verbose: bool = True) -> pd.DataFrame:
    """Write the default synthetic manifest, seeded by the ``data`` sub-seed."""
    path = path or os.path.join(cfg.out_dir, 'manifest.csv')
    df = write_default_manifest(path, n_train, n_test, seed=cfg.sub_seed('data'))
    if verbose:
        print(f"📝 Wrote {len(df)} manifest rows to {path}", flush=True)
    return df


# ---------------------------------------------------------------------------
# prepare / train / enhance
# ---------------------------------------------------------------------------

def cmd_prepare(cfg: ExperimentConfig, store_dir: Optional[str] = None,
                verbose: bool = True) -> Dict[str, NormStats]:
    """Extract features for every split and compute normalization stats on the train split.

    Returns
    -------
    dict
        ``{'input': NormStats, 'target': NormStats}`` as written to the feature store.
    """
    store_dir = store_dir or cfg.store_dir
    df = _require_manifest(cfg)
    train_specs = _specs(cfg, df, 'train')
    test_specs = _specs(cfg, df, 'test')
    if not train_specs:
        raise ValueError(f"no utterances in the train split of {cfg.manifest}")
    check_sources(train_specs + test_specs)

    kind, context = cfg.model.feature_kind, cfg.model.context
    if verbose:
        print(f"🔍 Extracting {kind} features: {len(train_specs)} train / {len(test_specs)} test "
              f"utterances", flush=True)
    train, train_index = extract_features(train_specs, cfg.stft, kind, context,
                                          cfg.sample_rate, cfg.workers)
    save_feature_store(store_dir, 'train', train, train_index)
    if test_specs:
        test, test_index = extract_features(test_specs, cfg.stft, kind, context,
                                            cfg.sample_rate, cfg.workers)
        save_feature_store(store_dir, 'test', test, test_index)

    stats = {'input': compute_norm_stats(train.inputs), 'target': compute_norm_stats(train.targets)}
    stats['input'].save(os.path.join(store_dir, 'input_stats.nrm'))
    stats['target'].save(os.path.join(store_dir, 'target_stats.nrm'))
    if verbose:
        print(f"✅ {len(train)} train frames -> {store_dir}", flush=True)
    return stats


def cmd_train(cfg: ExperimentConfig, store_dir: Optional[str] = None,
              verbose: bool = True) -> TrainingResult:
    store_dir = store_dir or cfg.store_dir
    pairs = load_feature_store(store_dir, 'train')
    input_stats = NormStats.load(os.path.join(store_dir, 'input_stats.nrm'))
    target_stats = NormStats.load(os.path.join(store_dir, 'target_stats.nrm'))
    return train_model(
        pairs, input_stats, target_stats, cfg.model, cfg.mml, cfg.optimizer, cfg.stft,
        out_dir=cfg.out_dir,
        init_seed=cfg.sub_seed('init'),
        shuffle_seed=cfg.sub_seed('shuffle'),
        sample_rate=cfg.sample_rate,
        verbose=verbose,
    )


def cmd_enhance(checkpoint_path: str, noisy_path: str, output_path: str) -> Waveform:
    """Enhance one WAV file with a trained checkpoint."""
    ckpt = load_checkpoint(checkpoint_path)
    enhanced = enhance_waveform(ckpt, read_wav(noisy_path, expected_rate=None))
    write_wav(output_path, enhanced)
    return enhanced


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def evaluate_specs(
    specs: Sequence[MixtureSpec],
    stft_cfg: StftConfig,
    enhancer: Optional[Enhancer] = None,
    model_name: str = 'enhanced',
    sample_rate: int = 16000,
    workers: int = 4,
) -> List[Dict[str, object]]:
    """Report rows for the noisy input and, when given, the enhancer's output.

    Both are scored against the clean reference over the same synthesis region. Utterances
    are processed in a thread pool; rows come back in manifest order.
    """
    def _one(spec: MixtureSpec) -> List[Dict[str, object]]:
        clean, noisy = build_mixture(spec, sample_rate)
        outputs = [(NOISY_MODEL, noisy)]
        if enhancer is not None:
            outputs.append((model_name, enhancer(noisy)))
        rows = []
        for name, test in outputs:
            scored = score_in_support(spec.clean_id, clean, test, stft_cfg)
            rows.append({'utterance_id': spec.clean_id, 'snr_db': spec.snr_db,
                         'noise_kind': spec.noise_kind, 'model': name,
                         'ssnr_db': scored.ssnr_db, 'lsd_db': scored.lsd_db})
        return rows

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        per_spec = list(ex.map(_one, specs))
    return [row for rows in per_spec for row in rows]


def cmd_evaluate(cfg: ExperimentConfig, checkpoint_path: Optional[str] = None,
                 output_dir: Optional[str] = None, verbose: bool = True) -> pd.DataFrame:
    """Score the test split: noisy baseline rows, model rows, per-SNR and overall averages."""
    df = _require_manifest(cfg)
    specs = _specs(cfg, df, 'test')
    if not specs:
        raise ValueError(f"no utterances in the test split of {cfg.manifest}")
    check_sources(specs)
    ckpt: Checkpoint = load_checkpoint(checkpoint_path or os.path.join(cfg.out_dir, 'model.riml'))
    if ckpt.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate mismatch: checkpoint {ckpt.sample_rate} Hz, "
                         f"config {cfg.sample_rate} Hz")
    if verbose:
        print(f"📊 Evaluating {ckpt.model.arch} on {len(specs)} test mixtures", flush=True)

    rows = evaluate_specs(specs, ckpt.stft, lambda w: enhance_waveform(ckpt, w),
                          ckpt.model.arch, cfg.sample_rate, cfg.workers)
    output_dir = output_dir or os.path.join(cfg.out_dir, 'evaluation')
    report = compute_report(rows, output_dir, title=f'{ckpt.model.arch} vs noisy input')
    if verbose:
        ssnr, lsd = overall_means(report, ckpt.model.arch)
        base_ssnr, base_lsd = overall_means(report, NOISY_MODEL)
        print(f"  SSNR {base_ssnr:.2f} -> {ssnr:.2f} dB, LSD {base_lsd:.2f} -> {lsd:.2f} dB", flush=True)
        print(f"✅ Wrote {os.path.join(output_dir, 'report.csv')}", flush=True)
    return report


# ---------------------------------------------------------------------------
# beta sweep
# ---------------------------------------------------------------------------

def check_beta_grid(grid: Sequence[float]) -> List[float]:
    values = [float(b) for b in grid]
    if not values:
        raise ValueError("beta grid is empty")
    if any(b < 0 or not np.isfinite(b) for b in values):
        raise ValueError("beta grid values must be finite and non-negative")
    if any(b2 <= b1 for b1, b2 in zip(values, values[1:])):
        raise ValueError("grid not strictly increasing")
    return values


def cmd_beta_sweep(cfg: ExperimentConfig, grid: Optional[Sequence[float]] = None,
                   verbose: bool = True) -> pd.DataFrame:
    """Train and evaluate one RI model per beta (alpha fixed at 1) on shared features and seeds."""
    betas = check_beta_grid(cfg.beta_grid if grid is None else grid)
    if cfg.model.feature_kind != 'ri':
        raise ValueError("the beta sweep needs an RI architecture (ri_cnn or ri_dnn)")

    store_dir = cfg.store_dir
    if not os.path.isfile(os.path.join(store_dir, 'train_inputs.npy')):
        cmd_prepare(cfg, store_dir, verbose=verbose)

    rows = []
    for beta in betas:
        run_cfg = dataclasses.replace(
            cfg,
            mml=MMLConfig(alpha=1.0, beta=beta, gamma=0.0, eps=cfg.mml.eps),
            out_dir=os.path.join(cfg.out_dir, 'beta_sweep', f'beta_{beta:g}'),
        )
        if verbose:
            print(f"🔁 beta = {beta:g}", flush=True)
        result = cmd_train(run_cfg, store_dir, verbose=verbose)
        report = cmd_evaluate(run_cfg, result.checkpoint_path, verbose=verbose)
        ssnr, lsd = overall_means(report, cfg.model.arch)
        rows.append({'beta': beta, 'ssnr_db': ssnr, 'lsd_db': lsd})

    table = pd.DataFrame(rows, columns=['beta', 'ssnr_db', 'lsd_db']).sort_values('beta')
    os.makedirs(cfg.out_dir, exist_ok=True)
    table.to_csv(os.path.join(cfg.out_dir, 'beta_sweep.csv'), index=False, float_format='%.9g')
    return table.reset_index(drop=True)


# ---------------------------------------------------------------------------
# phase study
# ---------------------------------------------------------------------------

def _phase_study_sources(clean_dir: Optional[str], seed: int) -> List[str]:
    if clean_dir:
        if not os.path.isdir(clean_dir):
            raise FileNotFoundError(f"clean directory not found: {clean_dir}")
        sources = sorted(glob.glob(os.path.join(clean_dir, '*.wav')))
        if not sources:
            raise ValueError(f"no .wav files in {clean_dir}")
        return sources
    rng = np.random.default_rng(seed)
    return [f'{SYNTH_PREFIX}{int(s)}' for s in rng.choice(10 ** 6, PHASE_STUDY_UTTERANCES, replace=False)]


def _source_id(source: str) -> str:
    if source.startswith(SYNTH_PREFIX):
        return 'synth' + source[len(SYNTH_PREFIX):]
    return os.path.splitext(os.path.basename(source))[0]


def cmd_phase_study(
    cfg: ExperimentConfig,
    snr_levels: Sequence[float],
    noise_kind: str = 'white',
    clean_dir: Optional[str] = None,
    noise_path: Optional[str] = None,
    threshold: float = DEFAULT_THRESHOLD,
    verbose: bool = True,
) -> pd.DataFrame:
    """Clean-magnitude/noisy-phase SSNR and phase-agreement fraction per SNR, averaged over utterances.

    Parameters
    ----------
    snr_levels : sequence of float
        Input SNRs (dB), reported in the given order.
    noise_kind : str
        A generated noise kind, or ``file`` together with ``noise_path``.
    clean_dir : str, optional
        Directory of clean WAVs; without it a small synthetic set seeded by the ``data``
        sub-seed is used.
    """
    levels = [float(s) for s in snr_levels]
    if not levels:
        raise ValueError("snr_levels must be non-empty")
    if noise_kind == 'file' and not noise_path:
        raise ValueError("noise_kind 'file' requires noise_path")

    seed = cfg.sub_seed('data')
    sources = _phase_study_sources(clean_dir, seed)
    noise_file = read_wav(noise_path, cfg.sample_rate) if noise_kind == 'file' else None
    mask_dir = os.path.join(cfg.out_dir, 'masks')
    rng = np.random.default_rng(seed)
    if verbose:
        print(f"🎛️ Phase study: {len(sources)} utterances, {noise_kind} noise, "
              f"{len(levels)} SNR levels", flush=True)

    tables = []
    for source in sources:
        clean = load_clean(source, cfg.sample_rate)
        if noise_file is not None:
            noise = noise_file
            if len(noise) < len(clean):
                raise ValueError(f"noise file {noise_path} is shorter than {source}")
        else:
            noise = generate_noise(noise_kind, len(clean) + cfg.sample_rate // 2,
                                   int(rng.integers(2 ** 31)), cfg.sample_rate)
        tables.append(noisy_phase_ssnr_table(
            clean, noise, levels, cfg.stft, seed=int(rng.integers(2 ** 31)),
            threshold=threshold, mask_dir=mask_dir, mask_prefix=_source_id(source)))

    table = (pd.concat(tables).groupby('snr_db', sort=False)[['ssnr_db', 'mask_fraction']]
             .mean().reset_index())
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, 'phase_study.csv')
    table.to_csv(out_path, index=False, float_format='%.9g')
    if verbose:
        print(f"✅ Wrote {out_path}", flush=True)
    return table
