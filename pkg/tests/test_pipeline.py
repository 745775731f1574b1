"""End-to-end tests for rimml.pipeline on a tiny synthetic experiment."""
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from rimml.config import ConfigError, ExperimentConfig
from rimml.dataset_utils import (
    TEST_SNRS,
    build_mixture,
    manifest_specs,
    read_manifest,
    write_default_manifest,
)
from rimml.dsp_utils import StftConfig, read_wav, write_wav
from rimml.metrics import AVG_ID, compute_report
from rimml.network import ModelConfig
from rimml.pipeline import (
    NOISY_MODEL,
    check_beta_grid,
    cmd_beta_sweep,
    cmd_enhance,
    cmd_evaluate,
    cmd_make_manifest,
    cmd_phase_study,
    cmd_prepare,
    cmd_train,
    evaluate_specs,
)
from rimml.training import TrainingConfig


def _config(tmp_path, arch='ri_dnn', **kwargs):
    manifest = tmp_path / 'manifest.csv'
    if not manifest.exists():
        write_default_manifest(str(manifest), n_train=2, n_test=1, seed=4)
    return ExperimentConfig(
        stft=StftConfig(fft_size=64, hop=32),
        model=ModelConfig(arch=arch, dnn_hidden_layers=1, dnn_width=16),
        optimizer=TrainingConfig(epochs=1, batch_size=64),
        manifest=str(manifest),
        workers=2,
        out_dir=str(tmp_path / 'run'),
        **kwargs,
    )


def test_make_manifest_uses_data_seed(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path), seed=5)
    df = cmd_make_manifest(cfg, n_train=3, n_test=2, verbose=False)
    assert len(df) == 3 + 2 * len(TEST_SNRS)
    again = cmd_make_manifest(cfg, str(tmp_path / 'again.csv'), 3, 2, verbose=False)
    pd.testing.assert_frame_equal(df, again)
    assert (tmp_path / 'manifest.csv').read_text() == (tmp_path / 'again.csv').read_text()


def test_prepare_is_reproducible(tmp_path):
    cfg = _config(tmp_path)
    stats = cmd_prepare(cfg, str(tmp_path / 'a'), verbose=False)
    cmd_prepare(cfg, str(tmp_path / 'b'), verbose=False)
    names = sorted(p.name for p in (tmp_path / 'a').iterdir())
    assert names == ['input_stats.nrm', 'target_stats.nrm', 'test_index.csv', 'test_inputs.npy',
                     'test_targets.npy', 'train_index.csv', 'train_inputs.npy', 'train_targets.npy']
    for name in names:
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes(), name
    assert stats['input'].dim == 2 * cfg.stft.bins


def test_prepare_requires_train_utterances(tmp_path):
    cfg = _config(tmp_path)
    df = read_manifest(cfg.manifest)
    df[df['split'] == 'test'].to_csv(cfg.manifest, index=False)
    with pytest.raises(ValueError, match='no utterances'):
        cmd_prepare(cfg, verbose=False)
    with pytest.raises(ConfigError):
        cmd_prepare(ExperimentConfig(out_dir=str(tmp_path)), verbose=False)


def test_train_evaluate_enhance(tmp_path):
    cfg = _config(tmp_path)
    cmd_prepare(cfg, verbose=False)
    result = cmd_train(cfg, verbose=False)
    assert Path(result.checkpoint_path) == tmp_path / 'run' / 'model.riml'

    report = cmd_evaluate(cfg, verbose=False)
    assert (tmp_path / 'run' / 'evaluation' / 'report.csv').exists()
    per_utt = report[report['utterance_id'] != AVG_ID]
    assert sorted(per_utt['model'].unique()) == [NOISY_MODEL, 'ri_dnn']
    assert len(per_utt) == 2 * len(TEST_SNRS)
    assert np.isfinite(per_utt['ssnr_db']).all() and np.isfinite(per_utt['lsd_db']).all()

    noisy_path = tmp_path / 'noisy.wav'
    spec = manifest_specs(read_manifest(cfg.manifest), 'test', str(tmp_path))[0]
    _, noisy = build_mixture(spec)
    write_wav(str(noisy_path), noisy)
    out = cmd_enhance(result.checkpoint_path, str(noisy_path), str(tmp_path / 'enhanced.wav'))
    assert len(read_wav(str(tmp_path / 'enhanced.wav'))) == len(out)


def test_identity_enhancer_reproduces_noisy_rows(tmp_path):
    cfg = _config(tmp_path)
    specs = manifest_specs(read_manifest(cfg.manifest), 'test', str(tmp_path))
    rows = pd.DataFrame(evaluate_specs(specs, cfg.stft, lambda w: w, 'identity', workers=3))
    noisy = rows[rows['model'] == NOISY_MODEL].reset_index(drop=True)
    ident = rows[rows['model'] == 'identity'].reset_index(drop=True)
    np.testing.assert_array_equal(noisy['ssnr_db'], ident['ssnr_db'])
    np.testing.assert_array_equal(noisy['lsd_db'], ident['lsd_db'])
    assert list(noisy['snr_db']) == list(TEST_SNRS)
    # noisy SSNR rises with the input SNR
    assert noisy['ssnr_db'].is_monotonic_increasing


def test_clean_reference_scores_at_the_ceiling(tmp_path):
    cfg = _config(tmp_path)
    specs = manifest_specs(read_manifest(cfg.manifest), 'test', str(tmp_path))
    lookup = {}
    for spec in specs:
        clean, noisy = build_mixture(spec)
        lookup[noisy.samples.tobytes()] = clean
    rows = evaluate_specs(specs, cfg.stft, lambda w: lookup[w.samples.tobytes()], 'oracle', workers=1)
    report = compute_report(rows)
    oracle = report[report['model'] == 'oracle']
    assert len(oracle) == len(specs) + len(TEST_SNRS) + 1               # utterances, per-SNR, overall
    np.testing.assert_allclose(oracle['ssnr_db'], 35.0)
    np.testing.assert_allclose(oracle['lsd_db'], 0.0, atol=1e-9)
    assert (oracle['utterance_id'] == AVG_ID).sum() == len(TEST_SNRS) + 1


def test_beta_grid_checks():
    assert check_beta_grid([0, 0.1]) == [0.0, 0.1]
    with pytest.raises(ValueError, match='empty'):
        check_beta_grid([])
    with pytest.raises(ValueError, match='strictly increasing'):
        check_beta_grid([0.1, 0.1])
    with pytest.raises(ValueError):
        check_beta_grid([-0.1, 0.0])
    with pytest.raises(ValueError):
        check_beta_grid([0.0, float('inf')])


def test_beta_sweep(tmp_path):
    cfg = _config(tmp_path)
    table = cmd_beta_sweep(cfg, [0.0, 0.1], verbose=False)
    assert list(table['beta']) == [0.0, 0.1]
    assert np.isfinite(table[['ssnr_db', 'lsd_db']].to_numpy()).all()
    saved = pd.read_csv(tmp_path / 'run' / 'beta_sweep.csv')
    assert list(saved.columns) == ['beta', 'ssnr_db', 'lsd_db']
    for name in ('beta_0', 'beta_0.1'):
        assert (tmp_path / 'run' / 'beta_sweep' / name / 'evaluation' / 'report.csv').exists()
    log = pd.read_csv(tmp_path / 'run' / 'beta_sweep' / 'beta_0.1' / 'loss_log.csv')
    assert (log['beta'] == 0.1).all() and (log['alpha'] == 1.0).all()

    with pytest.raises(ValueError, match='RI architecture'):
        cmd_beta_sweep(_config(tmp_path, arch='lps_dnn_baseline'), [0.0], verbose=False)


def test_phase_study(tmp_path):
    cfg = ExperimentConfig(stft=StftConfig(fft_size=64, hop=32), out_dir=str(tmp_path))
    table = cmd_phase_study(cfg, [6.0, -6.0], verbose=False)
    assert list(table.columns) == ['snr_db', 'ssnr_db', 'mask_fraction']
    assert list(table['snr_db']) == [6.0, -6.0]
    assert table['ssnr_db'].iloc[0] > table['ssnr_db'].iloc[1]
    assert table['mask_fraction'].iloc[0] > table['mask_fraction'].iloc[1]
    assert len(list((tmp_path / 'masks').glob('*.pgm'))) == 4 * 2
    pd.testing.assert_frame_equal(pd.read_csv(tmp_path / 'phase_study.csv'), table,
                                  check_dtype=False, check_exact=False)

    with pytest.raises(ValueError):
        cmd_phase_study(cfg, [], verbose=False)
    with pytest.raises(ValueError, match='noise_path'):
        cmd_phase_study(cfg, [0.0], noise_kind='file', verbose=False)
    with pytest.raises(FileNotFoundError):
        cmd_phase_study(cfg, [0.0], clean_dir=str(tmp_path / 'nope'), verbose=False)
