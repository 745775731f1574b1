"""Tests for rimml.dsp_utils: framing, synthesis matrices, polar/RI conversion and file I/O."""
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from rimml.dsp_utils import (
    LOG_FLOOR,
    RISpectrogram,
    StftConfig,
    Waveform,
    build_synthesis_matrices,
    combine_magnitude_phase,
    dump_spectrogram_csv,
    frame_count,
    frame_via_F,
    istft,
    lps_from_ri,
    read_wav,
    stft,
    synthesis_support,
    write_wav,
)


def test_default_framing():
    cfg = StftConfig()
    assert (cfg.fft_size, cfg.hop, cfg.bins) == (512, 256, 257)
    assert cfg.cola_gain == pytest.approx(1.0)
    assert frame_count(16000, cfg) == 61
    assert frame_count(511, cfg) == 0


@pytest.mark.parametrize('kwargs', [
    {'fft_size': 511},
    {'hop': 0},
    {'hop': 600},
    {'window': 'kaiser'},
    {'hop': 512},                  # Hann without overlap is not COLA
])
def test_invalid_stft_config(kwargs):
    with pytest.raises(ValueError):
        StftConfig(**kwargs)


def test_other_cola_windows_accepted():
    assert StftConfig(window='hamming').bins == 257
    assert StftConfig(fft_size=64, hop=64, window='rect').cola_gain == pytest.approx(1.0)


def test_stft_too_short():
    with pytest.raises(ValueError, match='insufficient samples'):
        stft(Waveform(np.zeros(100)), StftConfig())


def test_sine_peaks_at_its_bin():
    t = np.arange(16000) / 16000
    spec = stft(Waveform(np.sin(2 * np.pi * 1000.0 * t)), StftConfig())
    np.testing.assert_array_equal(np.argmax(spec.magnitude(), axis=1), 32)     # 1000 / 31.25 Hz


def test_rect_impulse_is_flat():
    x = np.zeros(64)
    x[0] = 1.0
    spec = stft(Waveform(x), StftConfig(fft_size=64, hop=64, window='rect'))
    np.testing.assert_allclose(spec.real, 1.0, atol=1e-12)
    np.testing.assert_allclose(spec.imag, 0.0, atol=1e-12)


def test_stft_is_linear():
    cfg = StftConfig()
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal(4000), rng.standard_normal(4000)
    mixed = stft(Waveform(2.5 * x - 0.75 * y), cfg).stacked()
    parts = 2.5 * stft(Waveform(x), cfg).stacked() - 0.75 * stft(Waveform(y), cfg).stacked()
    np.testing.assert_allclose(mixed, parts, atol=1e-9)
    assert not np.any(stft(Waveform(np.zeros(4000)), cfg).stacked())


def test_istft_single_frame_is_windowed_frame():
    cfg = StftConfig()
    x = np.random.default_rng(9).standard_normal(cfg.fft_size)
    out = istft(stft(Waveform(x), cfg), cfg)
    np.testing.assert_allclose(out.samples, x * cfg.window_array() / cfg.cola_gain, atol=1e-12)
    np.testing.assert_array_equal(istft(RISpectrogram(np.zeros((3, 257)), np.zeros((3, 257))), cfg).samples, 0.0)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))
    assert Waveform(np.array([1.0, -1.0])).power == pytest.approx(1.0)


def test_round_trip_interior():
    cfg = StftConfig()
    rng = np.random.default_rng(3)
    region = synthesis_support(16000, cfg)
    for _ in range(100):
        x = rng.standard_normal(16000)
        y = istft(stft(Waveform(x), cfg), cfg).samples
        assert len(y) == 512 + 60 * 256
        err = np.linalg.norm(y[region] - x[region]) / np.linalg.norm(x[region])
        assert err < 1e-9


def test_synthesis_support_bounds():
    assert synthesis_support(16000, StftConfig()) == slice(256, 15616)
    with pytest.raises(ValueError):
        synthesis_support(100, StftConfig())


def test_istft_rejects_bin_mismatch():
    ri = RISpectrogram(np.zeros((2, 5)), np.zeros((2, 5)))
    with pytest.raises(ValueError):
        istft(ri, StftConfig())


@pytest.mark.parametrize('n_bins', [3, 5, 257])
def test_F_reproduces_frames(n_bins):
    m = build_synthesis_matrices(n_bins)
    n = 2 * n_bins - 2
    rng = np.random.default_rng(n_bins)
    frames = rng.standard_normal((8, n))
    spectra = np.fft.rfft(frames, axis=1)
    stacked = np.hstack([spectra.real, spectra.imag])
    rebuilt = frame_via_F(stacked, m)
    assert np.linalg.norm(rebuilt - frames) / np.linalg.norm(frames) < 1e-9


@pytest.mark.parametrize('n_bins', [3, 5, 257])
def test_FtF_is_diagonal(n_bins):
    m = build_synthesis_matrices(n_bins)
    n = 2 * n_bins - 2
    gram = m.F.T @ m.F
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-9
    diag = np.diag(gram)
    expected_real = np.full(n_bins, 2.0 / n)
    expected_real[[0, -1]] = 1.0 / n
    np.testing.assert_allclose(diag[:n_bins], expected_real, atol=1e-12)
    # imaginary DC and Nyquist columns are identically zero
    assert abs(diag[n_bins]) < 1e-12 and abs(diag[-1]) < 1e-12
    np.testing.assert_allclose(diag[n_bins + 1:-1], 2.0 / n, atol=1e-12)


def test_matrix_shapes_and_readonly():
    m = build_synthesis_matrices(5)
    assert m.frame_length == 8
    assert m.U1.shape == (8, 5) and m.C.shape == (8, 8)
    assert m.F.shape == (8, 10) and m.P.shape == (5, 10)
    with pytest.raises(ValueError):
        m.F[0, 0] = 1.0
    with pytest.raises(ValueError):
        build_synthesis_matrices(1)
    with pytest.raises(TypeError):
        build_synthesis_matrices(2.5)


def test_lps_from_ri_floor():
    y = np.array([3.0, 0.0, 4.0, 0.0])          # L = 2: bin 0 = 3 + 4i, bin 1 = 0
    np.testing.assert_allclose(lps_from_ri(y), [np.log(25.0), np.log(LOG_FLOOR)])


def test_combine_magnitude_phase():
    mag = np.array([[2.0, 1.0, 3.0]])
    phase = np.array([[np.pi, np.pi / 2, 0.1]])
    ri = combine_magnitude_phase(mag, phase)
    np.testing.assert_allclose(ri.real, [[-2.0, 0.0, 3.0]], atol=1e-15)
    np.testing.assert_allclose(ri.imag, [[0.0, 1.0, 0.0]], atol=1e-15)
    with pytest.raises(ValueError):
        combine_magnitude_phase(-mag, phase)


def test_stacked_layout():
    ri = RISpectrogram(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
    np.testing.assert_array_equal(ri.stacked(), [[1.0, 2.0, 3.0, 4.0]])
    back = RISpectrogram.from_stacked(ri.stacked())
    np.testing.assert_array_equal(back.imag, ri.imag)
    np.testing.assert_array_equal(ri.power(), [[10.0, 20.0]])


def test_wav_io(tmp_path):
    x = 0.5 * np.sin(2 * np.pi * 440 * np.arange(1600) / 16000)
    path = str(tmp_path / 'tone.wav')
    write_wav(path, Waveform(x))
    back = read_wav(path)
    assert back.sample_rate == 16000 and len(back) == 1600
    assert np.max(np.abs(back.samples - x)) <= 1.0 / 32768
    with pytest.raises(ValueError, match='sample rate'):
        read_wav(path, expected_rate=8000)
    with pytest.raises(FileNotFoundError):
        read_wav(str(tmp_path / 'missing.wav'))


def test_dump_spectrogram_csv(tmp_path):
    ri = stft(Waveform(np.random.default_rng(0).standard_normal(1024)), StftConfig())
    path = tmp_path / 'spec.csv'
    dump_spectrogram_csv(str(path), ri)
    df = pd.read_csv(path)
    assert df.shape == (3, 514)
    assert list(df.columns[:2]) == ['r0', 'r1'] and df.columns[257] == 'i0'
