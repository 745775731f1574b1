"""Tests for rimml.config: INI parsing, precedence and sub-seeds."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from rimml.config import (
    DEFAULT_BETA_GRID,
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config,
    render_config,
    sub_seed,
)

SAMPLE = """
[stft]
fft_size = 256
hop = 128

[model]
arch = ri_dnn
dnn_hidden_layers = 3
use_batch_norm = no

[mml]
alpha = 1
beta = 0.1
beta_grid = 0, 0.1, 0.5

[optimizer]
epochs = 2

[data]
manifest = manifest.csv
workers = 2

[run]
seed = 7
out_dir = runs/sample
"""


def _write(tmp_path, text=SAMPLE, manifest=True):
    if manifest:
        (tmp_path / 'manifest.csv').write_text('utterance_id\n')
    path = tmp_path / 'config.ini'
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = load_config(env={})
    assert cfg == ExperimentConfig()
    assert cfg.beta_grid == DEFAULT_BETA_GRID
    assert (cfg.stft.fft_size, cfg.stft.hop, cfg.mml.alpha, cfg.mml.beta) == (512, 256, 1.0, 0.0)
    assert cfg.store_dir.endswith('features')


def test_file_values(tmp_path):
    cfg = load_config(_write(tmp_path), env={})
    assert cfg.stft.bins == 129
    assert cfg.model.arch == 'ri_dnn' and cfg.model.dnn_hidden_layers == 3
    assert cfg.model.use_batch_norm is False
    assert cfg.mml.beta == 0.1 and cfg.beta_grid == (0.0, 0.1, 0.5)
    assert cfg.optimizer.epochs == 2 and cfg.optimizer.batch_size == 32
    assert cfg.manifest == str(tmp_path / 'manifest.csv')
    assert (cfg.seed, cfg.out_dir, cfg.workers) == (7, 'runs/sample', 2)


def test_precedence(tmp_path):
    path = _write(tmp_path)
    env = {'RIMML_SEED': '11', 'RIMML_OUT': 'runs/env'}
    assert (load_config(path, env=env).seed, load_config(path, env=env).out_dir) == (11, 'runs/env')
    cfg = load_config(path, seed=3, out_dir='runs/cli', env=env)
    assert (cfg.seed, cfg.out_dir) == (3, 'runs/cli')
    assert load_config(env={'RIMML_CONFIG': path}).seed == 7


def test_render_round_trip(tmp_path):
    cfg = load_config(_write(tmp_path), env={})
    assert parse_config(render_config(cfg)) == cfg
    assert parse_config(render_config(ExperimentConfig())) == ExperimentConfig()


@pytest.mark.parametrize('text', [
    "[stft]\nfft_size = big\n",
    "[stft]\nhop = 300\nfft_size = 256\n",
    "[model]\nfilter_len = 4\n",
    "[mml]\nalpha = 0\nbeta = 0\n",
    "[mml]\ndelta = 1\n",
    "[extras]\nx = 1\n",
    "not an ini file",
])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        load_config(str(tmp_path / 'missing.ini'), env={})
    with pytest.raises(ConfigError, match='manifest'):
        load_config(_write(tmp_path, manifest=False), env={})
    with pytest.raises(ConfigError):
        load_config(env={'RIMML_SEED': 'abc'})
    with pytest.raises(ConfigError):
        load_config(seed=-1, env={})
    assert issubclass(ConfigError, ValueError)


def test_sub_seeds_are_stable_and_distinct():
    seeds = {name: sub_seed(0, name) for name in ('data', 'init', 'shuffle')}
    assert len(set(seeds.values())) == 3
    assert sub_seed(0, 'init') == seeds['init']
    assert sub_seed(1, 'init') != seeds['init']
    assert ExperimentConfig(seed=0).sub_seed('data') == seeds['data']
    with pytest.raises(ValueError):
        sub_seed(0, 'noise')
