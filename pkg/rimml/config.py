"""Experiment configuration: INI files, environment overrides and named sub-seeds.

Sections and keys (every key optional; defaults are the dataclass defaults)::

    [stft]       fft_size, hop, window
    [model]      arch, conv_layers, filters_per_layer, filter_len, dense_layers, dense_width,
                 dnn_hidden_layers, dnn_width, use_batch_norm, context
    [mml]        alpha, beta, gamma, eps, beta_grid
    [optimizer]  epochs, batch_size, lr, beta1, beta2, eps_adam
    [data]       manifest, sample_rate, workers
    [run]        seed, out_dir

Precedence: defaults < config file < environment (``RIMML_SEED``, ``RIMML_OUT``) < CLI flags.
``RIMML_CONFIG`` names the config file when ``--config`` is not given.
"""
import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from rimml.dsp_utils import DEFAULT_SAMPLE_RATE, StftConfig
from rimml.losses import MMLConfig
from rimml.network import ModelConfig
from rimml.training import TrainingConfig

# Load environment variables from .env file
load_dotenv()

DEFAULT_BETA_GRID = (0.0, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0)
SUB_SEEDS = {'data': 0, 'init': 1, 'shuffle': 2}


class ConfigError(ValueError):
    """Malformed config file, environment value or command-line value."""


@dataclass(frozen=True)
class ExperimentConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mml: MMLConfig = field(default_factory=MMLConfig)
    optimizer: TrainingConfig = field(default_factory=TrainingConfig)
    beta_grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    manifest: str = ''
    sample_rate: int = DEFAULT_SAMPLE_RATE
    workers: int = 4
    seed: int = 0
    out_dir: str = 'runs/default'

    def sub_seed(self, name: str) -> int:
        return sub_seed(self.seed, name)

    @property
    def store_dir(self) -> str:
        return os.path.join(self.out_dir, 'features')


def sub_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for one named consumer (``data``, ``init``, ``shuffle``)."""
    if name not in SUB_SEEDS:
        raise ValueError(f"unknown sub-seed '{name}', expected one of {sorted(SUB_SEEDS)}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(SUB_SEEDS[name],))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(',', ' ').split())
        return raw.strip()
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid "
                          f"{type(default).__name__}") from None


def _build(cls, values: Dict[str, object], section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{section}] {err}") from None


_FLAT_SECTIONS = {
    'mml': ('beta_grid',),
    'data': ('manifest', 'sample_rate', 'workers'),
    'run': ('seed', 'out_dir'),
}


def parse_config(text: str, base_dir: str = '') -> ExperimentConfig:
    """ExperimentConfig from INI text; relative manifest paths resolve against ``base_dir``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    known = ('stft', 'model', 'mml', 'optimizer', 'data', 'run')
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")

    base = ExperimentConfig()
    flat: Dict[str, object] = {}
    nested: Dict[str, Dict[str, object]] = {}
    for section in known:
        if not parser.has_section(section):
            continue
        flat_keys = _FLAT_SECTIONS.get(section, ())
        sub_defaults = {'stft': base.stft, 'model': base.model, 'mml': base.mml,
                        'optimizer': base.optimizer}.get(section)
        for key, raw in parser.items(section):
            if key in flat_keys:
                flat[key] = _coerce(section, key, raw, getattr(base, key))
            elif sub_defaults is not None and key in {f.name for f in dataclasses.fields(sub_defaults)}:
                nested.setdefault(section, {})[key] = _coerce(section, key, raw, getattr(sub_defaults, key))
            else:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")

    manifest = flat.get('manifest', '')
    if manifest and not os.path.isabs(manifest):
        flat['manifest'] = os.path.normpath(os.path.join(base_dir, manifest))
    return dataclasses.replace(
        base,
        stft=_build(StftConfig, nested.get('stft', {}), 'stft'),
        model=_build(ModelConfig, nested.get('model', {}), 'model'),
        mml=_build(MMLConfig, nested.get('mml', {}), 'mml'),
        optimizer=_build(TrainingConfig, nested.get('optimizer', {}), 'optimizer'),
        **flat,
    )


def load_config(
    path: Optional[str] = None,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    env: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """Merge defaults, the config file, the environment and explicit overrides.

    Parameters
    ----------
    path : str, optional
        INI file; falls back to ``RIMML_CONFIG`` and then to pure defaults.
    seed, out_dir : optional
        Command-line overrides (highest precedence).
    env : mapping, optional
        Environment to read ``RIMML_*`` variables from (defaults to ``os.environ``).

    Raises
    ------
    ConfigError
        Malformed values, unknown keys, a missing config file or a missing manifest.
    """
    env = os.environ if env is None else env
    path = path or env.get('RIMML_CONFIG') or None
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding='utf-8') as fh:
            cfg = parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))
    else:
        cfg = ExperimentConfig()

    overrides: Dict[str, object] = {}
    if env.get('RIMML_SEED'):
        overrides['seed'] = _coerce('env', 'RIMML_SEED', env['RIMML_SEED'], 0)
    if env.get('RIMML_OUT'):
        overrides['out_dir'] = env['RIMML_OUT']
    if seed is not None:
        overrides['seed'] = int(seed)
    if out_dir is not None:
        overrides['out_dir'] = out_dir
    cfg = dataclasses.replace(cfg, **overrides)

    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.manifest and not os.path.isfile(cfg.manifest):
        raise ConfigError(f"manifest not found: {cfg.manifest}")
    return cfg


def render_config(cfg: ExperimentConfig) -> str:
    """The merged configuration as INI text that :func:`parse_config` reads back."""
    parser = configparser.ConfigParser(interpolation=None)

    def _fmt(value) -> str:
        if isinstance(value, tuple):
            return ', '.join(f'{v:g}' for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)

    for section, obj in (('stft', cfg.stft), ('model', cfg.model), ('mml', cfg.mml),
                         ('optimizer', cfg.optimizer)):
        parser[section] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    for section, keys in _FLAT_SECTIONS.items():
        if not parser.has_section(section):
            parser.add_section(section)
        for key in keys:
            parser.set(section, key, _fmt(getattr(cfg, key)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
