"""Enhancement network architectures, forward/backward passes and checkpoint files.

Architectures (``ModelConfig.arch``):

- ``ri_cnn``: the ``2c+1`` context frames of the noisy RI spectrogram become ``2(2c+1)``
  channels over the frequency axis, then ``[conv -> BN -> PReLU] x conv_layers``,
  flatten, ``[dense -> BN -> PReLU] x dense_layers`` and a linear output of ``2L`` values.
- ``ri_dnn``: the flattened context frames go through ``[dense -> BN -> PReLU] x
  dnn_hidden_layers`` and a linear ``2L`` output.
- ``lps_dnn_baseline``: same as ``ri_dnn`` on log-power features with an ``L``-value output.

The network regresses normalized targets. :func:`forward` denormalizes with the target
statistics so losses are evaluated in spectrogram units; :func:`backward` takes the gradient
in those units and returns one gradient per trainable tensor.
"""
import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from rimml.dataset_utils import NormStats
from rimml.dsp_utils import DEFAULT_SAMPLE_RATE, StftConfig
from rimml.nn_layers import (
    batchnorm_backward,
    batchnorm_forward,
    check_finite,
    conv1d_freq_backward,
    conv1d_freq_forward,
    dense_backward,
    dense_forward,
    prelu_backward,
    prelu_forward,
)

ARCHS = ('ri_cnn', 'ri_dnn', 'lps_dnn_baseline')
PRELU_INIT = 0.25

CHECKPOINT_MAGIC = b'RIML'
CHECKPOINT_VERSION = 1

_COUNT_FIELDS = ('conv_layers', 'filters_per_layer', 'filter_len', 'dense_layers',
                 'dense_width', 'dnn_hidden_layers', 'dnn_width')


@dataclass(frozen=True)
class ModelConfig:
    arch: str = 'ri_cnn'
    conv_layers: int = 4
    filters_per_layer: int = 50
    filter_len: int = 25
    dense_layers: int = 2
    dense_width: int = 512
    dnn_hidden_layers: int = 6
    dnn_width: int = 1000
    use_batch_norm: bool = True
    context: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got '{self.arch}'")
        for name in _COUNT_FIELDS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer")
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.filter_len % 2 != 1:
            raise ValueError("filter_len must be odd (symmetric same padding)")
        if self.context < 0:
            raise ValueError("context must be >= 0")

    @property
    def feature_kind(self) -> str:
        return 'lps' if self.arch == 'lps_dnn_baseline' else 'ri'

    @property
    def input_channels(self) -> int:
        return 1 if self.arch == 'lps_dnn_baseline' else 2

    def input_dim(self, n_bins: int) -> int:
        return self.input_channels * n_bins * (2 * self.context + 1)

    def output_dim(self, n_bins: int) -> int:
        return self.input_channels * n_bins


def layer_plan(cfg: ModelConfig) -> List[Tuple[str, str]]:
    """(name, kind) of every trainable layer in forward order; kind is conv, dense or out."""
    if cfg.arch == 'ri_cnn':
        plan = [(f'conv{i}', 'conv') for i in range(cfg.conv_layers)]
        plan += [(f'fc{i}', 'dense') for i in range(cfg.dense_layers)]
    else:
        plan = [(f'fc{i}', 'dense') for i in range(cfg.dnn_hidden_layers)]
    plan.append(('out', 'out'))
    return plan


def param_shapes(cfg: ModelConfig, n_bins: int) -> Tuple[Dict[str, tuple], Dict[str, tuple]]:
    """Shapes of the trainable tensors and of the batch-norm running buffers, in declaration order."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    weights: Dict[str, tuple] = {}
    buffers: Dict[str, tuple] = {}
    channels = cfg.input_channels * (2 * cfg.context + 1)
    width = cfg.input_dim(n_bins)
    for name, kind in layer_plan(cfg):
        if kind == 'conv':
            n_out = cfg.filters_per_layer
            weights[f'{name}.w'] = (n_out, channels, cfg.filter_len)
            channels = n_out
            width = n_out * n_bins
        elif kind == 'dense':
            n_out = cfg.dense_width if cfg.arch == 'ri_cnn' else cfg.dnn_width
            weights[f'{name}.w'] = (width, n_out)
            width = n_out
        else:
            weights['out.w'] = (width, cfg.output_dim(n_bins))
            weights['out.b'] = (cfg.output_dim(n_bins),)
            break
        weights[f'{name}.b'] = (n_out,)
        if cfg.use_batch_norm:
            weights[f'{name}.bn_gamma'] = (n_out,)
            weights[f'{name}.bn_beta'] = (n_out,)
            buffers[f'{name}.bn_mean'] = (n_out,)
            buffers[f'{name}.bn_var'] = (n_out,)
        weights[f'{name}.prelu'] = (n_out,)
    return weights, buffers


@dataclass(eq=False)
class ModelParams:
    weights: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    n_bins: int

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        return list(self.weights.items()) + list(self.buffers.items())

    def copy(self) -> 'ModelParams':
        return ModelParams({k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()}, self.n_bins)

    def quantized(self) -> 'ModelParams':
        """The same parameters rounded through float32 (the checkpoint precision)."""
        def q(d):
            return {k: v.astype(np.float32).astype(np.float64) for k, v in d.items()}
        return ModelParams(q(self.weights), q(self.buffers), self.n_bins)

    def validate(self) -> None:
        for name, arr in self.tensors():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter '{name}' contains non-finite values")
            if name.endswith('.bn_var') and np.any(arr < 0):
                raise ValueError(f"running variance '{name}' has negative entries")


def _he_std(fan_in: int, slope: float = PRELU_INIT) -> float:
    return float(np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in)))


def init_params(cfg: ModelConfig, n_bins: int, seed: int) -> ModelParams:
    """PReLU-aware He initialization for hidden layers, fan-in scaling for the output layer."""
    rng = np.random.default_rng(seed)
    weight_shapes, buffer_shapes = param_shapes(cfg, n_bins)
    weights: Dict[str, np.ndarray] = {}
    for name, shape in weight_shapes.items():
        if name.endswith('.w'):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 3 else shape[0]
            std = np.sqrt(1.0 / fan_in) if name == 'out.w' else _he_std(fan_in)
            weights[name] = rng.normal(0.0, std, size=shape)
        elif name.endswith('.prelu'):
            weights[name] = np.full(shape, PRELU_INIT)
        elif name.endswith('.bn_gamma'):
            weights[name] = np.ones(shape)
        else:
            weights[name] = np.zeros(shape)
    buffers = {name: (np.ones(shape) if name.endswith('.bn_var') else np.zeros(shape))
               for name, shape in buffer_shapes.items()}
    return ModelParams(weights, buffers, n_bins)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

class ForwardPass(NamedTuple):
    output: np.ndarray
    cache: dict
    buffers: Dict[str, np.ndarray]


def forward(params: ModelParams, cfg: ModelConfig, x: np.ndarray, mode: str = 'infer',
            target_stats: Optional[NormStats] = None) -> ForwardPass:
    """Run the network on normalized feature rows ``x`` (B x input_dim).

    Parameters
    ----------
    params : ModelParams
        Weights and batch-norm running statistics (not modified).
    cfg : ModelConfig
        Architecture the parameters were built for.
    x : numpy.ndarray
        Normalized inputs; a single row may be passed as a 1-D vector.
    mode : {'train', 'infer'}
        Batch norm uses batch statistics in ``train`` and running statistics in ``infer``.
    target_stats : NormStats, optional
        When given the output is denormalized into target units.

    Returns
    -------
    ForwardPass
        ``output`` (B x output_dim), the cache for :func:`backward`, and the running
        statistics after this pass (unchanged in ``infer`` mode).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    expected = cfg.input_dim(params.n_bins)
    if x.ndim != 2 or x.shape[1] != expected:
        raise ValueError(f"input must be B x {expected}, got {x.shape}")
    check_finite(x, 'input')

    w = params.weights
    buffers = dict(params.buffers)
    steps = []
    h = x.reshape(x.shape[0], -1, params.n_bins) if cfg.arch == 'ri_cnn' else x
    for name, kind in layer_plan(cfg):
        if kind != 'conv' and h.ndim == 3:
            steps.append((name, 'flatten', h.shape))
            h = h.reshape(h.shape[0], -1)
        if kind == 'conv':
            h, c = conv1d_freq_forward(h, w[f'{name}.w'], w[f'{name}.b'])
        else:
            h, c = dense_forward(h, w[f'{name}.w'], w[f'{name}.b'])
        steps.append((name, 'conv' if kind == 'conv' else 'dense', c))
        if kind != 'out':
            if cfg.use_batch_norm:
                h, c = batchnorm_forward(h, w[f'{name}.bn_gamma'], w[f'{name}.bn_beta'],
                                         buffers[f'{name}.bn_mean'], buffers[f'{name}.bn_var'], mode)
                buffers[f'{name}.bn_mean'] = c['running_mean']
                buffers[f'{name}.bn_var'] = c['running_var']
                steps.append((name, 'bn', c))
            h, c = prelu_forward(h, w[f'{name}.prelu'])
            steps.append((name, 'prelu', c))
        check_finite(h, name)

    std = None
    if target_stats is not None:
        if target_stats.dim != h.shape[1]:
            raise ValueError(f"target stats have dimension {target_stats.dim}, output has {h.shape[1]}")
        h = target_stats.denormalize(h)
        std = target_stats.std
    return ForwardPass(h, {'steps': steps, 'target_std': std}, buffers)


def backward(dout: np.ndarray, cache: dict) -> Dict[str, np.ndarray]:
    """Gradients of every trainable tensor given ``dout`` = d loss / d output."""
    grads: Dict[str, np.ndarray] = {}
    d = np.asarray(dout, dtype=np.float64)
    if cache['target_std'] is not None:
        d = d * cache['target_std']
    for name, kind, c in reversed(cache['steps']):
        if kind == 'prelu':
            d, grads[f'{name}.prelu'] = prelu_backward(d, c)
        elif kind == 'bn':
            d, grads[f'{name}.bn_gamma'], grads[f'{name}.bn_beta'] = batchnorm_backward(d, c)
        elif kind == 'conv':
            d, grads[f'{name}.w'], grads[f'{name}.b'] = conv1d_freq_backward(d, c)
        elif kind == 'dense':
            d, grads[f'{name}.w'], grads[f'{name}.b'] = dense_backward(d, c)
        else:
            d = d.reshape(c)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    model: ModelConfig
    stft: StftConfig
    params: ModelParams
    input_stats: NormStats
    target_stats: NormStats
    sample_rate: int = DEFAULT_SAMPLE_RATE


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write a RIML checkpoint (tensors stored as little-endian float32).

    Layout: ``RIML``, u32 version, u32 header length, JSON header (model and STFT config,
    sample rate, bin count, tensor names), input NormStats, target NormStats, u32 tensor
    count, then per tensor u32 rank, u32 dims and the data. The file is written to a
    temporary name and moved into place.
    """
    tensors = ckpt.params.tensors()
    header = json.dumps({
        'model': asdict(ckpt.model),
        'stft': asdict(ckpt.stft),
        'sample_rate': int(ckpt.sample_rate),
        'n_bins': int(ckpt.params.n_bins),
        'tensors': [name for name, _ in tensors],
    }, sort_keys=True).encode('utf-8')

    parts = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(header)), header,
             ckpt.input_stats.to_bytes(), ckpt.target_stats.to_bytes(),
             struct.pack('<I', len(tensors))]
    for _, arr in tensors:
        parts.append(struct.pack('<I', arr.ndim) + struct.pack(f'<{arr.ndim}I', *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype='<f4').tobytes())

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f'{path}.tmp'
    with open(tmp, 'wb') as fh:
        fh.write(b''.join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, 'rb') as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a RIML checkpoint")
    version, header_len = struct.unpack_from('<II', blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12 + header_len
    header = json.loads(blob[12:offset].decode('utf-8'))
    model = ModelConfig(**header['model'])
    stft_cfg = StftConfig(**header['stft'])
    n_bins = int(header['n_bins'])
    input_stats, offset = NormStats.from_bytes(blob, offset)
    target_stats, offset = NormStats.from_bytes(blob, offset)

    weight_shapes, buffer_shapes = param_shapes(model, n_bins)
    expected = {**weight_shapes, **buffer_shapes}
    (count,) = struct.unpack_from('<I', blob, offset)
    offset += 4
    names = header['tensors']
    if count != len(names) or list(expected) != names:
        raise ValueError(f"{path}: tensor list does not match the model configuration")

    arrays: Dict[str, np.ndarray] = {}
    for name in names:
        (rank,) = struct.unpack_from('<I', blob, offset)
        dims = struct.unpack_from(f'<{rank}I', blob, offset + 4)
        offset += 4 + 4 * rank
        if tuple(dims) != tuple(expected[name]):
            raise ValueError(f"{path}: tensor '{name}' has shape {dims}, expected {expected[name]}")
        n = int(np.prod(dims))
        arrays[name] = (np.frombuffer(blob, dtype='<f4', count=n, offset=offset)
                        .astype(np.float64).reshape(dims))
        offset += 4 * n

    params = ModelParams({k: arrays[k] for k in weight_shapes},
                         {k: arrays[k] for k in buffer_shapes}, n_bins)
    params.validate()
    return Checkpoint(model, stft_cfg, params, input_stats, target_stats,
                      int(header['sample_rate']))
