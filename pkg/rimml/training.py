"""Mini-batch training with the multi-metrics objective, and waveform enhancement.

Training writes to ``out_dir``:

- ``checkpoints/epoch_NNN.riml`` - one checkpoint per epoch (``epoch_000`` is the initialization)
- ``model.riml``                 - copy of the latest completed epoch
- ``loss_log.csv``               - ``epoch,step,alpha,beta,ri_term,lps_term,total`` per step
"""
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd

from rimml.dataset_utils import NormStats, TrainingPairs, stack_context
from rimml.dsp_utils import (
    RISpectrogram,
    StftConfig,
    Waveform,
    combine_magnitude_phase,
    istft,
    lps_from_ri,
    stft,
)
from rimml.losses import MMLConfig, MMLValue, mml_loss, squared_error
from rimml.network import (
    Checkpoint,
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    save_checkpoint,
)
from rimml.nn_layers import AdamState, NumericalDivergenceError, adam_step
from rimml.phase_analysis import phase_of

LOSS_LOG_COLUMNS = ['epoch', 'step', 'alpha', 'beta', 'ri_term', 'lps_term', 'total']
MIN_BATCH = 2
INFER_CHUNK = 128


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < MIN_BATCH:
            raise ValueError(f"batch_size must be >= {MIN_BATCH} (batch norm needs two rows)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps_adam <= 0:
            raise ValueError("eps_adam must be positive")


class TrainingDivergedError(RuntimeError):
    """A NaN/Inf loss or gradient stopped training; ``last_good`` is still loadable."""

    def __init__(self, last_good: str, epoch: int, step: int, cause: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step} ({cause}); "
                         f"last good checkpoint: {last_good}")
        self.last_good = last_good
        self.epoch = epoch
        self.step = step


@dataclass(eq=False)
class TrainingResult:
    checkpoint: Checkpoint
    checkpoint_path: str
    loss_log: pd.DataFrame

    def epoch_means(self) -> pd.Series:
        """Mean per-step total loss of every epoch."""
        return self.loss_log.groupby('epoch')['total'].mean()


def batch_indices(n_rows: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled mini-batches; a final batch smaller than two rows is dropped."""
    order = rng.permutation(n_rows)
    batches = [order[i:i + batch_size] for i in range(0, n_rows, batch_size)]
    return [b for b in batches if len(b) >= MIN_BATCH]


def objective(yhat: np.ndarray, y: np.ndarray, model_cfg: ModelConfig, mml_cfg: MMLConfig) -> MMLValue:
    """MML loss for RI models; plain LPS squared error (logged as the LPS term) for the baseline."""
    if model_cfg.feature_kind == 'lps':
        value = squared_error(yhat, y)
        return MMLValue(value.loss, value.grad, 0.0, value.loss, 0.0)
    return mml_loss(yhat, y, mml_cfg)


def _log_weights(model_cfg: ModelConfig, mml_cfg: MMLConfig):
    return (0.0, 1.0) if model_cfg.feature_kind == 'lps' else (mml_cfg.alpha, mml_cfg.beta)


def _write_log(rows: list, path: str) -> pd.DataFrame:
    log = pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS)
    log.to_csv(path, index=False, float_format='%.9g')
    return log


def train_model(
    pairs: TrainingPairs,
    input_stats: NormStats,
    target_stats: NormStats,
    model_cfg: ModelConfig,
    mml_cfg: MMLConfig,
    train_cfg: TrainingConfig,
    stft_cfg: StftConfig,
    out_dir: str,
    init_seed: int,
    shuffle_seed: int,
    sample_rate: int = 16000,
    verbose: bool = True,
) -> TrainingResult:
    """Train a model on prepared pairs with Adam.

    Parameters
    ----------
    pairs : TrainingPairs
        Un-normalized inputs (context already stacked) and targets in spectrogram units.
    input_stats, target_stats : NormStats
        Train-split statistics; inputs are normalized with the first, the network output is
        denormalized with the second before the loss is taken.
    model_cfg, mml_cfg, train_cfg, stft_cfg
        Architecture, loss weights, optimizer and framing settings.
    out_dir : str
        Receives checkpoints and ``loss_log.csv``.
    init_seed, shuffle_seed : int
        Sub-seeds for the weight initialization and the batch order.

    Returns
    -------
    TrainingResult
        Final checkpoint (as saved, float32 precision), its path and the loss log.

    Raises
    ------
    TrainingDivergedError
        On a non-finite loss or gradient; ``model.riml`` keeps the last completed epoch.
    """
    n_bins = stft_cfg.bins
    if len(pairs) < MIN_BATCH:
        raise ValueError(f"need at least {MIN_BATCH} training frames, got {len(pairs)}")
    if pairs.inputs.shape[1] != model_cfg.input_dim(n_bins):
        raise ValueError(f"inputs have {pairs.inputs.shape[1]} columns, model expects "
                         f"{model_cfg.input_dim(n_bins)}")
    if pairs.targets.shape[1] != model_cfg.output_dim(n_bins):
        raise ValueError(f"targets have {pairs.targets.shape[1]} columns, model emits "
                         f"{model_cfg.output_dim(n_bins)}")

    os.makedirs(os.path.join(out_dir, 'checkpoints'), exist_ok=True)
    latest = os.path.join(out_dir, 'model.riml')
    log_path = os.path.join(out_dir, 'loss_log.csv')

    def _save(epoch: int, p: ModelParams) -> Checkpoint:
        ckpt = Checkpoint(model_cfg, stft_cfg, p.quantized(), input_stats, target_stats, sample_rate)
        save_checkpoint(os.path.join(out_dir, 'checkpoints', f'epoch_{epoch:03d}.riml'), ckpt)
        save_checkpoint(latest, ckpt)
        return ckpt

    x_all = input_stats.normalize(pairs.inputs)
    y_all = np.asarray(pairs.targets, dtype=np.float64)
    params = init_params(model_cfg, n_bins, init_seed)
    adam = AdamState(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                     eps_adam=train_cfg.eps_adam)
    rng = np.random.default_rng(shuffle_seed)
    alpha, beta = _log_weights(model_cfg, mml_cfg)

    ckpt = _save(0, params)
    if verbose:
        print(f"🏋️ Training {model_cfg.arch} on {len(pairs)} frames for {train_cfg.epochs} epochs "
              f"(alpha={alpha:g}, beta={beta:g})", flush=True)

    rows = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        epoch_losses = []
        for idx in batch_indices(len(pairs), train_cfg.batch_size, rng):
            step += 1
            try:
                fp = forward(params, model_cfg, x_all[idx], 'train', target_stats)
                value = objective(fp.output, y_all[idx], model_cfg, mml_cfg)
                if not np.isfinite(value.loss):
                    raise NumericalDivergenceError('loss', f'loss is {value.loss}')
                grads = backward(value.grad, fp.cache)
                adam, weights = adam_step(adam, params.weights, grads)
            except NumericalDivergenceError as err:
                _write_log(rows, log_path)
                raise TrainingDivergedError(latest, epoch, step, str(err)) from err
            params = ModelParams(weights, fp.buffers, n_bins)
            rows.append((epoch, step, alpha, beta, value.ri_term, value.lps_term, value.loss))
            epoch_losses.append(value.loss)

        ckpt = _save(epoch, params)
        if verbose:
            mean = float(np.mean(epoch_losses)) if epoch_losses else float('nan')
            print(f"  📉 epoch {epoch}/{train_cfg.epochs}: mean loss {mean:.4e}", flush=True)

    log = _write_log(rows, log_path)
    if verbose:
        print(f"✅ Saved {latest}", flush=True)
    return TrainingResult(ckpt, latest, log)


# ---------------------------------------------------------------------------
# Enhancement
# ---------------------------------------------------------------------------

def predict(ckpt: Checkpoint, features: np.ndarray) -> np.ndarray:
    """Inference-mode network output (target units) for un-normalized feature frames."""
    x = ckpt.input_stats.normalize(stack_context(features, ckpt.model.context))
    outs = [forward(ckpt.params, ckpt.model, x[i:i + INFER_CHUNK], 'infer', ckpt.target_stats).output
            for i in range(0, x.shape[0], INFER_CHUNK)]
    return np.vstack(outs)


def enhance_waveform(ckpt: Checkpoint, noisy: Waveform) -> Waveform:
    """STFT, normalize, forward, denormalize, inverse STFT.

    RI models emit the enhanced spectrogram directly. The LPS baseline predicts log power;
    its magnitude is combined with the noisy phase. The output covers the input's whole
    frames only.
    """
    if noisy.sample_rate != ckpt.sample_rate:
        raise ValueError(f"sample rate mismatch: input is {noisy.sample_rate} Hz, model was "
                         f"trained at {ckpt.sample_rate} Hz")
    spec = stft(noisy, ckpt.stft)
    stacked = spec.stacked()
    if ckpt.model.feature_kind == 'ri':
        enhanced = RISpectrogram.from_stacked(predict(ckpt, stacked))
    else:
        magnitude = np.sqrt(np.exp(predict(ckpt, lps_from_ri(stacked))))
        enhanced = combine_magnitude_phase(magnitude, phase_of(spec))
    return istft(enhanced, ckpt.stft, noisy.sample_rate)


def identity_enhancer(noisy: Waveform) -> Waveform:
    return noisy

