"""Metric-space objectives and their gradients (the pseudo network).

The trainable network ends in a linear layer that emits stacked RI vectors ``yhat``. The
objectives below append fixed-weight layers after it:

- RI term:       ``||yhat - y||^2``                         (aligned with SSNR)
- waveform term: ``||F yhat - F y||^2``                     (same minimizer, reweighted)
- LPS term:      ``||log(P sqr(yhat)) - log(P sqr(y))||^2`` (aligned with LSD)

and back-propagate through them analytically. The LPS term couples each bin's real and
imaginary outputs; the RI and waveform terms do not.

Each function accepts one vector or a batch (leading axes); the value is the per-frame sum
averaged over frames and the gradient has the shape of ``yhat``.
"""
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from rimml.dsp_utils import LOG_FLOOR, SynthesisMatrices, build_synthesis_matrices


class LossValue(NamedTuple):
    loss: float
    grad: np.ndarray


class MMLValue(NamedTuple):
    loss: float
    grad: np.ndarray
    ri_term: float
    lps_term: float
    waveform_term: float


@dataclass(frozen=True)
class MMLConfig:
    """Weights of the unified objective ``alpha * RI + beta * LPS + gamma * waveform``."""
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    eps: float = LOG_FLOOR

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta and gamma must be non-negative")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("alpha, beta and gamma cannot all be zero")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _pair(yhat: np.ndarray, y: np.ndarray, stacked: bool = True):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: yhat {yhat.shape} vs y {y.shape}")
    if stacked and yhat.shape[-1] % 2 != 0:
        raise ValueError("stacked RI vectors must have even length 2L")
    n_frames = int(np.prod(yhat.shape[:-1])) if yhat.ndim > 1 else 1
    return yhat, y, n_frames


def squared_error(yhat: np.ndarray, y: np.ndarray) -> LossValue:
    """Squared Euclidean distance of arbitrary-length vectors (LPS baseline objective)."""
    yhat, y, n = _pair(yhat, y, stacked=False)
    diff = yhat - y
    return LossValue(float(np.sum(diff ** 2)) / n, 2.0 * diff / n)


def ri_loss(yhat: np.ndarray, y: np.ndarray) -> LossValue:
    """Squared Euclidean distance; gradient ``2 (yhat - y)``."""
    _pair(yhat, y)
    return squared_error(yhat, y)


def waveform_loss(yhat: np.ndarray, y: np.ndarray,
                  m: Optional[SynthesisMatrices] = None) -> LossValue:
    """Time-domain frame error ``||F (yhat - y)||^2``; gradient ``2 F^T F (yhat - y)``."""
    yhat, y, n = _pair(yhat, y)
    m = m or build_synthesis_matrices(yhat.shape[-1] // 2)
    if m.F.shape[1] != yhat.shape[-1]:
        raise ValueError(f"matrices built for 2L = {m.F.shape[1]}, vectors have {yhat.shape[-1]}")
    frame_err = (yhat - y) @ m.F.T
    return LossValue(float(np.sum(frame_err ** 2)) / n, 2.0 * (frame_err @ m.F) / n)


def lps_loss(yhat: np.ndarray, y: np.ndarray, eps: float = LOG_FLOOR) -> LossValue:
    """Squared log-power difference; zero gradient where ``yhat``'s power hits the floor."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    yhat, y, n = _pair(yhat, y)
    m = build_synthesis_matrices(yhat.shape[-1] // 2)
    raw = (yhat ** 2) @ m.P.T
    p_hat = np.maximum(raw, eps)
    p = np.maximum((y ** 2) @ m.P.T, eps)
    d = np.log(p_hat) - np.log(p)
    dlog = np.where(raw > eps, 2.0 * d / p_hat, 0.0)     # d loss / d p_hat
    grad = 2.0 * yhat * (dlog @ m.P)                      # P^T routes each bin back to r and i
    return LossValue(float(np.sum(d ** 2)) / n, grad / n)


def mml_loss(yhat: np.ndarray, y: np.ndarray, cfg: MMLConfig,
             m: Optional[SynthesisMatrices] = None) -> MMLValue:
    """Weighted sum of the RI, LPS and waveform terms and the same sum of their gradients.

    Every term is evaluated for logging; only terms with a positive weight contribute
    to the gradient.
    """
    yhat, y, _ = _pair(yhat, y)
    ri, g_ri = ri_loss(yhat, y)
    lps, g_lps = lps_loss(yhat, y, cfg.eps)
    wave, g_wave = waveform_loss(yhat, y, m)
    total_grad = np.zeros_like(yhat)
    for weight, g in ((cfg.alpha, g_ri), (cfg.beta, g_lps), (cfg.gamma, g_wave)):
        if weight > 0:
            total_grad += weight * g
    total = cfg.alpha * ri + cfg.beta * lps + cfg.gamma * wave
    return MMLValue(total, total_grad, ri, lps, wave)
