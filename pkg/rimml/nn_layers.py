"""Differentiable building blocks with hand-written backward passes.

Every layer is a ``*_forward(...) -> (out, cache)`` / ``*_backward(dout, cache) -> grads``
pair operating on numpy arrays. Shapes:

- frequency convolution: ``(B, C, L)`` inputs, ``(O, C, K)`` filters, same zero padding;
- dense: ``(B, D)`` inputs, ``(D, H)`` weights;
- PReLU and batch norm: per channel (axis 1) for both 2-D and 3-D inputs.

Adam keeps its moments in :class:`AdamState`; :func:`adam_step` returns new arrays and never
mutates its arguments.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class NumericalDivergenceError(ArithmeticError):
    """NaN/Inf reached a layer output or a gradient."""

    def __init__(self, layer: str, detail: str = 'non-finite values'):
        super().__init__(f"numerical divergence in {layer}: {detail}")
        self.layer = layer


def check_finite(x: np.ndarray, layer: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalDivergenceError(layer)
    return x


# ---------------------------------------------------------------------------
# Frequency-axis convolution
# ---------------------------------------------------------------------------

def conv1d_freq_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """Cross-correlation along the last axis, stride 1, zero "same" padding."""
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"expected x (B, C, L) and w (O, C, K), got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, filters expect {w.shape[1]}")
    if w.shape[2] % 2 != 1:
        raise ValueError("filter length must be odd for symmetric same padding")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
    pad = w.shape[2] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, w.shape[2], axis=2)   # (B, C, L, K)
    out = np.einsum('bclk,ock->bol', cols, w, optimize=True) + b[None, :, None]
    return out, (x.shape, cols, w)


def conv1d_freq_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, filters and bias."""
    x_shape, cols, w = cache
    n_bins, k = x_shape[2], w.shape[2]
    pad = k // 2
    dw = np.einsum('bclk,bol->ock', cols, dout, optimize=True)
    db = dout.sum(axis=(0, 2))
    dcols = np.einsum('bol,ock->bclk', dout, w, optimize=True)
    dxp = np.zeros((x_shape[0], x_shape[1], n_bins + 2 * pad))
    for j in range(k):
        dxp[:, :, j:j + n_bins] += dcols[..., j]
    return dxp[:, :, pad:pad + n_bins], dw, db


# ---------------------------------------------------------------------------
# Dense, PReLU
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense input {x.shape} does not match weights {w.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def _channel_shape(x: np.ndarray) -> Tuple[int, ...]:
    return (1, -1) + (1,) * (x.ndim - 2)


def _reduce_axes(x: np.ndarray) -> Tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def prelu_forward(x: np.ndarray, slope: np.ndarray) -> Tuple[np.ndarray, tuple]:
    a = slope.reshape(_channel_shape(x))
    return np.where(x > 0, x, a * x), (x, a)


def prelu_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray]:
    x, a = cache
    positive = x > 0
    dx = np.where(positive, dout, a * dout)
    dslope = np.where(positive, 0.0, x * dout).sum(axis=_reduce_axes(x))
    return dx, dslope


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      mode: str = 'train', momentum: float = BN_MOMENTUM,
                      eps: float = BN_EPS) -> Tuple[np.ndarray, dict]:
    """Per-channel batch norm.

    In ``train`` mode batch statistics are used and the updated running statistics are
    returned in ``cache['running_mean']`` / ``cache['running_var']`` (inputs are not mutated).
    ``infer`` mode normalizes with the running statistics.
    """
    shape = _channel_shape(x)
    axes = _reduce_axes(x)
    if mode == 'train':
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = momentum * running_mean + (1.0 - momentum) * mu
        new_var = momentum * running_var + (1.0 - momentum) * var
    elif mode == 'infer':
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    cache = {'x_hat': x_hat, 'inv_std': inv_std, 'gamma': gamma, 'mode': mode,
             'running_mean': new_mean, 'running_var': new_var}
    return out, cache


def batchnorm_backward(dout: np.ndarray, cache: dict) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, scale and shift."""
    x_hat = cache['x_hat']
    shape = _channel_shape(x_hat)
    axes = _reduce_axes(x_hat)
    dgamma = np.sum(dout * x_hat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    dx_hat = dout * cache['gamma'].reshape(shape)
    inv_std = cache['inv_std'].reshape(shape)
    if cache['mode'] == 'infer':
        return dx_hat * inv_std, dgamma, dbeta
    m = x_hat.size // x_hat.shape[1]
    dx = (inv_std / m) * (m * dx_hat
                          - dx_hat.sum(axis=axes).reshape(shape)
                          - x_hat * np.sum(dx_hat * x_hat, axis=axes).reshape(shape))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray]) -> Tuple[AdamState, Dict[str, np.ndarray]]:
    """One bias-corrected Adam update; returns a new state and new parameter dict."""
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalDivergenceError(name, 'non-finite gradient')

    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_params = {}, {}, dict(params)
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params[name] = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_adam)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          eps_adam=state.eps_adam, step=t, m=new_m, v=new_v)
    return new_state, new_params


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x`` (``x`` is restored afterwards)."""
    if not x.flags.c_contiguous:
        raise ValueError("x must be C-contiguous so it can be perturbed in place")
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        f_plus = fn(x)
        flat[i] = old - h
        f_minus = fn(x)
        flat[i] = old
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
