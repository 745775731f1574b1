"""Tests for rimml.nn_layers: layer forward/backward pairs, Adam and the finite-difference helper."""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from rimml.nn_layers import (
    AdamState,
    NumericalDivergenceError,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    check_finite,
    conv1d_freq_backward,
    conv1d_freq_forward,
    dense_backward,
    dense_forward,
    numerical_gradient,
    prelu_backward,
    prelu_forward,
    relative_error,
)


def _random(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def _assert_grad(analytic, numeric):
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def test_conv_identity_filter():
    x = _random((2, 1, 9))
    w = np.zeros((1, 1, 5))
    w[0, 0, 2] = 1.0
    out, _ = conv1d_freq_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_sliding_sum():
    out, _ = conv1d_freq_forward(np.array([[[1.0, 2.0, 3.0]]]), np.ones((1, 1, 3)), np.zeros(1))
    np.testing.assert_allclose(out, [[[3.0, 6.0, 5.0]]])


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        conv1d_freq_forward(np.zeros((1, 2, 5)), np.zeros((1, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        conv1d_freq_forward(np.zeros((1, 1, 5)), np.zeros((1, 1, 4)), np.zeros(1))
    with pytest.raises(ValueError):
        conv1d_freq_forward(np.zeros((1, 5)), np.zeros((1, 1, 3)), np.zeros(1))


def test_conv_gradients():
    x, w, b = _random((2, 2, 7), 1), _random((3, 2, 3), 2), _random(3, 3)
    upstream = _random((2, 3, 7), 4)
    out, cache = conv1d_freq_forward(x, w, b)
    dx, dw, db = conv1d_freq_backward(upstream, cache)

    def loss(_):
        return float(np.sum(conv1d_freq_forward(x, w, b)[0] * upstream))

    _assert_grad(dx, numerical_gradient(loss, x))
    _assert_grad(dw, numerical_gradient(loss, w))
    _assert_grad(db, numerical_gradient(loss, b))


# ---------------------------------------------------------------------------
# Dense / PReLU
# ---------------------------------------------------------------------------

def test_dense_gradients():
    x, w, b = _random((4, 5), 1), _random((5, 3), 2), _random(3, 3)
    upstream = _random((4, 3), 4)
    _, cache = dense_forward(x, w, b)
    dx, dw, db = dense_backward(upstream, cache)

    def loss(_):
        return float(np.sum(dense_forward(x, w, b)[0] * upstream))

    _assert_grad(dx, numerical_gradient(loss, x))
    _assert_grad(dw, numerical_gradient(loss, w))
    _assert_grad(db, numerical_gradient(loss, b))
    with pytest.raises(ValueError):
        dense_forward(np.zeros((2, 4)), w, b)


def test_prelu_forward_and_gradients():
    x = _random((3, 2, 4), 5)
    x = np.where(np.abs(x) < 0.1, 0.5, x)          # stay away from the kink
    slope = np.array([0.25, 0.1])
    out, cache = prelu_forward(x, slope)
    np.testing.assert_allclose(out[:, 1][x[:, 1] < 0], 0.1 * x[:, 1][x[:, 1] < 0])
    upstream = _random((3, 2, 4), 6)
    dx, dslope = prelu_backward(upstream, cache)

    def loss(_):
        return float(np.sum(prelu_forward(x, slope)[0] * upstream))

    _assert_grad(dx, numerical_gradient(loss, x))
    _assert_grad(dslope, numerical_gradient(loss, slope))


# ---------------------------------------------------------------------------
# Batch norm
# ---------------------------------------------------------------------------

def test_batchnorm_standardized_batch_is_unchanged():
    x = _random((64, 3), 7)
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    out, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_batchnorm_constant_batch_gives_shift():
    out, _ = batchnorm_forward(np.full((4, 2), 3.0), np.ones(2), np.array([0.5, -1.0]),
                               np.zeros(2), np.ones(2))
    np.testing.assert_allclose(out, np.tile([0.5, -1.0], (4, 1)))


def test_batchnorm_running_stats_and_infer():
    x = _random((8, 2, 5), 8) * 2.0 + 1.0
    mean, var = np.zeros(2), np.ones(2)
    _, cache = batchnorm_forward(x, np.ones(2), np.zeros(2), mean, var, 'train')
    np.testing.assert_allclose(cache['running_mean'], 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(cache['running_var'], 0.9 + 0.1 * x.var(axis=(0, 2)))
    np.testing.assert_array_equal(mean, 0.0)                    # inputs untouched
    out, _ = batchnorm_forward(x[:1], np.ones(2), np.zeros(2), np.full(2, 1.0), np.full(2, 4.0), 'infer')
    np.testing.assert_allclose(out, (x[:1] - 1.0) / np.sqrt(4.0 + 1e-5))


def test_batchnorm_errors():
    with pytest.raises(ValueError):
        batchnorm_forward(np.zeros((1, 3)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), 'train')
    with pytest.raises(ValueError):
        batchnorm_forward(np.zeros((2, 3)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), 'eval')


@pytest.mark.parametrize('shape', [(6, 3), (4, 3, 5)])
@pytest.mark.parametrize('mode', ['train', 'infer'])
def test_batchnorm_gradients(shape, mode):
    x = _random(shape, 9)
    gamma, beta = _random(3, 10) + 1.0, _random(3, 11)
    rm, rv = _random(3, 12), np.abs(_random(3, 13)) + 0.5
    upstream = _random(shape, 14)
    _, cache = batchnorm_forward(x, gamma, beta, rm, rv, mode)
    dx, dgamma, dbeta = batchnorm_backward(upstream, cache)

    def loss(_):
        return float(np.sum(batchnorm_forward(x, gamma, beta, rm, rv, mode)[0] * upstream))

    _assert_grad(dx, numerical_gradient(loss, x))
    _assert_grad(dgamma, numerical_gradient(loss, gamma))
    _assert_grad(dbeta, numerical_gradient(loss, beta))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    params = {'w': np.array([1.0, -2.0])}
    state, new = adam_step(AdamState(), params, {'w': np.zeros(2)})
    assert state.step == 1
    np.testing.assert_array_equal(new['w'], params['w'])


def test_adam_first_step_is_signed_lr():
    params = {'w': np.array([0.0, 0.0, 0.0])}
    _, new = adam_step(AdamState(lr=0.01), params, {'w': np.array([5.0, -0.3, 1e-3])})
    np.testing.assert_allclose(new['w'], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_trace_on_parabola():
    # reference scalar Adam on f(x) = x^2
    x_ref, m, v = 1.0, 0.0, 0.0
    expected = []
    for t in range(1, 6):
        g = 2.0 * x_ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x_ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        expected.append(x_ref)

    state, params = AdamState(lr=0.1), {'x': np.array([1.0])}
    trace = []
    for _ in range(5):
        state, params = adam_step(state, params, {'x': 2.0 * params['x']})
        trace.append(float(params['x'][0]))
    np.testing.assert_allclose(trace, expected, rtol=1e-12)
    assert trace[0] == pytest.approx(0.9)
    assert trace[1] == pytest.approx(0.800412, abs=1e-6)
    assert all(np.all(v >= 0) for v in state.v.values())


def test_adam_does_not_mutate_and_validates():
    params = {'w': np.array([1.0])}
    state = AdamState()
    adam_step(state, params, {'w': np.array([1.0])})
    assert state.step == 0 and not state.m
    np.testing.assert_array_equal(params['w'], [1.0])
    with pytest.raises(NumericalDivergenceError):
        adam_step(state, params, {'w': np.array([np.nan])})
    with pytest.raises(ValueError):
        adam_step(state, params, {'other': np.array([1.0])})
    with pytest.raises(ValueError):
        adam_step(state, params, {'w': np.zeros(2)})


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def test_numerical_gradient_and_restore():
    x = np.array([1.0, -2.0, 0.5])
    g = numerical_gradient(lambda v: float(np.sum(v ** 2)), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])
    with pytest.raises(ValueError):
        numerical_gradient(lambda v: 0.0, np.zeros((3, 4)).T)


def test_check_finite_names_layer():
    with pytest.raises(NumericalDivergenceError, match='conv1'):
        check_finite(np.array([1.0, np.inf]), 'conv1')


def test_relative_error_floor():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-12])) == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0
