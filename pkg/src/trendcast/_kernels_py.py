"""Pure numpy implementations of the hot kernels.

Mirrors ``_kernels.pyx`` function for function; used whenever the compiled
extension is unavailable or ``TRENDCAST_PURE_PYTHON`` is set.
"""

import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_pointwise_forward(z, c_prev):
    """Gate nonlinearities and state update of one LSTM step.

    ``z`` holds the pre-activations laid out as ``[i | f | g | o]`` along the
    last axis, shape (B, 4H). Returns ``(h, c, gates, tanh_c)`` where
    ``gates`` are the activated gates in the same layout.
    """
    H = c_prev.shape[1]
    gates = np.empty_like(z)
    gates[:, :2 * H] = _sigmoid(z[:, :2 * H])
    gates[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
    gates[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
    i = gates[:, :H]
    f = gates[:, H:2 * H]
    g = gates[:, 2 * H:3 * H]
    o = gates[:, 3 * H:]
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, gates, tanh_c


def lstm_pointwise_backward(dh, dc, gates, c_prev, tanh_c):
    """Vector-Jacobian product of :func:`lstm_pointwise_forward`.

    Returns ``(dz, dc_prev)``.
    """
    H = c_prev.shape[1]
    i = gates[:, :H]
    f = gates[:, H:2 * H]
    g = gates[:, 2 * H:3 * H]
    o = gates[:, 3 * H:]
    dct = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dz = np.empty_like(gates)
    dz[:, :H] = dct * g * i * (1.0 - i)
    dz[:, H:2 * H] = dct * c_prev * f * (1.0 - f)
    dz[:, 2 * H:3 * H] = dct * i * (1.0 - g * g)
    dz[:, 3 * H:] = dh * tanh_c * o * (1.0 - o)
    return dz, dct * f


def ses_sse(y, alphas):
    """One-step-ahead SSE and final level of simple exponential smoothing.

    The level starts at ``y[0]``; errors are accumulated for t >= 1.
    """
    y = np.asarray(y, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    level = np.full(alphas.shape, y[0])
    sse = np.zeros(alphas.shape)
    for t in range(1, y.shape[0]):
        err = y[t] - level
        sse += err * err
        level = alphas * y[t] + (1.0 - alphas) * level
    return sse, level
