"""Single-step LSTM kernels in numpy.

Gate order is input, forget, cell candidate, output. ``gates`` holds the
activated values and is all the backward step needs besides the inputs.
"""

import numpy as np


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def lstm_step_forward(Wx, Wh, b, x, h_prev, c_prev):
    H = h_prev.shape[0]
    a = Wx @ x + Wh @ h_prev + b
    gates = np.empty(4 * H)
    gates[: 2 * H] = _sigmoid(a[: 2 * H])
    gates[2 * H: 3 * H] = np.tanh(a[2 * H: 3 * H])
    gates[3 * H:] = _sigmoid(a[3 * H:])
    c = gates[H: 2 * H] * c_prev + gates[: H] * gates[2 * H: 3 * H]
    h = gates[3 * H:] * np.tanh(c)
    return h, c, gates


def lstm_step_backward(Wx, Wh, x, h_prev, c_prev, c, gates, dh, dc, dWx, dWh, db):
    """Accumulates weight gradients in place; returns (dx, dh_prev, dc_prev)."""
    H = h_prev.shape[0]
    i, f, g, o = gates[:H], gates[H:2 * H], gates[2 * H:3 * H], gates[3 * H:]
    tc = np.tanh(c)
    dct = dc + dh * o * (1.0 - tc * tc)
    da = np.empty(4 * H)
    da[:H] = dct * g * i * (1.0 - i)
    da[H:2 * H] = dct * c_prev * f * (1.0 - f)
    da[2 * H:3 * H] = dct * i * (1.0 - g * g)
    da[3 * H:] = dh * tc * o * (1.0 - o)
    dWx += np.outer(da, x)
    dWh += np.outer(da, h_prev)
    db += da
    return Wx.T @ da, Wh.T @ da, dct * f
