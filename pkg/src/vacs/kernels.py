"""Elementwise LSTM gate kernels with a compiled fast path.

The compiled module ``vacs._ckernels`` is used when it was built and
``VACS_PURE_PYTHON`` is unset; otherwise the numpy versions below run.
Both take the fused pre-activation ``pre`` of shape (B, 4H), gates ordered
[input, forget, output, candidate].
"""
import os

import numpy as np


def _sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def lstm_forward_py(pre, c_prev):
    H = c_prev.shape[1]
    if pre.shape != (c_prev.shape[0], 4 * H):
        raise ValueError("lstm_forward: pre must be (B, 4H) for c_prev (B, H)")
    gates = np.empty_like(pre)
    gates[:, :3 * H] = _sigmoid(pre[:, :3 * H])
    gates[:, 3 * H:] = np.tanh(pre[:, 3 * H:])
    i, f, o, g = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return gates, c, tc, o * tc


def lstm_backward_py(gates, c_prev, tc, dh, dc):
    H = c_prev.shape[1]
    i, f, o, g = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    dct = dc + dh * o * (1.0 - tc * tc)
    dpre = np.empty_like(gates)
    dpre[:, :H] = dct * g * i * (1.0 - i)
    dpre[:, H:2 * H] = dct * c_prev * f * (1.0 - f)
    dpre[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
    dpre[:, 3 * H:] = dct * i * (1.0 - g * g)
    return dpre, dct * f


def _load_compiled():
    if os.environ.get("VACS_PURE_PYTHON"):
        return None
    try:
        from vacs import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "python"

if _compiled is not None:
    def lstm_forward(pre, c_prev):
        return _compiled.lstm_forward(np.ascontiguousarray(pre, dtype=np.float64),
                                      np.ascontiguousarray(c_prev, dtype=np.float64))

    def lstm_backward(gates, c_prev, tc, dh, dc):
        return _compiled.lstm_backward(gates, np.ascontiguousarray(c_prev),
                                       tc, np.ascontiguousarray(dh),
                                       np.ascontiguousarray(dc))
else:
    lstm_forward = lstm_forward_py
    lstm_backward = lstm_backward_py
