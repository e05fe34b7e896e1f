"""Numerical building blocks shared by the VAE and the payload LM."""
from dataclasses import dataclass

import numpy as np

from vacs import kernels


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class LstmCellParams:
    """Weights of one LSTM cell, gates packed as [i | f | o | g].

    wx is (D, 4H), wh is (H, 4H), b is (4H,).
    """
    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H = self.wh.shape[0]
        if self.wh.shape != (H, 4 * H):
            raise ValueError(f"wh must be (H, 4H), got {self.wh.shape}")
        if self.wx.ndim != 2 or self.wx.shape[1] != 4 * H:
            raise ValueError(f"wx must be (D, {4 * H}), got {self.wx.shape}")
        if self.b.shape != (4 * H,):
            raise ValueError(f"b must be ({4 * H},), got {self.b.shape}")

    @property
    def hidden_size(self):
        return self.wh.shape[0]

    @property
    def input_size(self):
        return self.wx.shape[0]

    @classmethod
    def init(cls, rng, input_size, hidden_size, scale=0.08, forget_bias=1.0):
        H = hidden_size
        b = np.zeros(4 * H)
        b[H:2 * H] = forget_bias
        return cls(rng.uniform(-scale, scale, (input_size, 4 * H)),
                   rng.uniform(-scale, scale, (H, 4 * H)), b)


def lstm_cell_step(x, h_prev, c_prev, p):
    """One standard (non-peephole) LSTM step; accepts (D,) or (B, D) inputs."""
    x, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x, h_prev, c_prev))
    single = x.ndim == 1
    x, h_prev, c_prev = np.atleast_2d(x), np.atleast_2d(h_prev), np.atleast_2d(c_prev)
    H = p.hidden_size
    if x.shape[1] != p.input_size:
        raise ValueError(f"input dim {x.shape[1]} != cell input size {p.input_size}")
    if h_prev.shape[1] != H or c_prev.shape[1] != H:
        raise ValueError(f"state dims {h_prev.shape[1]}, {c_prev.shape[1]} != hidden size {H}")
    pre = x @ p.wx + h_prev @ p.wh + p.b
    _, c, _, h = kernels.lstm_forward(pre, c_prev)
    if single:
        return h[0], c[0]
    return h, c


def kl_diag_gaussian(mu_q, logvar_q, mu_p, logvar_p):
    """KL(N(mu_q, exp(logvar_q)) || N(mu_p, exp(logvar_p))), summed over the last axis."""
    arrs = [np.asarray(a, dtype=np.float64) for a in (mu_q, logvar_q, mu_p, logvar_p)]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError(f"length mismatch: {[a.shape for a in arrs]}")
    mq, lq, mp, lp = arrs
    return 0.5 * np.sum(np.exp(lq - lp) + (mp - mq) ** 2 * np.exp(-lp) - 1.0 + lp - lq, axis=-1)


def kl_diag_gaussian_node(g, mu_q, logvar_q, mu_p, logvar_p):
    """Differentiable version of :func:`kl_diag_gaussian` on graph nodes, per row."""
    d = g.sub(mu_p, mu_q)
    terms = g.exp(g.sub(logvar_q, logvar_p)) + g.mul(g.mul(d, d), g.exp(g.scale(logvar_p, -1.0)))
    terms = g.sub(g.add(terms, g.sub(logvar_p, logvar_q)), 1.0)
    return g.scale(g.sum(terms, axis=-1), 0.5)


def kl_standard_normal_node(g, mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) per row."""
    terms = g.exp(logvar) + g.mul(mu, mu) - logvar
    return g.scale(g.sub(g.sum(terms, axis=-1), float(mu.value.shape[-1])), 0.5)


def uniform_init(rng, shape, scale=0.08):
    return rng.uniform(-scale, scale, shape)
