"""Pure-numpy reference kernels.

Every function takes and returns C-contiguous 2-D arrays whose last axis is
the normalized / softmaxed feature axis. The compiled module ``_kernels_c``
exposes the same names and signatures.
"""

from __future__ import annotations

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_K = 0.044715


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(g, xhat, rstd, gamma):
    dxhat = g * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def gelu_forward(x):
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_backward(g, x):
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_K * x2 * x))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x2)
    return g * d
