"""Backend selection for the row kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``PECTP_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from pectp.numerics import _kernels_py

try:
    if os.environ.get("PECTP_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from pectp.numerics import _kernels_c as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def use_backend(name: str) -> None:
    """Switch the active backend ("cython" or "python") at runtime."""
    global _impl, BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from pectp.numerics import _kernels_c

        _impl = _kernels_c
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def compiled_available() -> bool:
    try:
        from pectp.numerics import _kernels_c  # noqa: F401
    except ImportError:
        return False
    return True


# The wrappers below look up ``_impl`` at call time so tests can swap or
# monkeypatch individual kernels.


def layer_norm_forward(x, gamma, beta, eps):
    y, xhat, rstd = _impl.layer_norm_forward(
        _rows(x), np.ascontiguousarray(gamma), np.ascontiguousarray(beta), float(eps)
    )
    return y.reshape(x.shape), xhat.reshape(x.shape), rstd


def layer_norm_backward(g, xhat, rstd, gamma):
    dx, dgamma, dbeta = _impl.layer_norm_backward(
        _rows(g), _rows(xhat), rstd, np.ascontiguousarray(gamma)
    )
    return dx.reshape(g.shape), dgamma, dbeta


def softmax_forward(x):
    return _impl.softmax_forward(_rows(x)).reshape(x.shape)


def softmax_backward(g, y):
    return _impl.softmax_backward(_rows(g), _rows(y)).reshape(g.shape)


def gelu_forward(x):
    return _impl.gelu_forward(_rows(x)).reshape(x.shape)


def gelu_backward(g, x):
    return _impl.gelu_backward(_rows(g), _rows(x)).reshape(g.shape)
