"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np

from pectp.numerics import Tensor


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of a scalar numpy function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x))
        flat[i] = orig - step
        down = float(f(x))
        flat[i] = orig
        gf[i] = (up - down) / (2 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def analytic_grad(build, *arrays):
    """Gradients of ``build(*tensors)`` w.r.t. fresh leaves made from ``arrays``."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


# ---------------------------------------------------------------- retention losses


def loop_point(hp: np.ndarray, hc: np.ndarray) -> float:
    n_, w_, d_ = hp.shape
    total = 0.0
    for n in range(n_):
        for w in range(w_):
            for d in range(d_):
                total += (hp[n, w, d] - hc[n, w, d]) ** 2
    return total


def loop_pooled(hp: np.ndarray, hc: np.ndarray, axis: int, mean: bool = False) -> float:
    """Sum over the two kept axes of (sum over ``axis`` of the shift) squared."""
    dims = hp.shape
    kept = [a for a in range(3) if a != axis]
    total = 0.0
    for i in range(dims[kept[0]]):
        for j in range(dims[kept[1]]):
            acc = 0.0
            for r in range(dims[axis]):
                idx = [0, 0, 0]
                idx[kept[0]], idx[kept[1]], idx[axis] = i, j, r
                acc += hp[tuple(idx)] - hc[tuple(idx)]
            if mean:
                acc /= dims[axis]
            total += acc * acc
    return total


# ---------------------------------------------------------------- metrics


def loop_final_average(rows) -> float:
    b = len(rows)
    total = 0.0
    for i in range(b):
        total += rows[b - 1][i]
    return total / b


def loop_cumulative_average(rows) -> float:
    b_total = len(rows)
    acc = 0.0
    for b in range(b_total):
        s = 0.0
        for i in range(b + 1):
            s += rows[b][i]
        acc += s / (b + 1)
    return acc / b_total
