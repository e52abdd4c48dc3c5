from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pectp.numerics.tensor import Tensor


class NonFiniteLossError(ArithmeticError):
    pass


def _value(loss) -> float:
    v = float(loss.data if isinstance(loss, Tensor) else loss)
    if not np.isfinite(v):
        raise NonFiniteLossError(f"loss evaluated to {v}")
    return v


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call. Each
    entry's error is ``|a - n| / max(|a|, |n|, 1e-8)``. Parameters are
    perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
    loss = loss_fn()
    _value(loss)
    if isinstance(loss, Tensor):
        loss.backward()
    analytic = [
        np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        for p in params
    ]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _value(loss_fn())
            flat[i] = orig - step
            down = _value(loss_fn())
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            denom = max(abs(af[i]), abs(num), 1e-8)
            worst = max(worst, abs(af[i] - num) / denom)
    for p in params:
        p.grad = None
    return worst
