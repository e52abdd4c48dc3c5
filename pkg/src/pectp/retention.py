"""Prompt retention losses (outer and inner granularity) and head inheritance.

Block-output stacks are laid out ``(..., N, S, D)``: block, sequence
position ("patch") and embedding dimension. Any leading axes are treated as
a batch and the loss is averaged over them. The previous-task stack is
always a constant.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from pectp.numerics import ShapeError, Tensor, reduce_mean, reduce_sum, scale, sub, sum_squares
from pectp.prompts import CrossTaskPrompts, PromptSnapshot

BLOCK_AXIS, PATCH_AXIS, DIM_AXIS = -3, -2, -1


@dataclass(frozen=True)
class OpgConfig:
    use_point: bool = False
    use_block: bool = True
    use_patch: bool = True
    use_dimension: bool = True
    point_weight: float = 1.0
    block_weight: float = 1.0
    patch_weight: float = 1.0
    dimension_weight: float = 1.0
    pooling: str = "sum"  # "sum" as written in the loss formulas, "mean" for average pooling
    include_prompt_rows: bool = True

    def __post_init__(self):
        if self.pooling not in ("sum", "mean"):
            raise ValueError(f"pooling must be 'sum' or 'mean', got {self.pooling!r}")
        for k in ("point_weight", "block_weight", "patch_weight", "dimension_weight"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")

    def enabled_terms(self) -> list[str]:
        return [t for t in ("point", "block", "patch", "dimension") if getattr(self, f"use_{t}")]

    def to_dict(self) -> dict:
        return asdict(self)


def _as_const(h) -> Tensor:
    data = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    return Tensor(data)


def _as_tensor(h) -> Tensor:
    return h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))


def representative_shift(h_prev, h_cur) -> Tensor:
    """phi = h_prev - h_cur, with h_prev detached."""
    prev, cur = _as_const(h_prev), _as_tensor(h_cur)
    if prev.shape != cur.shape:
        raise ShapeError(f"stack shapes differ: {prev.shape} vs {cur.shape}")
    if cur.ndim < 3:
        raise ShapeError(f"block-output stacks need rank >= 3, got shape {cur.shape}")
    return sub(prev, cur)


def _batch_size(phi: Tensor) -> int:
    return int(np.prod(phi.shape[:-3])) if phi.ndim > 3 else 1


def _per_sample(loss: Tensor, batch: int) -> Tensor:
    return loss if batch == 1 else scale(loss, 1.0 / batch)


def opg_point_wise(h_prev, h_cur) -> Tensor:
    phi = representative_shift(h_prev, h_cur)
    return _per_sample(sum_squares(phi), _batch_size(phi))


def _pool(h_prev, h_cur, axis: int, pooling: str) -> Tensor:
    phi = representative_shift(h_prev, h_cur)
    batch = _batch_size(phi)
    pooled = reduce_sum(phi, axis) if pooling == "sum" else reduce_mean(phi, axis)
    return _per_sample(sum_squares(pooled), batch)


def opg_block_wise(h_prev, h_cur, pooling: str = "sum") -> Tensor:
    return _pool(h_prev, h_cur, BLOCK_AXIS, pooling)


def opg_patch_wise(h_prev, h_cur, pooling: str = "sum") -> Tensor:
    return _pool(h_prev, h_cur, PATCH_AXIS, pooling)


def opg_dimension_wise(h_prev, h_cur, pooling: str = "sum") -> Tensor:
    return _pool(h_prev, h_cur, DIM_AXIS, pooling)


def trim_prompt_rows(h: Tensor, num_tokens: int) -> Tensor:
    """Keep only the first ``num_tokens`` sequence rows (cls + patches)."""
    return h[..., :num_tokens, :]


def opg_terms(h_prev, h_cur, cfg: OpgConfig) -> dict[str, Tensor]:
    """Each enabled OPG term, unweighted."""
    terms = cfg.enabled_terms()
    if not terms:
        raise ValueError("OPG is active but every term is disabled")
    fns = {
        "point": lambda: opg_point_wise(h_prev, h_cur),
        "block": lambda: opg_block_wise(h_prev, h_cur, cfg.pooling),
        "patch": lambda: opg_patch_wise(h_prev, h_cur, cfg.pooling),
        "dimension": lambda: opg_dimension_wise(h_prev, h_cur, cfg.pooling),
    }
    return {t: fns[t]() for t in terms}


def opg_total(h_prev, h_cur, cfg: OpgConfig = OpgConfig()) -> Tensor:
    """Weighted sum of the enabled OPG terms."""
    total = None
    for name, term in opg_terms(h_prev, h_cur, cfg).items():
        w = getattr(cfg, f"{name}_weight")
        term = term if w == 1.0 else scale(term, w)
        total = term if total is None else total + term
    return total


def ipg(prev: PromptSnapshot, cur: CrossTaskPrompts) -> Tensor:
    """Squared distance between the live prompts and the frozen snapshot."""
    p_prev = prev.P_prev if isinstance(prev, PromptSnapshot) else prev
    p_cur = cur.P if isinstance(cur, CrossTaskPrompts) else cur
    if p_prev.shape != p_cur.shape:
        raise ShapeError(f"prompt shapes differ: {p_prev.shape} vs {p_cur.shape}")
    return sum_squares(sub(_as_const(p_prev), p_cur))


def hrm_init(prev_heads: Sequence[np.ndarray], gammas: Sequence[float], width: int | None = None) -> np.ndarray:
    """Initial weights for the next head: ``(1/(k-1)) * sum_i gamma_i * w_i``.

    Heads of equal width are combined row by row. With mixed widths each
    head is first collapsed to its mean row and the combination is tiled to
    ``width`` rows.
    """
    if len(prev_heads) == 0:
        raise ValueError("hrm_init needs at least one previous head (task 1 uses standard init)")
    if len(gammas) != len(prev_heads):
        raise ValueError(f"expected {len(prev_heads)} gammas, got {len(gammas)}")
    heads = [np.asarray(w.data if isinstance(w, Tensor) else w) for w in prev_heads]
    dim = heads[0].shape[-1]
    if any(h.shape[-1] != dim for h in heads):
        raise ShapeError(f"previous heads disagree on input dim: {[h.shape for h in heads]}")
    widths = {h.shape[0] for h in heads}
    if len(widths) == 1 and (width is None or width == heads[0].shape[0]):
        return _running_mean([g * h for g, h in zip(gammas, heads)])
    if width is None:
        raise ValueError("heads have different widths; pass the new head width")
    proto = _running_mean([g * h.mean(axis=0) for g, h in zip(gammas, heads)])
    return np.tile(proto, (width, 1))


def _running_mean(terms: Sequence[np.ndarray]) -> np.ndarray:
    # incremental form is exact when all terms are equal, unlike sum / n
    acc = np.array(terms[0], copy=True)
    for j, t in enumerate(terms[1:], start=2):
        acc = acc + (t - acc) / j
    return acc
