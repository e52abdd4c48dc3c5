"""The single cross-task prompt stack and its previous-task snapshot."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pectp.backbone import _trunc_normal
from pectp.numerics import Tensor

PROMPT_INIT_STD = 0.02


@dataclass
class CrossTaskPrompts:
    P: Tensor
    task_index: int = 1

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.P.shape

    @property
    def prompt_number(self) -> int:
        """Number of prompt tokens, N * L_p."""
        n, lp, _ = self.P.shape
        return n * lp

    @property
    def num_parameters(self) -> int:
        return self.P.data.size


@dataclass(frozen=True)
class PromptSnapshot:
    P_prev: Tensor

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.P_prev.shape


def init_prompts(
    num_blocks: int,
    length: int,
    dim: int,
    seed: int,
    std: float = PROMPT_INIT_STD,
    dtype: str = "float64",
) -> CrossTaskPrompts:
    for name, v in (("num_blocks", num_blocks), ("length", length), ("dim", dim)):
        if v <= 0:
            raise ValueError(f"prompt {name} must be positive, got {v}")
    rng = np.random.default_rng(seed)
    values = _trunc_normal(rng, (num_blocks, length, dim), std).astype(dtype)
    return CrossTaskPrompts(Tensor(values, requires_grad=True))


def snapshot(prompts: CrossTaskPrompts | PromptSnapshot) -> PromptSnapshot:
    """Frozen deep copy of the current prompt values."""
    src = prompts.P if isinstance(prompts, CrossTaskPrompts) else prompts.P_prev
    data = src.data.copy()
    data.flags.writeable = False
    return PromptSnapshot(Tensor(data, requires_grad=False))
