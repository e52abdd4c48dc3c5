"""Per-task classifier heads and the nearest-prototype (cosine) head."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from pectp.numerics import ShapeError, Tensor, add, concat, matmul, transpose


@dataclass
class Head:
    weight: Tensor  # (|Y_i|, D)
    bias: Tensor  # (|Y_i|,)
    frozen: bool = False

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    def freeze(self) -> None:
        self.frozen = True
        self.weight.requires_grad = False
        self.bias.requires_grad = False


@dataclass
class HeadBank:
    dim: int
    heads: list[Head] = field(default_factory=list)
    dtype: str = "float64"

    def __len__(self) -> int:
        return len(self.heads)

    @property
    def class_offsets(self) -> list[int]:
        """Logit index where each head's block starts."""
        offsets, acc = [], 0
        for h in self.heads:
            offsets.append(acc)
            acc += h.width
        return offsets

    @property
    def num_classes(self) -> int:
        return sum(h.width for h in self.heads)

    @property
    def current(self) -> Head:
        return self.heads[-1]

    def trainable(self) -> list[Tensor]:
        return [t for h in self.heads if not h.frozen for t in (h.weight, h.bias)]


def standard_head_init(num_classes: int, dim: int, rng: np.random.Generator, dtype: str = "float64") -> np.ndarray:
    """Uniform(-1/sqrt(D), 1/sqrt(D)) like a default linear layer."""
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=(num_classes, dim)).astype(dtype)


def append_head(
    bank: HeadBank,
    num_classes: int,
    init: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    bias_init: np.ndarray | None = None,
) -> HeadBank:
    """Freeze every existing head and add a trainable one."""
    if num_classes < 1:
        raise ValueError("a head needs at least one class")
    if init is None:
        if rng is None:
            raise ValueError("standard head init needs an rng")
        init = standard_head_init(num_classes, bank.dim, rng, bank.dtype)
    init = np.array(init, dtype=bank.dtype)
    if init.shape != (num_classes, bank.dim):
        raise ShapeError(f"head init has shape {init.shape}, expected {(num_classes, bank.dim)}")
    bias = np.zeros(num_classes, dtype=bank.dtype) if bias_init is None else np.array(bias_init, dtype=bank.dtype)
    for h in bank.heads:
        h.freeze()
    bank.heads.append(Head(Tensor(init, requires_grad=True), Tensor(bias, requires_grad=True)))
    return bank


def head_forward(feature, bank: HeadBank) -> Tensor:
    """Logits over every seen class, heads concatenated in task order."""
    if not bank.heads:
        raise ValueError("head bank is empty")
    f = feature if isinstance(feature, Tensor) else Tensor(np.asarray(feature, dtype=bank.dtype))
    if f.shape[-1] != bank.dim:
        raise ShapeError(f"feature dim {f.shape[-1]} does not match head dim {bank.dim}")
    single = f.ndim == 1
    if single:
        f = f.reshape(1, bank.dim)
    parts = [add(matmul(f, transpose(h.weight)), h.bias) for h in bank.heads]
    logits = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return logits[0] if single else logits


# ---------------------------------------------------------------- prototypes


@dataclass
class PrototypeHead:
    classes: list[int]
    prototypes: np.ndarray  # (|Y|, D), row order follows ``classes``

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Cosine similarity between each query and each prototype."""
        q = np.atleast_2d(np.asarray(features, dtype=np.float64))
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        p = self.prototypes.astype(np.float64)
        pn = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
        return qn @ pn.T

    def predict(self, features: np.ndarray) -> np.ndarray:
        s = self.scores(features)
        return np.asarray(self.classes)[s.argmax(axis=1)]

    def extend(self, other: PrototypeHead) -> PrototypeHead:
        overlap = set(self.classes) & set(other.classes)
        if overlap:
            raise ValueError(f"classes already have prototypes: {sorted(overlap)}")
        return PrototypeHead(self.classes + other.classes, np.vstack([self.prototypes, other.prototypes]))

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class"] + [f"d{j}" for j in range(self.prototypes.shape[1])])
            for c, row in zip(self.classes, self.prototypes):
                w.writerow([c] + [repr(float(v)) for v in row])


def prototype_update(features_by_class: Mapping[int, Sequence[np.ndarray] | np.ndarray]) -> PrototypeHead:
    """One mean feature per class; classes kept in sorted order."""
    classes, rows = [], []
    for c in sorted(features_by_class):
        feats = np.asarray(features_by_class[c], dtype=np.float64)
        if feats.size == 0:
            raise ValueError(f"class {c} has no features")
        classes.append(int(c))
        rows.append(np.atleast_2d(feats).mean(axis=0))
    if not classes:
        raise ValueError("no classes given")
    return PrototypeHead(classes, np.vstack(rows))


def group_by_class(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): features[labels == c] for c in np.unique(labels)}
