"""Tiny frozen ViT encoder with per-block (deep) prompt insertion."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from pectp.numerics import (
    LAYER_NORM_EPS,
    ShapeError,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    stack,
    transpose,
)


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 4
    embed_dim: int = 32
    num_heads: int = 4
    patch_grid: int = 4
    image_size: int = 16
    channels: int = 1
    mlp_ratio: float = 2.0
    seed: int = 0
    init_std: float | None = None  # None -> 1/sqrt(fan_in)
    token_std: float = 0.02
    layer_norm_eps: float = LAYER_NORM_EPS
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("num_blocks", "embed_dim", "num_heads", "patch_grid", "image_size", "channels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"BackboneConfig.{name} must be a positive integer, got {v!r}")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.image_size % self.patch_grid:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_grid {self.patch_grid}"
            )
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.layer_norm_eps <= 0:
            raise ValueError("layer_norm_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_patches(self) -> int:
        return self.patch_grid**2

    @property
    def patch_size(self) -> int:
        return self.image_size // self.patch_grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


BLOCK_PARAMS = (
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
    "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2",
)


class PromptedBackbone:
    """Holds all encoder weights as :class:`Tensor` leaves.

    ``frozen`` only controls ``requires_grad`` on the weights; the training
    loop never hands backbone tensors to an optimizer either way.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray], frozen: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=config.dtype), requires_grad=not frozen) for k, v in params.items()
        }
        self._frozen = frozen
        expected = set(param_shapes(config))
        if set(self.params) != expected:
            raise ValueError("backbone parameter names do not match config")
        for name, shp in param_shapes(config).items():
            if self.params[name].shape != shp:
                raise ShapeError(
                    f"parameter {name} has shape {self.params[name].shape}, config expects {shp}"
                )

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        for t in self.params.values():
            t.requires_grad = not self._frozen

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for k in sorted(self.params):
            yield k, self.params[k]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def block(self, i: int) -> dict[str, Tensor]:
        return {k: self.params[f"blocks.{i}.{k}"] for k in BLOCK_PARAMS}

    # ---------------------------------------------------------------- forward

    def embed(self, x: np.ndarray) -> Tensor:
        """Patch tokens plus positional embedding, shape (B, L_g, D)."""
        cfg = self.config
        x = np.asarray(x, dtype=cfg.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images of shape (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got {x.shape}"
            )
        b, g, ps = x.shape[0], cfg.patch_grid, cfg.patch_size
        patches = (
            x.reshape(b, cfg.channels, g, ps, g, ps)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(b, g * g, cfg.patch_dim)
        )
        tokens = add(matmul(Tensor(patches), self.params["patch_w"]), self.params["patch_b"])
        return add(tokens, self.params["pos"])

    def block_forward(self, i: int, d: Tensor) -> Tensor:
        """Pre-norm transformer block on d of shape (S, D) or (B, S, D)."""
        cfg = self.config
        squeeze = d.ndim == 2
        if squeeze:
            d = reshape(d, (1,) + d.shape)
        if d.ndim != 3 or d.shape[-1] != cfg.embed_dim:
            raise ShapeError(f"block input must be (B, S, {cfg.embed_dim}), got {d.shape}")
        b, s, dim = d.shape
        nh = cfg.num_heads
        dh = dim // nh
        p = self.block(i)
        eps = cfg.layer_norm_eps

        h = layer_norm(d, p["ln1_g"], p["ln1_b"], eps)
        qkv = add(matmul(h, p["w_qkv"]), p["b_qkv"])
        qkv = transpose(reshape(qkv, (b, s, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(dh)))
        o = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, s, dim))
        d = add(d, add(matmul(o, p["w_o"]), p["b_o"]))
        m = layer_norm(d, p["ln2_g"], p["ln2_b"], eps)
        m = add(matmul(gelu(add(matmul(m, p["w_fc1"]), p["b_fc1"])), p["w_fc2"]), p["b_fc2"])
        out = add(d, m)
        return reshape(out, (s, dim)) if squeeze else out

    def forward(self, x: np.ndarray, prompts: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Run the encoder with deep prompts.

        Returns ``(cls_feature, stack)``: cls feature (B, D) and the
        per-block outputs (B, N, 1+L_g+L_p, D). Block i's prompt-position
        outputs are kept in the stack but replaced by ``prompts[i+1]`` at
        the next block input. A single image gives unbatched shapes.
        """
        cfg = self.config
        single = np.ndim(x) == 3
        e = self.embed(x)
        b = e.shape[0]
        n, dim, lg = cfg.num_blocks, cfg.embed_dim, cfg.num_patches
        if prompts is not None and (prompts.ndim != 3 or prompts.shape[0] != n or prompts.shape[2] != dim):
            raise ShapeError(f"prompts must have shape ({n}, L_p, {dim}), got {prompts.shape}")
        zeros_cls = Tensor(np.zeros((b, 1, dim), dtype=cfg.dtype))
        seq = concat([add(zeros_cls, self.params["cls"]), e], axis=1)
        outputs = []
        for i in range(n):
            if prompts is not None:
                lp = prompts.shape[1]
                p_i = add(Tensor(np.zeros((b, lp, dim), dtype=cfg.dtype)), prompts[i])
                d_i = concat([seq, p_i], axis=1)
            else:
                d_i = seq
            out = self.block_forward(i, d_i)
            outputs.append(out)
            seq = out[:, : 1 + lg]
        h = stack(outputs, axis=1)
        cls_feature = outputs[-1][:, 0]
        if single:
            return cls_feature[0], h[0]
        return cls_feature, h

    def features(self, x: np.ndarray, prompts: Tensor | None = None, batch_size: int = 256) -> np.ndarray:
        """Gradient-free cls features as a plain array, evaluated in chunks."""
        x = np.asarray(x)
        frozen_prompts = None if prompts is None else Tensor(prompts.data)
        out = []
        for start in range(0, len(x), batch_size):
            f, _ = self.forward(x[start:start + batch_size], frozen_prompts)
            out.append(f.data)
        if not out:
            return np.zeros((0, self.config.embed_dim), dtype=self.config.dtype)
        return np.concatenate(out, axis=0)


def param_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, hdim = cfg.embed_dim, cfg.mlp_dim
    shapes = {
        "patch_w": (cfg.patch_dim, d),
        "patch_b": (d,),
        "pos": (cfg.num_patches, d),
        "cls": (1, d),
    }
    per_block = {
        "ln1_g": (d,), "ln1_b": (d,),
        "w_qkv": (d, 3 * d), "b_qkv": (3 * d,),
        "w_o": (d, d), "b_o": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "w_fc1": (d, hdim), "b_fc1": (hdim,),
        "w_fc2": (hdim, d), "b_fc2": (d,),
    }
    for i in range(cfg.num_blocks):
        for k, v in per_block.items():
            shapes[f"blocks.{i}.{k}"] = v
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_backbone(config: BackboneConfig) -> PromptedBackbone:
    """Seeded random weights standing in for a pretrained encoder; frozen."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name, shp in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("pos", "cls"):
            params[name] = _trunc_normal(rng, shp, config.token_std)
        elif leaf.endswith("_g"):
            params[name] = np.ones(shp)
        elif len(shp) == 1:
            params[name] = np.zeros(shp)
        else:
            std = config.init_std if config.init_std is not None else 1.0 / np.sqrt(shp[0])
            params[name] = rng.standard_normal(shp) * std
    return PromptedBackbone(config, params, frozen=True)
