"""Versioned binary checkpoints of an experiment state.

Layout (all integers little-endian)::

    b"PECTPCKP"  u32 version  u64 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 record_count
    per record: u16 name_len, name, u8 dtype_len, dtype ("<f8", ...),
                u8 ndim, u64 dims[ndim], u64 nbytes, payload

Training RNGs are derived from (seed, task, purpose), so the seed and the
task index are all the generator state a resume needs.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from pectp.backbone import BackboneConfig, PromptedBackbone, param_shapes
from pectp.continual import ExperimentState, MethodSpec
from pectp.evaluation import AccuracyMatrix
from pectp.heads import Head, HeadBank, PrototypeHead
from pectp.numerics import ShapeError, Tensor
from pectp.prompts import CrossTaskPrompts

CHECKPOINT_MAGIC = b"PECTPCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _records(state: ExperimentState) -> list[tuple[str, np.ndarray]]:
    recs = [(f"backbone/{k}", t.data) for k, t in state.backbone.named_parameters()]
    recs.append(("prompts/P", state.prompts.P.data))
    for i, h in enumerate(state.bank.heads):
        recs.append((f"heads/{i}/weight", h.weight.data))
        recs.append((f"heads/{i}/bias", h.bias.data))
    if state.prototypes is not None:
        recs.append(("prototypes", state.prototypes.prototypes))
    if state.pool is not None:
        for i, e in enumerate(state.pool.entries):
            recs.append((f"pool/{i}/prompts", e.prompts.data))
            recs.append((f"pool/{i}/key", e.key))
    return recs


def _metadata(state: ExperimentState) -> dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "seed": state.seed,
        "k": state.k,
        "backbone": state.backbone.config.to_dict(),
        "backbone_checksum": state.backbone.checksum(),
        "method": state.spec.to_dict(),
        "prompt_task_index": state.prompts.task_index,
        "prompts_trainable": state.prompts.P.requires_grad,
        "head_frozen": [h.frozen for h in state.bank.heads],
        "task_classes": state.task_classes,
        "matrix": state.matrix.to_counts(),
        "prototype_classes": None if state.prototypes is None else state.prototypes.classes,
        "pool_tasks": None if state.pool is None else [e.task_id for e in state.pool.entries],
        "selection": state.selection,
        "selection_times": state.selection_times,
        "epoch_times": state.epoch_times,
        "loss_log": state.loss_log,
    }


def dumps_checkpoint(state: ExperimentState) -> bytes:
    meta = json.dumps(_metadata(state), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    recs = _records(state)
    buf.write(struct.pack("<I", len(recs)))
    for name, arr in recs:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        payload = arr.astype(dt, copy=False).tobytes()
        nb, ds = name.encode("utf-8"), dt.str.encode("ascii")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", len(ds)) + ds)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def save_checkpoint(state: ExperimentState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(state))
    return path


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.off, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    r = _Reader(raw, source)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{source}: corrupt metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (dlen,) = r.unpack("<B")
        dtype = np.dtype(r.take(dlen).decode("ascii"))
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{source}: record {name!r} size does not match its shape")
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.off != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.off} trailing bytes")
    return meta, tensors


def load_checkpoint(path: str | Path, backbone: PromptedBackbone | None = None) -> ExperimentState:
    """Rebuild an :class:`ExperimentState`.

    When ``backbone`` is given it must match the stored one exactly;
    otherwise the stored weights are used.
    """
    from pectp.baselines import PromptPool
    from pectp.config import method_from_dict

    path = Path(path)
    meta, t = parse_checkpoint(path.read_bytes(), str(path))
    cfg = BackboneConfig(**meta["backbone"])
    if backbone is not None:
        if param_shapes(backbone.config) != param_shapes(cfg):
            raise ShapeError(f"{path}: checkpoint backbone {cfg} does not match the supplied {backbone.config}")
        if backbone.checksum() != meta["backbone_checksum"]:
            raise CheckpointError(f"{path}: supplied backbone weights differ from the checkpoint's")
    else:
        params = {k[len("backbone/"):]: v for k, v in t.items() if k.startswith("backbone/")}
        backbone = PromptedBackbone(cfg, params)
        if backbone.checksum() != meta["backbone_checksum"]:
            raise CheckpointError(f"{path}: backbone checksum mismatch")
    spec: MethodSpec = method_from_dict(meta["method"])
    P = Tensor(t["prompts/P"], requires_grad=meta["prompts_trainable"])
    prompts = CrossTaskPrompts(P, meta["prompt_task_index"])
    bank = HeadBank(cfg.embed_dim, dtype=cfg.dtype)
    for i, frozen in enumerate(meta["head_frozen"]):
        w, b = t[f"heads/{i}/weight"], t[f"heads/{i}/bias"]
        bank.heads.append(Head(Tensor(w, requires_grad=not frozen), Tensor(b, requires_grad=not frozen), frozen))
    state = ExperimentState(backbone, prompts, bank, int(meta["seed"]), spec)
    state.k = int(meta["k"])
    state.task_classes = [list(c) for c in meta["task_classes"]]
    state.matrix = AccuracyMatrix.from_counts(meta["matrix"])
    if meta["prototype_classes"] is not None:
        state.prototypes = PrototypeHead(list(meta["prototype_classes"]), t["prototypes"])
    if meta["pool_tasks"] is not None:
        state.pool = PromptPool()
        for i, task_id in enumerate(meta["pool_tasks"]):
            state.pool.add(task_id, Tensor(t[f"pool/{i}/prompts"]), t[f"pool/{i}/key"])
    state.selection = list(meta["selection"])
    state.selection_times = list(meta["selection_times"])
    state.epoch_times = list(meta["epoch_times"])
    state.loss_log = list(meta["loss_log"])
    return state
