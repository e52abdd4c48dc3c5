"""Seeded synthetic class-incremental task streams.

Each class is a 2-D sinusoid grating with its own spatial frequency,
orientation and phase. Samples add phase jitter and Gaussian pixel noise.

With ``task_bands`` on, the classes of task t draw their frequency from
the t-th of ``num_tasks`` equal slices of ``freq_range``, so tasks differ
in their statistics. Off, every class draws from the whole range and tasks
overlap. Class data is fixed when the stream is built; reordering tasks
afterwards never changes it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

STREAM_MAGIC = b"PECTPSTR"
STREAM_VERSION = 1


class StreamFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    num_tasks: int = 5
    classes_per_task: int = 5
    samples_per_class: int = 100
    seed: int = 0
    noise: float = 0.3
    phase_jitter: float = 0.3
    freq_range: tuple[float, float] = (0.6, 6.1)
    task_bands: bool = True
    image_size: int = 16
    channels: int = 1
    train_fraction: float = 0.8
    class_order_seed: int | None = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["freq_range"] = list(self.freq_range)
        return d


@dataclass
class Task:
    class_ids: list[int]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


@dataclass
class TaskStream:
    tasks: list[Task]
    classes_per_task: int
    image_size: int
    channels: int
    spec: StreamSpec | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    def train_split(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Training data of task k (1-based)."""
        t = self.tasks[k - 1]
        return t.x_train, t.y_train

    def test_split(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        t = self.tasks[k - 1]
        return t.x_test, t.y_test

    def class_ids(self, k: int) -> list[int]:
        return list(self.tasks[k - 1].class_ids)

    def reordered(self, order: Sequence[int]) -> TaskStream:
        """New stream with tasks in ``order`` (1-based task indices)."""
        if sorted(order) != list(range(1, len(self.tasks) + 1)):
            raise ValueError(f"order must be a permutation of 1..{len(self.tasks)}, got {list(order)}")
        return replace(self, tasks=[self.tasks[i - 1] for i in order])


def shuffle_classes(class_ids: Sequence[int], seed: int) -> list[int]:
    """Deterministic seeded permutation."""
    ids = list(class_ids)
    if not ids:
        raise ValueError("cannot shuffle an empty class list")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in perm]


def class_template(class_id: int, spec: StreamSpec, band: int | None = None) -> dict[str, float]:
    """Grating parameters of a class; ``band`` picks a frequency slice."""
    rng = np.random.default_rng([spec.seed, 7919, class_id])
    lo, hi = spec.freq_range
    tpl = {
        "freq": float(rng.uniform(lo, hi)),
        "theta": float(rng.uniform(0.0, np.pi)),
        "phase": float(rng.uniform(0.0, 2 * np.pi)),
        "channel_gain": rng.uniform(0.5, 1.0, size=spec.channels).tolist(),
    }
    if band is not None:
        if not 0 <= band < spec.num_tasks:
            raise ValueError(f"band {band} outside 0..{spec.num_tasks - 1}")
        width = (hi - lo) / spec.num_tasks
        brng = np.random.default_rng([spec.seed, 31, class_id])
        tpl["freq"] = float(brng.uniform(lo + width * band, lo + width * (band + 1)))
    return tpl


def render_class(class_id: int, n: int, spec: StreamSpec, band: int | None = None) -> np.ndarray:
    """``n`` samples of one class, float32, shape (n, C, S, S)."""
    tpl = class_template(class_id, spec, band)
    rng = np.random.default_rng([spec.seed, 104729, class_id])
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    proj = xx * np.cos(tpl["theta"]) + yy * np.sin(tpl["theta"])
    jitter = rng.normal(0.0, spec.phase_jitter, size=(n, 1, 1, 1))
    gains = np.asarray(tpl["channel_gain"]).reshape(1, -1, 1, 1)
    base = np.sin(2 * np.pi * tpl["freq"] * proj[None, None] / s + tpl["phase"] + jitter) * gains
    noise = rng.normal(0.0, spec.noise, size=(n, spec.channels, s, s))
    return (base + noise).astype(np.float32)


def make_synthetic_stream(
    num_tasks: int,
    classes_per_task: int,
    samples_per_class: int,
    seed: int,
    **kwargs,
) -> TaskStream:
    spec = StreamSpec(
        num_tasks=num_tasks,
        classes_per_task=classes_per_task,
        samples_per_class=samples_per_class,
        seed=seed,
        **kwargs,
    )
    return build_stream(spec)


def build_stream(spec: StreamSpec) -> TaskStream:
    for name in ("num_tasks", "classes_per_task", "samples_per_class", "image_size", "channels"):
        if getattr(spec, name) <= 0:
            raise ValueError(f"{name} must be positive, got {getattr(spec, name)}")
    lo, hi = spec.freq_range
    if not 0.0 < lo < hi:
        raise ValueError(f"freq_range must satisfy 0 < low < high, got {spec.freq_range}")
    if not 0.0 < spec.train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(spec.samples_per_class * spec.train_fraction))
    if n_train < 1 or n_train >= spec.samples_per_class:
        raise ValueError("samples_per_class too small for a train/test split")
    total = spec.num_tasks * spec.classes_per_task
    order_seed = spec.seed if spec.class_order_seed is None else spec.class_order_seed
    order = shuffle_classes(range(total), order_seed)
    tasks = []
    for t in range(spec.num_tasks):
        ids = order[t * spec.classes_per_task:(t + 1) * spec.classes_per_task]
        xtr, ytr, xte, yte = [], [], [], []
        for c in ids:
            x = render_class(c, spec.samples_per_class, spec, t if spec.task_bands else None)
            xtr.append(x[:n_train])
            xte.append(x[n_train:])
            ytr.append(np.full(n_train, c, dtype=np.int64))
            yte.append(np.full(spec.samples_per_class - n_train, c, dtype=np.int64))
        tasks.append(
            Task(list(ids), np.concatenate(xtr), np.concatenate(ytr), np.concatenate(xte), np.concatenate(yte))
        )
    return TaskStream(tasks, spec.classes_per_task, spec.image_size, spec.channels, spec)


# ---------------------------------------------------------------- access probe


@dataclass
class RecordingStream:
    """Wraps a stream and logs every split fetch with the active session."""

    stream: TaskStream
    session: int = 0
    log: list[tuple[int, str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stream)

    def __getattr__(self, name):
        return getattr(self.stream, name)

    def train_split(self, k: int):
        self.log.append((self.session, "train", k))
        return self.stream.train_split(k)

    def test_split(self, k: int):
        self.log.append((self.session, "test", k))
        return self.stream.test_split(k)

    def old_task_train_fetches(self) -> list[tuple[int, str, int]]:
        return [e for e in self.log if e[1] == "train" and e[2] < e[0]]


# ---------------------------------------------------------------- binary format
# header: magic, u32 version, u32 num_tasks, u32 classes_per_task,
#         u32 channels, u32 image_size
# per task: u32 num_classes, u32 n_train, u32 n_test, i32 class ids,
#           f32 x_train, i32 y_train, f32 x_test, i32 y_test (little-endian)

_HEADER = struct.Struct("<8sIIIII")
_TASK = struct.Struct("<III")


def export_stream(stream: TaskStream, path: str | Path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(
            _HEADER.pack(
                STREAM_MAGIC, STREAM_VERSION, len(stream.tasks), stream.classes_per_task,
                stream.channels, stream.image_size,
            )
        )
        for t in stream.tasks:
            fh.write(_TASK.pack(len(t.class_ids), len(t.y_train), len(t.y_test)))
            fh.write(np.asarray(t.class_ids, dtype="<i4").tobytes())
            fh.write(np.asarray(t.x_train, dtype="<f4").tobytes())
            fh.write(np.asarray(t.y_train, dtype="<i4").tobytes())
            fh.write(np.asarray(t.x_test, dtype="<f4").tobytes())
            fh.write(np.asarray(t.y_test, dtype="<i4").tobytes())


def import_stream(path: str | Path) -> TaskStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StreamFormatError(f"{path}: truncated header")
    magic, version, num_tasks, cpt, channels, size = _HEADER.unpack_from(raw, 0)
    if magic != STREAM_MAGIC:
        raise StreamFormatError(f"{path}: not a stream file")
    if version != STREAM_VERSION:
        raise StreamFormatError(f"{path}: stream version {version}, reader supports {STREAM_VERSION}")
    off = _HEADER.size
    pix = channels * size * size

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal off
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise StreamFormatError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += nbytes
        return arr

    tasks = []
    for _ in range(num_tasks):
        if off + _TASK.size > len(raw):
            raise StreamFormatError(f"{path}: truncated task header")
        nc, ntr, nte = _TASK.unpack_from(raw, off)
        off += _TASK.size
        ids = take("<i4", nc).astype(int).tolist()
        xtr = take("<f4", ntr * pix).reshape(ntr, channels, size, size).astype(np.float32)
        ytr = take("<i4", ntr).astype(np.int64)
        xte = take("<f4", nte * pix).reshape(nte, channels, size, size).astype(np.float32)
        yte = take("<i4", nte).astype(np.int64)
        tasks.append(Task(ids, xtr, ytr, xte, yte))
    if off != len(raw):
        raise StreamFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return TaskStream(tasks, cpt, size, channels)
