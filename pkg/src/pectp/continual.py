"""Cross-task prompt training loop, evaluation and shared method plumbing."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from pectp.backbone import BackboneConfig, PromptedBackbone, init_backbone
from pectp.evaluation import AccuracyMatrix, OverheadReport, RunResult, median_spread
from pectp.heads import (
    HeadBank,
    PrototypeHead,
    append_head,
    group_by_class,
    head_forward,
    prototype_update,
    standard_head_init,
)
from pectp.numerics import Tensor, matmul, scale, sigmoid_bce, softmax_cross_entropy, transpose
from pectp.prompts import CrossTaskPrompts, PromptSnapshot, init_prompts, snapshot
from pectp.retention import OpgConfig, hrm_init, ipg, opg_terms, trim_prompt_rows

log = logging.getLogger(__name__)

VARIANTS = ("PECTP", "PlainCIL", "PromptFixed", "PromptExtending", "SimpleCIL")
HEAD_INITS = ("old", "zero", "uniform", "kaiming")
INFERENCE_MODES = ("heads", "prototypes")

# Per-dataset settings reported for the original ViT-B/16 experiments.
REPORTED_HYPERPARAMETERS = {
    "cifar": {"alpha": 1 / 3.5e5, "beta": 1 / 4e2},
    "cub": {"alpha": 1 / 8e3, "beta": 1 / 5e2},
    "imagenet-r": {"alpha": 1 / 4.5e4, "beta": 1 / 5e2},
    "imagenet-a": {"alpha": 1 / 2e4, "beta": 1 / 5e2},
    "objectnet": {"alpha": 1 / 2e4, "beta": 1 / 2e2},
    "omnibenchmark": {"alpha": 1 / 1.5e4, "beta": 1 / 1e2},
    "vtab": {"alpha": 1 / 9e4, "beta": 1 / 2e2},
}


class ClassOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd-momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 32
    cosine: bool = True

    def __post_init__(self):
        if self.kind != "sgd-momentum":
            raise ValueError(f"unsupported optimizer {self.kind!r}")
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be nonnegative")


@dataclass(frozen=True)
class MethodSpec:
    variant: str = "PECTP"
    alpha: float = 1.0
    beta: float = 1e-3
    gammas: tuple[float, ...] | None = None  # None -> gamma_i = 1
    opg: OpgConfig = field(default_factory=OpgConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    prompt_length: int = 5
    prompt_std: float = 0.02
    head_init: str = "old"
    hrm_include_bias: bool = False
    loss: str = "bce"
    key_task: int = 1
    inference: str = "prototypes"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.head_init not in HEAD_INITS:
            raise ValueError(f"head_init must be one of {HEAD_INITS}, got {self.head_init!r}")
        if self.loss not in ("bce", "ce"):
            raise ValueError(f"loss must be 'bce' or 'ce', got {self.loss!r}")
        if self.inference not in INFERENCE_MODES:
            raise ValueError(f"inference must be one of {INFERENCE_MODES}, got {self.inference!r}")
        if self.prompt_length <= 0:
            raise ValueError("prompt_length must be positive")
        if self.key_task < 1:
            raise ValueError("key_task is 1-based")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.variant == "PlainCIL" else self.alpha

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.variant == "PlainCIL" else self.beta

    def gamma(self, k: int) -> list[float]:
        """gamma_1..gamma_{k-1} for task k."""
        if self.gammas is None:
            return [1.0] * (k - 1)
        if len(self.gammas) < k - 1:
            raise ValueError(f"task {k} needs {k - 1} gammas, spec has {len(self.gammas)}")
        return list(self.gammas[: k - 1])

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["gammas"] = None if self.gammas is None else list(self.gammas)
        return d


class SGD:
    """SGD with momentum, coupled weight decay and per-step cosine decay."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimizerConfig, total_steps: int):
        self.params = list(params)
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.step_count = 0
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def lr(self) -> float:
        if not self.cfg.cosine:
            return self.cfg.learning_rate
        return 0.5 * self.cfg.learning_rate * (1.0 + np.cos(np.pi * self.step_count / self.total_steps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        lr = self.lr()
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad + self.cfg.weight_decay * p.data
            buf *= self.cfg.momentum
            buf += g
            p.data = p.data - lr * buf
        self.step_count += 1


@dataclass
class ExperimentState:
    backbone: PromptedBackbone
    prompts: CrossTaskPrompts
    bank: HeadBank
    seed: int
    spec: MethodSpec
    snapshot: PromptSnapshot | None = None
    task_classes: list[list[int]] = field(default_factory=list)
    matrix: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    k: int = 0  # tasks learned so far
    prototypes: PrototypeHead | None = None
    pool: Any = None  # PromptPool for the prompt-extending baseline
    selection: list[float] = field(default_factory=list)
    loss_log: list[dict[str, float]] = field(default_factory=list)
    epoch_times: list[float] = field(default_factory=list)
    selection_times: list[float] = field(default_factory=list)

    @property
    def seen_classes(self) -> list[int]:
        return [c for cls in self.task_classes for c in cls]


def new_state(backbone: PromptedBackbone, spec: MethodSpec, seed: int) -> ExperimentState:
    cfg = backbone.config
    prompts = init_prompts(
        cfg.num_blocks, spec.prompt_length, cfg.embed_dim, seed=_seed(seed, 0, 1), std=spec.prompt_std, dtype=cfg.dtype
    )
    return ExperimentState(backbone, prompts, HeadBank(cfg.embed_dim, dtype=cfg.dtype), seed, spec)


def _seed(seed: int, task: int, stream: int) -> list[int]:
    # independent RNG streams per (run seed, task, purpose)
    return [int(seed), int(task), int(stream)]


def task_rng(seed: int, task: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(_seed(seed, task, purpose))


# ---------------------------------------------------------------- losses


def _local_targets(y: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    index = {c: j for j, c in enumerate(classes)}
    return np.asarray([index[int(c)] for c in y], dtype=np.int64)


def classification_loss(feature: Tensor, y: np.ndarray, state: ExperimentState) -> Tensor:
    """Loss of the current task's head on current-task labels only."""
    head = state.bank.current
    logits = matmul(feature, transpose(head.weight)) + head.bias
    local = _local_targets(y, state.task_classes[-1])
    if state.spec.loss == "ce":
        return softmax_cross_entropy(logits, local)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(local)), local] = 1.0
    return sigmoid_bce(logits, onehot)


def loss_terms(
    x: np.ndarray,
    y: np.ndarray,
    state: ExperimentState,
    h_prev: np.ndarray | None = None,
) -> dict[str, Tensor]:
    """Unweighted terms of the total loss for one batch.

    Retention terms appear only once a snapshot exists (task k >= 2) and
    their coefficient is nonzero. ``h_prev`` may be supplied precomputed;
    otherwise the snapshot model is run on ``x``.
    """
    spec = state.spec
    feature, h_cur = state.backbone.forward(x, state.prompts.P)
    terms = {"cls": classification_loss(feature, y, state)}
    if state.snapshot is None:
        return terms
    if spec.effective_alpha > 0:
        terms["ipg"] = ipg(state.snapshot, state.prompts)
    if spec.effective_beta > 0:
        if h_prev is None:
            _, hp = state.backbone.forward(x, state.snapshot.P_prev)
            h_prev = hp.data
        if not spec.opg.include_prompt_rows:
            keep = 1 + state.backbone.config.num_patches
            h_cur = trim_prompt_rows(h_cur, keep)
            h_prev = h_prev[..., :keep, :]
        for name, t in opg_terms(h_prev, h_cur, spec.opg).items():
            terms[f"opg_{name}"] = t
    return terms


def combine_terms(terms: dict[str, Tensor], spec: MethodSpec) -> Tensor:
    total = terms["cls"]
    if "ipg" in terms:
        total = total + scale(terms["ipg"], spec.effective_alpha)
    for name, t in terms.items():
        if name.startswith("opg_"):
            w = getattr(spec.opg, f"{name[4:]}_weight") * spec.effective_beta
            total = total + scale(t, w)
    return total


def total_loss(x: np.ndarray, y: np.ndarray, state: ExperimentState, h_prev: np.ndarray | None = None) -> Tensor:
    """cls + alpha * IPG + beta * OPG for one batch."""
    return combine_terms(loss_terms(x, y, state, h_prev), state.spec)


# ---------------------------------------------------------------- training


def _check_new_classes(state: ExperimentState, classes: Sequence[int]) -> None:
    overlap = set(state.seen_classes) & set(int(c) for c in classes)
    if overlap:
        raise ClassOverlapError(f"classes {sorted(overlap)} already appeared in an earlier task")
    if len(set(classes)) != len(classes):
        raise ClassOverlapError("task lists a class twice")


def init_task_head(state: ExperimentState, num_classes: int, k: int) -> np.ndarray:
    spec = state.spec
    rng = task_rng(state.seed, k, 2)
    d = state.bank.dim
    if k == 1:
        return standard_head_init(num_classes, d, rng, state.bank.dtype)
    if spec.head_init == "old":
        prev = [h.weight.data for h in state.bank.heads]
        return hrm_init(prev, spec.gamma(k), width=num_classes)
    if spec.head_init == "zero":
        return np.zeros((num_classes, d), dtype=state.bank.dtype)
    if spec.head_init == "uniform":
        return standard_head_init(num_classes, d, rng, state.bank.dtype)
    return (rng.standard_normal((num_classes, d)) * np.sqrt(2.0 / d)).astype(state.bank.dtype)


def _head_bias_init(state: ExperimentState, num_classes: int, k: int) -> np.ndarray | None:
    spec = state.spec
    if k == 1 or spec.head_init != "old" or not spec.hrm_include_bias:
        return None
    prev = [h.bias.data[:, None] for h in state.bank.heads]
    return hrm_init(prev, spec.gamma(k), width=num_classes)[:, 0]


def fit(
    state: ExperimentState,
    x: np.ndarray,
    y: np.ndarray,
    params: Sequence[Tensor],
    k: int,
    use_snapshot_cache: bool = True,
) -> None:
    """Minibatch SGD over (x, y) on ``params`` with the total loss."""
    cfg = state.spec.optimizer
    n = len(y)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    opt = SGD(params, cfg, steps_per_epoch * cfg.epochs)
    rng = task_rng(state.seed, k, 3)
    h_prev_all = None
    if use_snapshot_cache and state.snapshot is not None and state.spec.effective_beta > 0:
        h_prev_all = _snapshot_stacks(state, x)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            hp = None if h_prev_all is None else h_prev_all[idx]
            terms = loss_terms(x[idx], y[idx], state, hp)
            loss = combine_terms(terms, state.spec)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for name, t in terms.items():
                sums[name] = sums.get(name, 0.0) + float(t.data) * len(idx)
            sums["total"] = sums.get("total", 0.0) + float(loss.data) * len(idx)
        state.epoch_times.append(time.perf_counter() - t0)
        state.loss_log.append({"task": k, "epoch": epoch + 1, **{kk: v / n for kk, v in sorted(sums.items())}})


def _snapshot_stacks(state: ExperimentState, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    frozen = Tensor(state.snapshot.P_prev.data)
    parts = []
    for s in range(0, len(x), chunk):
        _, h = state.backbone.forward(x[s:s + chunk], frozen)
        parts.append(h.data)
    return np.concatenate(parts, axis=0)


def train_task(state: ExperimentState, x: np.ndarray, y: np.ndarray, classes: Sequence[int]) -> ExperimentState:
    """Learn one task with the single shared prompt set.

    Task 1 trains prompts and a freshly initialized head. Later tasks
    initialize the head from the frozen earlier heads, snapshot the prompts
    and then train prompts and the new head with the retention terms.
    """
    if len(y) == 0:
        raise ValueError("task has no training samples")
    classes = [int(c) for c in classes]
    _check_new_classes(state, classes)
    if not set(int(c) for c in np.unique(y)) <= set(classes):
        raise ValueError("training labels fall outside the task's class set")
    k = state.k + 1
    checksum = state.backbone.checksum()
    init = init_task_head(state, len(classes), k)
    append_head(state.bank, len(classes), init=init, bias_init=_head_bias_init(state, len(classes), k))
    state.task_classes.append(classes)
    state.snapshot = snapshot(state.prompts) if k >= 2 else None
    state.prompts.P.requires_grad = True
    head = state.bank.current
    fit(state, x, y, [state.prompts.P, head.weight, head.bias], k)
    state.prompts.task_index = k
    state.k = k
    if state.backbone.checksum() != checksum:
        raise RuntimeError("backbone weights changed during training")
    return state


# ---------------------------------------------------------------- inference


def head_logits(features: np.ndarray, bank: HeadBank) -> np.ndarray:
    return head_forward(Tensor(features), bank).data


def predict_with_heads(state: ExperimentState, x: np.ndarray, prompts: Tensor | None = None) -> np.ndarray:
    p = state.prompts.P if prompts is None else prompts
    feats = state.backbone.features(x, p)
    logits = head_logits(feats, state.bank)
    labels = np.asarray(state.seen_classes)
    return labels[logits.argmax(axis=1)]


def evaluate_session(state: ExperimentState, stream, session: int, predict: Callable[[np.ndarray], np.ndarray]) -> None:
    for i in range(1, session + 1):
        xt, yt = stream.test_split(i)
        pred = predict(xt)
        state.matrix.record(i, session, int((pred == yt).sum()), len(yt))


def run_sequence(
    stream,
    spec: MethodSpec,
    backbone: PromptedBackbone | BackboneConfig,
    seed: int = 0,
    state: ExperimentState | None = None,
    stop_after: int | None = None,
    on_task_end: Callable[[ExperimentState], None] | None = None,
) -> AccuracyMatrix:
    """Learn every task of ``stream`` in order, filling the accuracy matrix."""
    return run_method(stream, spec, backbone, seed, state, stop_after, on_task_end).matrix


def run_method(
    stream,
    spec: MethodSpec,
    backbone: PromptedBackbone | BackboneConfig,
    seed: int = 0,
    state: ExperimentState | None = None,
    stop_after: int | None = None,
    on_task_end: Callable[[ExperimentState], None] | None = None,
) -> RunResult:
    """Dispatch on ``spec.variant`` and return the full run record."""
    if isinstance(backbone, BackboneConfig):
        backbone = init_backbone(backbone)
    if spec.variant in ("PECTP", "PlainCIL"):
        state = state or new_state(backbone, spec, seed)
        _loop(stream, state, _learn_cross_task, _cross_task_predictor, stop_after, on_task_end)
        return _result(state)
    from pectp import baselines

    return baselines.run_baseline(stream, spec, backbone, seed, state, stop_after, on_task_end)


def _learn_cross_task(state: ExperimentState, stream, k: int) -> None:
    x, y = stream.train_split(k)
    train_task(state, x, y, stream.class_ids(k))
    if state.spec.inference == "prototypes":
        # class means under the prompts just learned; old means stay as stored
        head = prototype_update(group_by_class(state.backbone.features(x, state.prompts.P), y))
        state.prototypes = head if state.prototypes is None else state.prototypes.extend(head)


def _cross_task_predictor(state: ExperimentState) -> Callable[[np.ndarray], np.ndarray]:
    if state.spec.inference == "prototypes":
        return lambda x: state.prototypes.predict(state.backbone.features(x, state.prompts.P))
    return lambda x: predict_with_heads(state, x)


def _loop(stream, state, learn, predictor, stop_after, on_task_end) -> None:
    last = len(stream) if stop_after is None else min(stop_after, len(stream))
    for k in range(state.k + 1, last + 1):
        if hasattr(stream, "session"):
            stream.session = k
        log.info("task %d/%d (%s)", k, len(stream), state.spec.variant)
        learn(state, stream, k)
        evaluate_session(state, stream, k, predictor(state))
        if on_task_end is not None:
            on_task_end(state)


def _result(state: ExperimentState) -> RunResult:
    return RunResult(
        method=method_label(state.spec),
        seed=state.seed,
        matrix=state.matrix,
        overhead=count_learnable_params(state, state.spec),
        selection=list(state.selection) if state.spec.variant == "PromptExtending" else None,
        loss_log=list(state.loss_log),
        state=state,
    )


def method_label(spec: MethodSpec) -> str:
    if spec.variant == "PromptFixed":
        return f"PromptFixed-L{spec.key_task}"
    return spec.variant


# ---------------------------------------------------------------- overheads


def count_learnable_params(state: ExperimentState, spec: MethodSpec) -> OverheadReport:
    """Closed-form parameter accounting for the state's method."""
    cfg = state.backbone.config
    n, d = cfg.num_blocks, cfg.embed_dim
    lp = spec.prompt_length
    head = 0
    if spec.variant in ("PECTP", "PlainCIL", "PromptExtending") and len(state.bank):
        cur = state.bank.current
        head = cur.weight.data.size + cur.bias.data.size
    if spec.variant in ("PECTP", "PlainCIL", "PromptFixed"):
        prompt_number, prompt_params, key_params = n * lp, n * lp * d, 0
    elif spec.variant == "PromptExtending":
        sets = 0 if state.pool is None else len(state.pool)
        prompt_number, prompt_params, key_params = sets * n * lp, sets * n * lp * d, sets * d
    else:
        prompt_number = prompt_params = key_params = 0
    tt, tts = median_spread(state.epoch_times)
    st, sts = median_spread(state.selection_times)
    return OverheadReport(
        method=method_label(spec),
        prompt_number=prompt_number,
        prompt_params=prompt_params,
        key_params=key_params,
        head_params=head,
        learnable_params=prompt_params + key_params + head,
        training_time_per_epoch=tt,
        training_time_spread=tts,
        selection_time=st if spec.variant == "PromptExtending" else 0.0,
        selection_time_spread=sts if spec.variant == "PromptExtending" else 0.0,
    )


def with_variant(spec: MethodSpec, **changes) -> MethodSpec:
    return replace(spec, **changes)
