"""Comparison methods sharing the backbone, stream and evaluation path.

* SimpleCIL: no training; cosine prototypes on prompt-free features.
* PromptFixed (Lx): prompts and a head trained on one key task only, then
  frozen; every class gets a prototype from the prompted features.
* PromptExtending: a fresh prompt set per task kept in a pool, chosen at
  inference by matching the prompt-free query to per-task mean keys.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pectp.backbone import PromptedBackbone
from pectp.continual import (
    ExperimentState,
    MethodSpec,
    _check_new_classes,
    _loop,
    _result,
    fit,
    head_logits,
    new_state,
    task_rng,
    train_task,
)
from pectp.evaluation import RunResult, median_spread
from pectp.heads import append_head, group_by_class, prototype_update, standard_head_init
from pectp.numerics import Tensor
from pectp.prompts import init_prompts


@dataclass
class PoolEntry:
    task_id: int
    prompts: Tensor
    key: np.ndarray


@dataclass
class PromptPool:
    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, task_id: int, prompts: Tensor, key: np.ndarray) -> None:
        self.entries.append(PoolEntry(task_id, Tensor(prompts.data.copy()), np.asarray(key, dtype=np.float64)))

    def keys(self) -> np.ndarray:
        return np.vstack([e.key for e in self.entries])


def _normalize(a: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)


def select_tasks(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Row index of the most cosine-similar key for each query."""
    if len(keys) == 0:
        raise ValueError("prompt pool is empty")
    return (_normalize(queries) @ _normalize(keys).T).argmax(axis=1)


def select_prompts(query_feature: np.ndarray, pool: PromptPool | Sequence[tuple[np.ndarray, Tensor]]):
    """(task_id, prompt set) of the pool entry whose key best matches the query."""
    if isinstance(pool, PromptPool):
        entries = [(e.task_id, e.key, e.prompts) for e in pool.entries]
    else:
        entries = [(i + 1, key, p) for i, (key, p) in enumerate(pool)]
    if not entries:
        raise ValueError("prompt pool is empty")
    j = int(select_tasks(np.asarray(query_feature)[None], np.vstack([e[1] for e in entries]))[0])
    return entries[j][0], entries[j][2]


def run_baseline(stream, spec: MethodSpec, backbone: PromptedBackbone, seed, state, stop_after, on_task_end) -> RunResult:
    runners = {
        "SimpleCIL": _run_simplecil,
        "PromptFixed": _run_prompt_fixed,
        "PromptExtending": _run_prompt_extending,
    }
    return runners[spec.variant](stream, spec, backbone, seed, state, stop_after, on_task_end)


def _prototype_predictor(state: ExperimentState, prompts: Tensor | None) -> Callable:
    def predict(x):
        return state.prototypes.predict(state.backbone.features(x, prompts))

    return predict


def _add_prototypes(state: ExperimentState, x: np.ndarray, y: np.ndarray, prompts: Tensor | None) -> None:
    head = prototype_update(group_by_class(state.backbone.features(x, prompts), y))
    state.prototypes = head if state.prototypes is None else state.prototypes.extend(head)


# ---------------------------------------------------------------- SimpleCIL


def _run_simplecil(stream, spec, backbone, seed, state, stop_after, on_task_end) -> RunResult:
    state = state or new_state(backbone, spec, seed)

    def learn(st, s, k):
        x, y = s.train_split(k)
        classes = s.class_ids(k)
        _check_new_classes(st, classes)
        st.task_classes.append(list(classes))
        _add_prototypes(st, x, y, None)
        st.k = k

    _loop(stream, state, learn, lambda st: _prototype_predictor(st, None), stop_after, on_task_end)
    return _result(state)


def run_simplecil(stream, backbone: PromptedBackbone, seed: int = 0):
    spec = MethodSpec(variant="SimpleCIL")
    return _run_simplecil(stream, spec, backbone, seed, None, None, None).matrix


# ---------------------------------------------------------------- prompt-fixed


def key_task_order(num_tasks: int, key_task: int) -> list[int]:
    """Task order that puts ``key_task`` first and keeps the rest in order."""
    if not 1 <= key_task <= num_tasks:
        raise ValueError(f"key_task {key_task} outside 1..{num_tasks}")
    return [key_task] + [t for t in range(1, num_tasks + 1) if t != key_task]


def _run_prompt_fixed(stream, spec, backbone, seed, state, stop_after, on_task_end) -> RunResult:
    if spec.key_task != 1:
        stream = stream.reordered(key_task_order(len(stream), spec.key_task))
    state = state or new_state(backbone, spec, seed)

    def learn(st, s, k):
        x, y = s.train_split(k)
        classes = s.class_ids(k)
        if k == 1:
            train_task(st, x, y, classes)
            st.prompts.P.requires_grad = False
            st.snapshot = None
        else:
            _check_new_classes(st, classes)
            st.task_classes.append(list(classes))
            st.k = k
        _add_prototypes(st, x, y, st.prompts.P)

    _loop(stream, state, learn, lambda st: _prototype_predictor(st, st.prompts.P), stop_after, on_task_end)
    return _result(state)


def run_prompt_fixed(stream, spec: MethodSpec, backbone: PromptedBackbone, seed: int = 0):
    return _run_prompt_fixed(stream, spec, backbone, seed, None, None, None).matrix


# ---------------------------------------------------------------- prompt-extending


def _run_prompt_extending(stream, spec, backbone, seed, state, stop_after, on_task_end) -> RunResult:
    state = state or new_state(backbone, spec, seed)
    if state.pool is None:
        state.pool = PromptPool()
    cfg = backbone.config

    def learn(st, s, k):
        x, y = s.train_split(k)
        classes = [int(c) for c in s.class_ids(k)]
        _check_new_classes(st, classes)
        st.prompts = init_prompts(
            cfg.num_blocks, spec.prompt_length, cfg.embed_dim, seed=[st.seed, k, 1], std=spec.prompt_std, dtype=cfg.dtype
        )
        rng = task_rng(st.seed, k, 2)
        append_head(st.bank, len(classes), init=standard_head_init(len(classes), cfg.embed_dim, rng, cfg.dtype))
        st.task_classes.append(classes)
        st.snapshot = None
        head = st.bank.current
        fit(st, x, y, [st.prompts.P, head.weight, head.bias], k)
        st.prompts.task_index = k
        st.pool.add(k, st.prompts.P, st.backbone.features(x).mean(axis=0))
        st.k = k

    def predictor(st):
        return lambda x: _extending_predict(st, x)[0]

    def evaluate_and_select(st):
        _record_selection(st, stream)
        if on_task_end is not None:
            on_task_end(st)

    _loop(stream, state, learn, predictor, stop_after, evaluate_and_select)
    return _result(state)


def _extending_predict(state: ExperimentState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pool = state.pool
    queries = state.backbone.features(x)
    chosen = select_tasks(queries, pool.keys())
    labels = np.asarray(state.seen_classes)
    pred = np.empty(len(x), dtype=labels.dtype)
    for j in np.unique(chosen):
        idx = np.flatnonzero(chosen == j)
        feats = state.backbone.features(x[idx], pool.entries[j].prompts)
        pred[idx] = labels[head_logits(feats, state.bank).argmax(axis=1)]
    return pred, np.asarray([pool.entries[j].task_id for j in chosen])


def _record_selection(state: ExperimentState, stream, repeats: int = 3) -> None:
    predicted, truth = [], []
    for i in range(1, state.k + 1):
        xt, _ = stream.test_split(i)
        truth.append(np.full(len(xt), i))
        predicted.append(xt)
    xs = np.concatenate(predicted)
    keys = state.pool.keys()
    times = []
    chosen = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        chosen = select_tasks(state.backbone.features(xs), keys)
        times.append(time.perf_counter() - t0)
    state.selection_times = [median_spread(times)[0]]
    ids = np.asarray([state.pool.entries[j].task_id for j in chosen])
    truth_all = np.concatenate(truth)
    state.selection.append(float((ids == truth_all).sum()) / len(truth_all))


def run_prompt_extending(stream, spec: MethodSpec, backbone: PromptedBackbone, seed: int = 0):
    res = _run_prompt_extending(stream, spec, backbone, seed, None, None, None)
    return res.matrix, res.selection
