from __future__ import annotations

import numpy as np
import pytest

from pectp.backbone import BackboneConfig, init_backbone
from pectp.baselines import (
    PromptPool,
    key_task_order,
    run_prompt_extending,
    run_prompt_fixed,
    run_simplecil,
    select_prompts,
    select_tasks,
)
from pectp.continual import MethodSpec, OptimizerConfig, count_learnable_params, run_method
from pectp.data import RecordingStream, StreamSpec, build_stream
from pectp.evaluation import final_average_accuracy
from pectp.numerics import Tensor

BB = BackboneConfig(num_blocks=2, embed_dim=16, num_heads=2, patch_grid=2, image_size=8)
STREAM = StreamSpec(num_tasks=3, classes_per_task=2, samples_per_class=10, image_size=8)
FAST = OptimizerConfig(epochs=2, batch_size=8)


def _spec(**kw):
    return MethodSpec(optimizer=FAST, prompt_length=2, **kw)


# ---------------------------------------------------------------- selection


def test_pool_of_one_always_selected():
    pool = PromptPool()
    p = Tensor(np.ones((2, 2, 4)))
    pool.add(5, p, np.array([1.0, 0.0, 0.0, 0.0]))
    for q in np.random.default_rng(0).normal(size=(10, 4)):
        task, prompts = select_prompts(q, pool)
        assert task == 5
        np.testing.assert_array_equal(prompts.data, p.data)


def test_orthogonal_keys_pick_matching_entry():
    keys = np.eye(4)
    pool = [(keys[j], Tensor(np.full((1, 1, 4), float(j)))) for j in range(4)]
    for j in range(4):
        task, prompts = select_prompts(3.0 * keys[j], pool)
        assert task == j + 1 and prompts.data[0, 0, 0] == j
    np.testing.assert_array_equal(select_tasks(keys[::-1], keys), [3, 2, 1, 0])


def test_empty_pool_is_an_error():
    with pytest.raises(ValueError):
        select_prompts(np.ones(4), PromptPool())
    with pytest.raises(ValueError):
        select_tasks(np.ones((1, 4)), np.zeros((0, 4)))


def test_key_task_order():
    assert key_task_order(4, 1) == [1, 2, 3, 4]
    assert key_task_order(4, 3) == [3, 1, 2, 4]
    with pytest.raises(ValueError):
        key_task_order(4, 5)


# ---------------------------------------------------------------- SimpleCIL


def test_simplecil_has_no_learnable_parameters():
    res = run_method(build_stream(STREAM), MethodSpec(variant="SimpleCIL"), init_backbone(BB), 0)
    assert res.overhead.learnable_params == 0
    assert res.overhead.prompt_number == 0


def test_simplecil_is_order_invariant_up_to_relabeling():
    stream = build_stream(STREAM)
    order = [3, 1, 2]
    a = run_simplecil(stream, init_backbone(BB))
    b = run_simplecil(stream.reordered(order), init_backbone(BB))
    for new_pos, old_task in enumerate(order, start=1):
        assert b[new_pos, 3] == a[old_task, 3]
    assert final_average_accuracy(a) == pytest.approx(final_average_accuracy(b), abs=1e-15)


def test_simplecil_beats_chance():
    a = run_simplecil(build_stream(STREAM), init_backbone(BB))
    assert final_average_accuracy(a) >= 1.0 / (STREAM.num_tasks * STREAM.classes_per_task)


def test_simplecil_is_rehearsal_free():
    rec = RecordingStream(build_stream(STREAM))
    run_method(rec, MethodSpec(variant="SimpleCIL"), init_backbone(BB), 0)
    assert rec.old_task_train_fetches() == []


# ---------------------------------------------------------------- prompt-fixed


def test_prompt_fixed_freezes_after_key_task():
    seen = []
    res = run_method(
        build_stream(STREAM), _spec(variant="PromptFixed"), init_backbone(BB), 0,
        on_task_end=lambda st: seen.append(st.prompts.P.data.copy()),
    )
    for p in seen[1:]:
        np.testing.assert_array_equal(p, seen[0])
    assert res.method == "PromptFixed-L1"
    assert set(res.matrix.cells) == {(i, t) for t in range(1, 4) for i in range(1, t + 1)}


def test_prompt_fixed_key_tasks_differ():
    stream = build_stream(STREAM)
    prompts = {}
    for key in (1, 2):
        run_method(stream, _spec(variant="PromptFixed", key_task=key), init_backbone(BB), 0,
                   on_task_end=lambda st, key=key: prompts.setdefault(key, st.prompts.P.data.copy()))
    assert not np.array_equal(prompts[1], prompts[2])
    m = run_prompt_fixed(stream, _spec(variant="PromptFixed", key_task=2), init_backbone(BB), 0)
    assert len(m.cells) == 6


# ---------------------------------------------------------------- prompt-extending


def test_prompt_extending_pool_grows_linearly():
    spec = _spec(variant="PromptExtending")
    sizes, params = [], []

    def record(st):
        sizes.append(len(st.pool))
        params.append(count_learnable_params(st, spec))

    res = run_method(build_stream(STREAM), spec, init_backbone(BB), 0, on_task_end=record)
    assert sizes == [1, 2, 3]
    per_set = BB.num_blocks * 2 * BB.embed_dim
    assert [o.prompt_params for o in params] == [per_set, 2 * per_set, 3 * per_set]
    assert [o.key_params for o in params] == [BB.embed_dim, 2 * BB.embed_dim, 3 * BB.embed_dim]
    assert len(res.selection) == 3
    assert res.selection[0] == 1.0
    assert all(0.0 <= s <= 1.0 for s in res.selection)


def test_run_prompt_extending_returns_matrix_and_selection():
    m, sel = run_prompt_extending(build_stream(STREAM), _spec(variant="PromptExtending"), init_backbone(BB), 0)
    assert len(m.cells) == 6 and len(sel) == 3
