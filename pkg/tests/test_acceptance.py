"""Acceptance criteria. Each test records one PASS/FAIL line, printed at
the end of the session. The multi-seed trend runs are marked slow."""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from pectp import cli
from pectp.backbone import BackboneConfig, init_backbone
from pectp.config import DEFAULT_CONFIG, config_from_dict, load_config
from pectp.continual import MethodSpec, OptimizerConfig, count_learnable_params, run_method
from pectp.data import RecordingStream, StreamSpec, build_stream
from pectp.evaluation import (
    AccuracyMatrix,
    cumulative_average_accuracy,
    emit_report,
    final_average_accuracy,
)
from pectp.numerics import Tensor
from pectp.prompts import init_prompts, snapshot
from pectp.retention import (
    hrm_init,
    ipg,
    opg_block_wise,
    opg_dimension_wise,
    opg_patch_wise,
    opg_point_wise,
)

from .oracles import loop_cumulative_average, loop_final_average

SEEDS = range(5)
POOLED = {"block": opg_block_wise, "patch": opg_patch_wise, "dimension": opg_dimension_wise}
POOLED_AXIS = {"block": -3, "patch": -2, "dimension": -1}


@contextmanager
def criterion(log, n, title):
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        log[n] = f"criterion {n:2d}  FAIL  {title}  {info['detail']}".rstrip()
        raise
    log[n] = f"criterion {n:2d}  PASS  {title}  {info['detail']}".rstrip()


# ---------------------------------------------------------------- 1. gradients


def test_01_gradient_correctness(acceptance_log, capsys):
    with criterion(acceptance_log, 1, "gradient check, 10 seeds, rel err <= 1e-4, < 60 s") as c:
        t0 = time.perf_counter()
        code = cli.main(["gradcheck", "--quiet"])
        elapsed = time.perf_counter() - t0
        out = capsys.readouterr().out
        worst = max(float(line.split("rel err")[1].split()[0]) for line in out.splitlines() if "rel err" in line)
        c["detail"] = f"(worst {worst:.2e}, {elapsed:.1f}s)"
        assert code == cli.EXIT_OK, out
        assert worst <= 1e-4
        assert elapsed < 60


# ---------------------------------------------------------------- 2. zero at rest


def _random_config(rng):
    d = int(rng.choice([8, 16, 24]))
    heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
    grid = int(rng.choice([1, 2, 4]))
    image = grid * int(rng.choice([1, 2]))
    return BackboneConfig(
        num_blocks=int(rng.integers(1, 4)), embed_dim=d, num_heads=heads, patch_grid=grid, image_size=image,
        seed=int(rng.integers(1 << 30)),
    )


def test_02_zero_at_rest(acceptance_log):
    with criterion(acceptance_log, 2, "zero at rest: IPG and all OPG terms exactly 0, 20 configs") as c:
        rng = np.random.default_rng(20)
        for _ in range(20):
            cfg = _random_config(rng)
            bb = init_backbone(cfg)
            prompts = init_prompts(cfg.num_blocks, int(rng.integers(1, 5)), cfg.embed_dim, seed=int(rng.integers(99)))
            prev = snapshot(prompts)
            x = rng.normal(size=(int(rng.integers(1, 4)), 1, cfg.image_size, cfg.image_size))
            _, h_prev = bb.forward(x, prev.P_prev)
            _, h_cur = bb.forward(x, prompts.P)
            assert float(ipg(prev, prompts).data) == 0.0
            assert float(opg_point_wise(h_prev.data, h_cur).data) == 0.0
            for pooling in ("sum", "mean"):
                for fn in POOLED.values():
                    assert float(fn(h_prev.data, h_cur, pooling).data) == 0.0
        c["detail"] = "(20/20)"


# ---------------------------------------------------------------- 3. pooling cancellation


def _zero_sum(rng, n):
    v = rng.integers(-3, 4, size=n).astype(float)
    v[-1] = -v[:-1].sum()
    if not v.any():
        v[0], v[-1] = 1.0, -1.0
    return v


def test_03_pooling_cancellation(acceptance_log):
    with criterion(acceptance_log, 3, "pooled OPG blind to cancelling shifts; point-wise 0 => pooled 0") as c:
        rng = np.random.default_rng(3)
        shape = (3, 5, 4)
        base = rng.integers(-5, 6, size=shape).astype(float)
        for name, axis in POOLED_AXIS.items():
            along = [1, 1, 1]
            along[axis] = shape[axis]
            delta = np.broadcast_to(_zero_sum(rng, shape[axis]).reshape(along), shape)
            cur = Tensor(base + delta)
            assert float(opg_point_wise(base, cur).data) > 0
            assert float(POOLED[name](base, cur).data) == 0.0
        # one shift that every pooled loss misses at once
        outer = np.einsum("i,j,k->ijk", *(_zero_sum(rng, n) for n in shape))
        cur = Tensor(base + outer)
        assert float(opg_point_wise(base, cur).data) > 0
        assert all(float(fn(base, cur).data) == 0.0 for fn in POOLED.values())
        for _ in range(100):
            h = rng.normal(size=(int(rng.integers(1, 3)), *rng.integers(1, 6, size=3)))
            cur = Tensor(h.copy())
            assert float(opg_point_wise(h, cur).data) == 0.0
            assert all(float(fn(h, cur, p).data) == 0.0 for fn in POOLED.values() for p in ("sum", "mean"))
        c["detail"] = "(3 single-axis + 1 joint counterexample, 100 random stacks)"


# ---------------------------------------------------------------- 4. HRM


def test_04_hrm_algebra(acceptance_log):
    with criterion(acceptance_log, 4, "head retention init: exact at 64 bit") as c:
        rng = np.random.default_rng(4)
        w = rng.normal(size=(5, 16))
        assert np.array_equal(hrm_init([w, w.copy(), w.copy()], [1.0, 1.0, 1.0]), w)
        other = rng.normal(size=(5, 16))
        assert np.array_equal(hrm_init([w, other], [2.0, 0.0]), w)
        assert np.array_equal(hrm_init([w], [2.0]), 2 * w)
        c["detail"] = "(equal heads, gamma=0, k=2 gamma=[2])"


# ---------------------------------------------------------------- 5. metrics


def test_05_metric_oracles(acceptance_log):
    with criterion(acceptance_log, 5, "metrics vs loop oracles on 100 matrices, worked example") as c:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            rows = [[float(v) for v in rng.uniform(size=t)] for t in range(1, int(rng.integers(1, 11)) + 1)]
            m = AccuracyMatrix.from_rows(rows)
            worst = max(worst, abs(final_average_accuracy(m) - loop_final_average(rows)))
            worst = max(worst, abs(cumulative_average_accuracy(m) - loop_cumulative_average(rows)))
        assert worst <= 1e-12
        m = AccuracyMatrix.from_rows([[1.0], [0.8, 0.6]])
        assert abs(final_average_accuracy(m) - 0.7) <= 1e-12
        assert abs(cumulative_average_accuracy(m) - 0.85) <= 1e-12
        c["detail"] = f"(max diff {worst:.1e})"


# ---------------------------------------------------------------- 6. invariants


def test_06_freeze_and_rehearsal_invariants(acceptance_log):
    with criterion(acceptance_log, 6, "backbone checksum, old heads and data access across a 5-task run") as c:
        cfg = load_config(DEFAULT_CONFIG)
        bb = init_backbone(cfg.backbone_for(0))
        before = bb.checksum()
        stream = RecordingStream(build_stream(cfg.stream_for(0)))
        heads_at_end = []
        run_method(stream, cfg.method, bb, 0,
                   on_task_end=lambda st: heads_at_end.append([h.weight.data.copy() for h in st.bank.heads]))
        final = heads_at_end[-1]
        assert len(final) == 5
        assert bb.checksum() == before
        for i in range(5):
            assert final[i].tobytes() == heads_at_end[i][i].tobytes()
        assert stream.old_task_train_fetches() == []
        c["detail"] = "(checksum equal, 5 heads bitwise, 0 old-task train fetches)"


# ---------------------------------------------------------------- 7, 8. retention trends


_VARIANTS = {
    "PECTP": {},
    "OPG-only": {"alpha": 0.0},
    "IPG-only": {"beta": 0.0},
    "PlainCIL": {"variant": "PlainCIL"},
    **{f"L{x}": {"variant": "PromptFixed", "key_task": x} for x in range(1, 6)},
}
_RUNS: dict[tuple[str, int], AccuracyMatrix] = {}


def _matrix(name, seed):
    if (name, seed) not in _RUNS:
        cfg = load_config(DEFAULT_CONFIG)
        spec = replace(cfg.method, **_VARIANTS[name])
        res = run_method(build_stream(cfg.stream_for(seed)), spec, init_backbone(cfg.backbone_for(seed)), seed)
        _RUNS[name, seed] = res.matrix
    return _RUNS[name, seed]


def _mean_ab(name):
    return float(np.mean([final_average_accuracy(_matrix(name, s)) for s in SEEDS]))


@pytest.mark.slow
def test_07_retention_ordering(acceptance_log):
    with criterion(acceptance_log, 7, "A_B ordering, 5 seeds, default stream") as c:
        t0 = time.perf_counter()
        ab = {k: _mean_ab(k) for k in ("PECTP", "OPG-only", "IPG-only", "PlainCIL")}
        c["detail"] = "(" + ", ".join(f"{k} {v:.3f}" for k, v in ab.items()) + f"; {time.perf_counter() - t0:.0f}s)"
        assert ab["PECTP"] >= ab["OPG-only"] >= ab["PlainCIL"]
        assert ab["PECTP"] >= ab["IPG-only"] >= ab["PlainCIL"]
        assert ab["PECTP"] - ab["PlainCIL"] > 0


@pytest.mark.slow
def test_first_task_retained_better_than_plain():
    def a12(name):
        return float(np.mean([_matrix(name, s)[1, 2] for s in SEEDS]))

    assert a12("PECTP") >= a12("PlainCIL")


@pytest.mark.slow
def test_08_cross_task_beats_key_task(acceptance_log):
    with criterion(acceptance_log, 8, "PECTP A_B >= every key-task variant L1..L5, 5 seeds") as c:
        pectp = _mean_ab("PECTP")
        lx = {f"L{x}": _mean_ab(f"L{x}") for x in range(1, 6)}
        c["detail"] = f"(PECTP {pectp:.3f}; " + ", ".join(f"{k} {v:.3f}" for k, v in lx.items()) + ")"
        assert all(pectp >= v for v in lx.values())


# ---------------------------------------------------------------- 9. selection


@pytest.mark.slow
def test_09_selection_degrades(acceptance_log):
    with criterion(acceptance_log, 9, "prompt-pool selection accuracy at session 8 < session 2, 5 seeds") as c:
        cfg = load_config(DEFAULT_CONFIG)
        spec = replace(cfg.method, variant="PromptExtending")
        sel = []
        for seed in SEEDS:
            stream_spec = replace(cfg.stream_for(seed), num_tasks=8, classes_per_task=2, samples_per_class=50,
                                  task_bands=False)
            res = run_method(build_stream(stream_spec), spec, init_backbone(cfg.backbone_for(seed)), seed)
            sel.append(res.selection)
        mean = np.mean(sel, axis=0)
        c["detail"] = "(" + " ".join(f"{v:.3f}" for v in mean) + ")"
        assert mean[7] < mean[1]


# ---------------------------------------------------------------- 10. overheads


def test_10_overhead_accounting(acceptance_log, tmp_path):
    with criterion(acceptance_log, 10, "learnable parameter counts match closed forms") as c:
        bbc = BackboneConfig()
        n, d, lp, cpt, b = bbc.num_blocks, bbc.embed_dim, 5, 3, 4
        stream = build_stream(StreamSpec(num_tasks=b, classes_per_task=cpt, samples_per_class=10))
        opt = OptimizerConfig(epochs=1)
        head = cpt * d + cpt
        expected = {
            "PECTP": lambda k: n * lp * d + head,
            "PromptExtending": lambda k: k * (n * lp * d + d) + head,
            "PromptFixed": lambda k: n * lp * d,
            "SimpleCIL": lambda k: 0,
        }
        results = []
        for variant, closed in expected.items():
            spec = MethodSpec(variant=variant, prompt_length=lp, optimizer=opt)
            counts = []
            res = run_method(stream, spec, init_backbone(bbc), 0,
                             on_task_end=lambda st: counts.append(count_learnable_params(st, spec).learnable_params))
            assert counts == [closed(k) for k in range(1, b + 1)], variant
            results.append(res)
        written = emit_report(results, tmp_path)
        summary = json.loads(written["summary"].read_text(encoding="utf-8"))
        timing = {t["method"]: t for t in json.loads(written["timing"].read_text(encoding="utf-8"))}
        by_method = {r["method"]: r["overhead"] for r in summary["runs"]}
        assert by_method["PECTP"]["learnable_params"] == n * lp * d + head
        assert by_method["PECTP"]["prompt_number"] == n * lp
        assert by_method["PromptExtending"]["learnable_params"] == b * (n * lp * d + d) + head
        assert timing["PECTP"]["selection_time"] == 0.0
        assert timing["PromptExtending"]["selection_time"] > 0.0
        c["detail"] = f"(PECTP {n * lp * d + head} for every B; extending {n * lp * d + d}/task)"


# ---------------------------------------------------------------- 11. determinism


def test_11_determinism_and_resume(acceptance_log, tmp_path):
    with criterion(acceptance_log, 11, "byte-identical summaries; resume reproduces final metrics") as c:
        cfg = config_from_dict({
            "seeds": [2],
            "backbone": {"num_blocks": 2, "embed_dim": 16, "num_heads": 2, "patch_grid": 2, "image_size": 8},
            "stream": {"num_tasks": 5, "classes_per_task": 2, "samples_per_class": 10, "image_size": 8},
            "method": {"prompt_length": 2, "optimizer": {"epochs": 2, "batch_size": 8}},
            "checkpoint_every": 2,
        })
        a = cli.run_config(replace(cfg, out=str(tmp_path / "a")), quiet=True)
        b = cli.run_config(replace(cfg, out=str(tmp_path / "b")), quiet=True)
        assert a["summary"].read_bytes() == b["summary"].read_bytes()
        ckpt = tmp_path / "a" / "checkpoint_seed2_task2.ckpt"
        r = cli.run_config(replace(cfg, out=str(tmp_path / "r")), resume=ckpt, quiet=True)
        full = json.loads(a["summary"].read_text(encoding="utf-8"))["runs"][0]
        resumed = json.loads(r["summary"].read_text(encoding="utf-8"))["runs"][0]
        assert resumed["final_average_accuracy"] == full["final_average_accuracy"]
        assert resumed["accuracy_counts"] == full["accuracy_counts"]
        c["detail"] = f"(A_B {full['final_average_accuracy']:.4f} from task-2 checkpoint)"
