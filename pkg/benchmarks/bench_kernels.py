"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--json OUT]

Per kernel: median wall time over ``--repeat`` calls on inputs shaped like
the default backbone's activations (batch 32, 22 tokens, width 32; the
MLP hidden width is 64). End to end: one training epoch of the default
method on a small slice of the default stream.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from dataclasses import replace

import numpy as np

from pectp.backbone import init_backbone
from pectp.config import DEFAULT_CONFIG, load_config
from pectp.continual import new_state, train_task
from pectp.data import build_stream
from pectp.numerics import kernels


def _inputs(rng):
    x = rng.normal(size=(32 * 22, 32))
    h = rng.normal(size=(32 * 22, 64))
    att = rng.normal(size=(32 * 4 * 22, 22))
    y_ln, xhat, rstd = kernels.layer_norm_forward(x, np.ones(32), np.zeros(32), 1e-6)
    y_sm = kernels.softmax_forward(att)
    return {
        "layer_norm_forward": lambda: kernels.layer_norm_forward(x, np.ones(32), np.zeros(32), 1e-6),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(x, xhat, rstd, np.ones(32)),
        "softmax_forward": lambda: kernels.softmax_forward(att),
        "softmax_backward": lambda: kernels.softmax_backward(att, y_sm),
        "gelu_forward": lambda: kernels.gelu_forward(h),
        "gelu_backward": lambda: kernels.gelu_backward(h, h),
    }


def _median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _end_to_end():
    cfg = load_config(DEFAULT_CONFIG)
    stream = build_stream(replace(cfg.stream_for(0), samples_per_class=40))
    spec = replace(cfg.method, optimizer=replace(cfg.method.optimizer, epochs=1))
    state = new_state(init_backbone(cfg.backbone_for(0)), spec, 0)
    x, y = stream.train_split(1)
    t0 = time.perf_counter()
    train_task(state, x, y, stream.class_ids(1))
    return time.perf_counter() - t0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--json", help="also write the results to this file")
    args = p.parse_args(argv)

    if not kernels.compiled_available():
        print("compiled kernels are not built; only the numpy backend can run", file=sys.stderr)
        return 1
    backends = ("python", "cython")
    results: dict[str, dict[str, float]] = {b: {} for b in backends}
    for b in backends:
        kernels.use_backend(b)
        for name, fn in _inputs(np.random.default_rng(0)).items():
            results[b][name] = _median_time(fn, args.repeat)
        results[b]["train_epoch"] = _end_to_end()

    print(f"{'kernel':22s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name in results["python"]:
        py, cy = results["python"][name] * 1e3, results["cython"][name] * 1e3
        print(f"{name:22s} {py:10.3f} {cy:10.3f} {py / cy:7.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
