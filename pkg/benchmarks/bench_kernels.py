#!/usr/bin/env python3
"""Kernel and training-step timings, numba vs pure numpy.

    python benchmarks/bench_kernels.py [--repeats 5] [--json out.json]

Shapes follow the desk configuration: batch 16, sequence 256, hidden 64,
4 heads.  The step benchmark times one full forward/backward/AdamW update.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from clmdetour import kernels
from clmdetour import numerics as nx
from clmdetour.data import apply_mlm_masking, make_clm_batch
from clmdetour.model import ModelConfig, init_model
from clmdetour.trainer import OptimizerState, adamw_step, clm_loss, mlm_loss

B, L, D, H = 16, 256, 64, 4


def best_of(fn, repeats):
    fn()  # warm-up (also triggers numba compilation)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x = rng.normal(size=(B, L, D)).astype(np.float32)
    g, b = np.ones(D, np.float32), np.zeros(D, np.float32)
    u = rng.normal(size=(B, L, 4 * D)).astype(np.float32)
    s = rng.normal(size=(B, H, L, L)).astype(np.float32)
    dy = rng.normal(size=x.shape).astype(np.float32)
    _, ln_cache = nx.layer_norm(x, g, b)
    gl, gcache = nx.gelu(u)
    p = nx.attention_softmax(s.copy(), True)
    logits = rng.normal(size=(B * L, 512)).astype(np.float32)
    tgt = rng.integers(0, 512, B * L)
    mask = np.ones(B * L, bool)
    return {
        "layer_norm": lambda: nx.layer_norm(x, g, b),
        "layer_norm_backward": lambda: nx.layer_norm_backward(dy, ln_cache),
        "gelu": lambda: nx.gelu(u),
        "gelu_backward": lambda: nx.gelu_backward(gl, gcache),
        "softmax_causal": lambda: nx.attention_softmax(s.copy(), True),
        "softmax_backward": lambda: nx.attention_softmax_backward(p, s, True),
        "cross_entropy": lambda: nx.cross_entropy(logits, tgt, mask),
    }


def step_cases(rng):
    model = init_model(ModelConfig(), 0)
    opt = OptimizerState.zeros_like(model)
    ids = rng.integers(2, 510, (B, L))
    clm = make_clm_batch(ids)
    mlm = apply_mlm_masking(ids, 0.15, 0, 511)
    drop = np.random.default_rng(0)

    def clm_step():
        _, grads = clm_loss(model, clm, training=True, rng=drop)
        adamw_step(model, grads, opt, 1e-4)

    def mlm_step():
        _, grads = mlm_loss(model, mlm, training=True, rng=drop)
        adamw_step(model, grads, opt, 1e-4)

    return {"train_step_clm": clm_step, "train_step_mlm": mlm_step}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--skip-steps", action="store_true", help="kernels only")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if kernels._HAVE_NUMBA else [])
    results = {}
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    if not args.skip_steps:
        cases |= step_cases(rng)
    for name, fn in cases.items():
        row = {}
        for be in backends:
            with kernels.backend(be):
                row[be] = best_of(fn, args.repeats)
        results[name] = row
        speedup = row["numpy"] / row["numba"] if "numba" in row else float("nan")
        cells = "  ".join(f"{be} {row[be] * 1e3:9.2f} ms" for be in backends)
        print(f"{name:22s} {cells}  speedup {speedup:5.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
