#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Times the hot integer kernels (matmul, direct convolution, pooling, dyadic
rescale) on a few representative shapes and prints per-backend timings plus
the speedup of the compiled core.  Also times one end-to-end integer forward
pass per backend via a subprocess (backend choice is fixed at import time).

Usage: python benchmarks/bench_backends.py [--repeats 5]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from dyq import kernels


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def kernel_cases(rng):
    w64 = rng.integers(-8, 8, (64, 64)).astype(np.int32)
    h64 = rng.integers(-8, 8, (64, 64)).astype(np.int32)
    w256 = rng.integers(-8, 8, (128, 256)).astype(np.int32)
    h256 = rng.integers(-8, 8, (256, 64)).astype(np.int32)
    cw = rng.integers(-8, 8, (16, 16, 3, 3)).astype(np.int32)
    cx = rng.integers(-8, 8, (1, 16, 32, 32)).astype(np.int32)
    pool = rng.integers(-(2**15), 2**15, (1, 16, 64, 64)).astype(np.int32)
    acc = rng.integers(-(2**24), 2**24, (64, 4096)).astype(np.int64)
    mant = rng.integers(2**30, 2**31, 64).astype(np.int64)
    expo = rng.integers(28, 36, 64).astype(np.int64)
    return [
        ("matmul 64x64x64 int4", lambda b: b.matmul_i32(w64, h64, -8)),
        ("matmul 128x256x64 int4", lambda b: b.matmul_i32(w256, h256, -8)),
        ("conv 16->16 3x3 on 32x32", lambda b: b.conv2d_i32(cw, cx, 1, 1, 0, -8)),
        ("maxpool 3/2 on 64x64", lambda b: b.maxpool_i32(pool, 3, 2, 1)),
        ("sumpool 2/2 on 64x64", lambda b: b.sumpool_i32(pool, 2, 2)),
        ("requant 64x4096", lambda b: b.requant_rows_i64(acc, mant, expo)),
    ]


FORWARD_SNIPPET = """
import time
import numpy as np
from dyq import kernels, nets
from dyq.graph import engine

model = nets.residual_tower(seed=0)
rng = np.random.default_rng(7)
batches = [rng.normal(0, 1, (4, 3, 6, 6)).astype(np.float32) for _ in range(4)]
graph = engine.build_quant_graph(
    model, engine.calibrate(model, batches), engine.uniform_bit_config(model, 4)
)
x = rng.normal(0, 1, (1, 3, 6, 6)).astype(np.float32)
engine.infer_true(graph, x)  # warm-up
best = min(
    (lambda s: (engine.infer_true(graph, x), time.perf_counter() - s)[1])(
        time.perf_counter()
    )
    for _ in range(5)
)
print(f"{kernels.backend_name()} {best:.6f}")
"""


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    names = kernels.available_backends()
    if len(names) < 2:
        print(f"only one backend available: {names}; timing it anyway")
    rng = np.random.default_rng(0)

    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in names) + f"{'speedup':>10s}")
    for label, call in kernel_cases(rng):
        times = {}
        for name in names:
            backend = kernels.get_backend(name)
            call(backend)  # warm-up + correctness check below
            times[name] = timeit(lambda: call(backend), args.repeats)
        ref = np.asarray(call(kernels.get_backend(names[0])))
        for name in names[1:]:
            np.testing.assert_array_equal(ref, np.asarray(call(kernels.get_backend(name))))
        row = f"{label:32s}" + "".join(f"{times[n] * 1e3:10.3f}ms" for n in names)
        if "c" in times and "numpy" in times:
            row += f"{times['numpy'] / times['c']:9.1f}x"
        print(row)

    print("\nend-to-end integer forward (16-layer residual tower, 4-bit):")
    for name in names:
        env = dict(os.environ, DYQ_KERNEL_BACKEND=name)
        proc = subprocess.run(
            [sys.executable, "-c", FORWARD_SNIPPET],
            env=env,
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            print(f"  {name}: failed\n{proc.stderr}")
            continue
        backend, best = proc.stdout.split()
        print(f"  {backend}: {float(best) * 1e3:.2f}ms")


if __name__ == "__main__":
    main()
