"""Time the compiled block kernel against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ucl_einsum import kernels
from ucl_einsum.ir import OpSpec
from ucl_einsum.kernels import KernelPlan, run_kernel

CASES = [
    ("matmul 64", ("i", "j"), ("j", "k"), ("i", "k"), {"i": 64, "j": 64, "k": 64}, OpSpec()),
    ("outer 128", ("i",), ("k",), ("i", "k"), {"i": 128, "k": 128}, OpSpec()),
    ("dot 4096", ("j",), ("j",), (), {"j": 4096}, OpSpec()),
    ("max sq-diff 48", ("i", "j"), ("j", "k"), ("i", "k"), {"i": 48, "j": 48, "k": 48},
     OpSpec("max", "subtract", "square")),
    ("small 4x4 (per-call overhead)", ("i", "j"), ("j", "k"), ("i", "k"), {"i": 4, "j": 4, "k": 4}, OpSpec()),
]


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if kernels._compiled is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'case':32s} {'compiled (ms)':>14s} {'numpy (ms)':>12s} {'max |diff|':>11s}")
    for name, ul, vl, ol, bounds, op in CASES:
        kp = KernelPlan.build(ul, vl, ol, bounds, op)
        u = rng.uniform(-1, 1, kp.u_shape)
        v = rng.uniform(-1, 1, kp.v_shape)
        py_block, _ = run_kernel(kp, u, v, backend="python")
        t_py = best_of(lambda: run_kernel(kp, u, v, backend="python"), args.repeats)
        if kernels._compiled is not None:
            c_block, _ = run_kernel(kp, u, v, backend="compiled")
            t_c = best_of(lambda: run_kernel(kp, u, v, backend="compiled"), args.repeats)
            diff = float(np.max(np.abs(c_block - py_block))) if c_block.size else 0.0
            print(f"{name:32s} {t_c * 1e3:14.3f} {t_py * 1e3:12.3f} {diff:11.2e}")
        else:
            print(f"{name:32s} {'-':>14s} {t_py * 1e3:12.3f} {'-':>11s}")


if __name__ == "__main__":
    main()
