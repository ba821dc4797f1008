#!/usr/bin/env python3
"""Benchmark the selective-scan kernels: numba JIT vs the pure-numpy fallback.

The backend is selected exactly the way the library selects it at runtime
(the CAPT_SCAN_BACKEND environment variable), so the numbers reflect what
training actually pays per scan call.

Usage: python3 benchmarks/bench_scan.py [--repeats 5]
"""

import argparse
import os
import time

import numpy as np


def make_instance(rng, t_len, n_ch, n_st):
    return (
        rng.normal(size=(t_len, n_ch)),
        rng.uniform(0.0, 1.0, size=(t_len, n_ch, n_st)),
        rng.normal(size=(t_len, n_ch, n_st)),
        rng.normal(size=(t_len, n_st)),
        rng.normal(size=n_ch),
    )


def bench(fn, inst, repeats):
    fn(*inst)  # warm up (numba compiles here)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*inst)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    from capt import scan

    shapes = [(64, 32, 8), (256, 64, 16), (1024, 128, 16), (4096, 128, 16)]
    rng = np.random.default_rng(0)
    instances = {s: make_instance(rng, *s) for s in shapes}

    results = {}
    for backend in ("numpy", "numba") if scan.HAVE_NUMBA else ("numpy",):
        os.environ["CAPT_SCAN_BACKEND"] = backend
        assert scan.backend() == backend
        for s in shapes:
            results[(backend, s)] = bench(scan.scan_sequential_values,
                                          instances[s], args.repeats)
    os.environ.pop("CAPT_SCAN_BACKEND", None)

    # the parallel formulation is backend-independent vectorized numpy
    for s in shapes:
        results[("parallel", s)] = bench(scan.scan_parallel_values,
                                         instances[s], args.repeats)

    header = f"{'T x C x S':>18} {'numpy (ms)':>12} {'numba (ms)':>12} " \
             f"{'speedup':>8} {'parallel (ms)':>14}"
    print(header)
    print("-" * len(header))
    for s in shapes:
        t_np = results[("numpy", s)] * 1e3
        t_nb = results.get(("numba", s))
        t_par = results[("parallel", s)] * 1e3
        nb_txt = f"{t_nb * 1e3:12.3f}" if t_nb else f"{'n/a':>12}"
        sp_txt = f"{results[('numpy', s)] / t_nb:8.1f}x" if t_nb else f"{'n/a':>9}"
        print(f"{str(s):>18} {t_np:12.3f} {nb_txt} {sp_txt} {t_par:14.3f}")


if __name__ == "__main__":
    main()
