"""Numba vs numpy timings for the loop-heavy kernels in ``codecflow.kernels``.

Run: python benchmarks/bench_kernels.py --repeats 20
Sizes follow desk-scale training: a 1 s batch of 4 through the codec, one
2 s utterance through the voicing detector, a 256-entry codebook lookup.
"""

import argparse
import time

import numpy as np

from codecflow import kernels


def cases(rng):
    cols = rng.normal(size=(256, 4000, 8))
    acf_frames = rng.normal(size=(200, 960))
    labels = rng.integers(0, 3, size=20000)
    dist = rng.random((1600, 256))
    return {
        "overlap_add": lambda k: k.overlap_add(cols, 4, 16000 + 4),
        "normalized_acf": lambda k: k.normalized_acf(acf_frames, 320, np.ones(321)),
        "majority_smooth": lambda k: k.majority_smooth(labels, 5),
        "top2": lambda k: k.top2(dist),
    }


def best_ms(fn, impl, repeats):
    fn(impl)  # warm-up, triggers JIT compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(impl)
        times.append(time.perf_counter() - t0)
    return 1e3 * min(times)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    if kernels.numba_impl is None:
        print("numba is not installed; only the numpy path is timed")
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        t_np = best_ms(fn, kernels.numpy_impl, args.repeats)
        if kernels.numba_impl is None:
            print(f"{name:<16} {t_np:>10.2f} {'-':>10} {'-':>8}")
            continue
        t_nb = best_ms(fn, kernels.numba_impl, args.repeats)
        print(f"{name:<16} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
