"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from ganem import _kernels as kern


def cases(rng):
    X, C = rng.normal(size=(2000, 196)), rng.normal(size=(10, 196))
    v = rng.uniform(0.1, 2.0, size=(10, 196))
    p, g = rng.normal(size=(256, 256)), rng.normal(size=(256, 256))
    acc = np.zeros_like(p)
    imgs = rng.uniform(size=(1500, 28, 28))
    pred, truth = rng.integers(10, size=5000), rng.integers(10, size=5000)
    return {
        "leaky_relu": lambda m: m.leaky_relu(p, 0.2),
        "rmsprop_update": lambda m: m.rmsprop_update(p.copy(), g, acc.copy(), 1e-3, 0.98, 1e-8),
        "clip_inplace": lambda m: m.clip_inplace(p.copy(), 0.1),
        "assign_nearest": lambda m: m.assign_nearest(X, C),
        "diag_gauss_logpdf": lambda m: m.diag_gauss_logpdf(X, C, v),
        "confusion": lambda m: m.confusion(pred, truth, 10),
        "mean_pool2": lambda m: m.mean_pool2(imgs),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    table = cases(np.random.default_rng(0))
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in table.items():
        fn(kern.numba_impl)  # compile outside the timing
        t_np = min(timeit.repeat(lambda: fn(kern.numpy_impl), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(kern.numba_impl), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
