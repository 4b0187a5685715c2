"""Compare the compiled kernels with their pure-Python counterparts.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from loocite._ext import pure

try:
    from loocite._ext import _kernels as compiled
except ImportError:
    compiled = None


def cases():
    rng = np.random.default_rng(0)
    for n, d in ((256, 8), (1024, 32), (4096, 64)):
        X = (rng.random((n, d)) < 0.5).astype(np.float64)
        y = X @ rng.normal(size=d) + rng.normal(scale=0.01, size=n)
        X, y = X - X.mean(0), y - y.mean()
        yield f"cd_lasso n={n} d={d}", lambda m, X=X, y=y: m.cd_lasso(X, y, 1e-4)
    for n in (64, 512, 4096):
        x = np.concatenate([rng.normal(size=n - 20), rng.uniform(5, 50, 20)])
        yield f"grubbs_sequence n={n} k=50", lambda m, x=x: m.grubbs_sequence(x, 50)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':<28} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases():
        t_py = min(timeit.repeat(lambda: fn(pure), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<28} {t_py:>10.2f} {'-':>10} {'-':>8}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28} {t_py:>10.2f} {t_c:>10.2f} {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
