"""Compiled vs numpy timings for the mixture kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Both backends are imported directly so one process can time them side by
side. Each case also checks that the two agree to 1e-9 relative.
"""
import argparse
import timeit

import numpy as np

from fewshot_gmm import _pykernels as py

try:
    from fewshot_gmm import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    T, J = 24, 6
    for N in (25, 250, 5000):
        X = rng.gamma(2.0, 0.3, size=(N, T))
        mu = rng.random((J, T))
        sig = 0.1 + rng.random((J, T))
        log_w = np.log(np.arange(1, J + 1) / (J * (J + 1) / 2))
        yield f"loglik_resp N={N}", "loglik_resp", (X, mu, sig, log_w)
        resp = rng.dirichlet(np.ones(J), size=N)
        yield f"weighted_moments N={N}", "weighted_moments", (X, resp)
    for B in (32, 128):
        X = rng.gamma(2.0, 0.3, size=(B, 250, T))
        mu = rng.random((B, J, T))
        sig = 0.1 + rng.random((B, J, T))
        yield f"batched_nll_grad B={B}", "batched_nll_grad", (X, mu, sig, log_w)


def max_rel(a, b):
    if isinstance(a, tuple):
        return max(max_rel(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not built; run: python setup.py build_ext --inplace")
    print(f"{'case':<28}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}{'max rel diff':>14}")
    for label, fn, a in cases(np.random.default_rng(args.seed)):
        t_py = min(timeit.repeat(lambda: getattr(py, fn)(*a), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{label:<28}{t_py:>10.3f}{'-':>13}{'-':>9}{'-':>14}")
            continue
        t_cy = min(timeit.repeat(lambda: getattr(cy, fn)(*a), number=1, repeat=args.repeat)) * 1e3
        diff = max_rel(getattr(cy, fn)(*a), getattr(py, fn)(*a))
        print(f"{label:<28}{t_py:>10.3f}{t_cy:>13.3f}{t_py / t_cy:>9.2f}{diff:>14.2e}")


if __name__ == "__main__":
    main()
