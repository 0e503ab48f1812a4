"""Time the compiled cascade kernel against the numpy fallback.

Usage: python3 benchmarks/bench_cascade.py [--repeat N] [--d D] [--J J]

Batch sizes cover a pre-training batch (16) and the 1-shot and 5-shot
episodes (5*1 + 5*16 = 85, 5*5 + 5*16 = 105).
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from cdnet.model import ModelConfig, init_params
from cdnet.numerics import kernels

LD = ("P", "slope", "W1", "b1", "W2", "b2", "W3", "b3")


def setup(B: int, d: int, J: int, seed: int = 0):
    cfg = ModelConfig(d=d, J=J, seed=seed)
    a = init_params(cfg).arrays
    ld = [a[f"ld.{k}"] for k in LD]
    ld[1] = float(ld[1])
    x0 = np.random.default_rng(seed).standard_normal((B, d))
    return x0, ld


def bench(kern, B, d, J, repeat):
    x0, (P, s, W1, b1, W2, b2, W3, b3) = setup(B, d, J)
    rng = np.random.default_rng(1)
    g_in, g_re = rng.standard_normal((J, B, d)), rng.standard_normal((B, d))

    def fwd():
        return kern.cascade_forward(x0, P, s, W1, b1, W2, b2, W3, b3, J, True)

    _, cache = fwd()

    def bwd():
        return kern.cascade_backward(cache, P, s, W1, W2, W3, g_in, g_re, True)

    t_f = min(timeit.repeat(fwd, number=20, repeat=repeat)) / 20
    t_b = min(timeit.repeat(bwd, number=20, repeat=repeat)) / 20
    return t_f, t_b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--J", type=int, default=3)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled kernel not built; only the fallback is available")
        backends = {"fallback": kernels.fallback}
    else:
        backends = {"compiled": kernels.compiled, "fallback": kernels.fallback}
    print(f"d={args.d} J={args.J}, best of {args.repeat}, microseconds per call")
    print(f"{'B':>5} {'backend':>9} {'forward':>10} {'backward':>10}")
    for B in (16, 85, 105):
        times = {}
        for name, kern in backends.items():
            times[name] = bench(kern, B, args.d, args.J, args.repeat)
            f, b = times[name]
            print(f"{B:>5} {name:>9} {1e6 * f:>10.1f} {1e6 * b:>10.1f}")
        if len(times) == 2:
            (cf, cb), (pf, pb) = times["compiled"], times["fallback"]
            print(f"{B:>5} {'speedup':>9} {pf / cf:>9.2f}x {pb / cb:>9.2f}x")


if __name__ == "__main__":
    main()
