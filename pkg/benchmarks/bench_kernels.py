"""Time the compiled and pure-Python kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from sfwcompress.kernels import available_backends
from sfwcompress.numerics import EPS


def bench_jacobi(mod, B, repeat):
    tol = max(B.shape[1], 2) * EPS

    def run():
        at = np.ascontiguousarray(B.T).copy()
        mod.jacobi_sweeps(at, np.eye(B.shape[1]), tol, 60, 0.0)

    return min(timeit.repeat(run, number=1, repeat=repeat))


def bench_ksupport(mod, z, k, repeat):
    return min(timeit.repeat(lambda: mod.ksupport_norm_sorted(z, k), number=20, repeat=repeat)) / 20


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = available_backends()
    gen = np.random.default_rng(0)
    cases = [("jacobi", (n, m), gen.standard_normal((n, m))) for n, m in [(16, 16), (32, 32), (64, 48)]]
    cases += [("ksupport", (d,), np.sort(np.abs(gen.standard_normal(d)))[::-1].copy()) for d in [100, 1000, 10000]]
    names = sorted(backends)
    print(f"{'kernel':10s} {'shape':>10s} " + " ".join(f"{n:>12s}" for n in names) + ("  speedup" if len(names) > 1 else ""))
    for kind, shape, x in cases:
        times = {}
        for n in names:
            mod = backends[n]
            times[n] = bench_jacobi(mod, x, args.repeat) if kind == "jacobi" else bench_ksupport(mod, x, max(1, x.size // 10), args.repeat)
        line = f"{kind:10s} {str(shape):>10s} " + " ".join(f"{times[n] * 1e3:10.3f}ms" for n in names)
        if "cython" in times:
            line += f"  {times['python'] / times['cython']:6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
