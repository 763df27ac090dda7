"""Compare the compiled and numpy kernel backends on solver-sized arrays.

Usage: python3 benchmarks/bench_kernels.py [--size N] [--dim M] [--repeat R]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from bilab import kernels


def cases(size: int, m: int, rng: np.random.Generator) -> dict:
    shape = (size,) * m
    cell = (size - 1,) * m
    spacing = tuple([1.0 / (size - 1)] * m)
    u = rng.standard_normal(shape)
    p = rng.standard_normal((m,) + cell)
    q = 3.0 * rng.standard_normal((m,) + cell)
    small = 0.5 * p / np.sqrt(np.sum(p * p, axis=0) + 1.0)
    return {
        "gradient": lambda k: k.gradient(u, spacing),
        "divergence": lambda k: k.divergence(p, spacing),
        "prox_radial": lambda k: k.prox_radial(q, 0.1),
        "dual_prox": lambda k: k.dual_prox(q, 10.0),
        "energy_density": lambda k: k.energy_density(small, 1e6),
        "lagrangian": lambda k: k.lagrangian(small),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=257)
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ns = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled backend not built; timing numpy only")
    rng = np.random.default_rng(0)
    table = cases(ns.size, ns.dim, rng)
    names = list(impls)
    print(f"{ns.size}^{ns.dim} nodes, best of {ns.repeat}, active backend: {kernels.BACKEND}")
    print(f"{'kernel':<16}" + "".join(f"{n + ' [ms]':>16}" for n in names) + (f"{'speedup':>10}" if len(names) > 1 else ""))
    for name, fn in table.items():
        ref = fn(impls["numpy"])
        times = []
        for n in names:
            out = fn(impls[n])
            # both backends must agree before their timings are compared
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
            times.append(min(timeit.repeat(lambda: fn(impls[n]), number=3, repeat=ns.repeat)) / 3 * 1e3)
        row = f"{name:<16}" + "".join(f"{t:>16.3f}" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
