"""Time the compiled and pure-Python kernel backends on the hot paths.

Usage::

    python3 benchmarks/bench_kernels.py [--states 200] [--actions 4] [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from robust_rmdp import _backend
from robust_rmdp.approx import ErmOptions, FeatureMap, LinearDualClass, erm_dual
from robust_rmdp.benchmarks import random_rmdp
from robust_rmdp.data import generate_dataset, uniform_mu
from robust_rmdp.dual import TVBallSpec, robust_bellman_apply, search_upper


def cases(n_states: int, n_actions: int, n_samples: int, threads: int):
    rng = np.random.default_rng(0)
    m = random_rmdp(rng, n_states, n_actions, rho=0.2)
    spec = TVBallSpec.for_rmdp(m)
    q = rng.uniform(0, m.v_max, size=(n_states, n_actions))
    p0 = m.kernel.reshape(-1, n_states)
    v = q.max(axis=1)
    upper = search_upper(m.rho, m.gamma)
    atoms = generate_dataset(m, uniform_mu(n_states, n_actions), n_samples, seed=1).atoms()
    gclass = LinearDualClass.zeros(FeatureMap.one_hot(n_states, n_actions), m.rho, m.gamma)
    exact = ErmOptions(method="exact")
    return {
        "tv_dual_rows": lambda: _backend.kernels.tv_dual_rows(p0, v, m.rho, v.min(), upper, threads),
        "robust_bellman_apply": lambda: robust_bellman_apply(q, m, spec),
        "erm_dual (exact)": lambda: erm_dual(atoms, q, gclass, exact),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--states", type=int, default=200)
    parser.add_argument("--actions", type=int, default=4)
    parser.add_argument("--samples", type=int, default=200_000)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    backends = ["python"]
    try:
        _backend.get_kernels("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernels not built; timing the python backend only")
    _backend.set_threads(args.threads)
    work = cases(args.states, args.actions, args.samples, args.threads)
    timings = {}
    for name in backends:
        _backend.kernels = _backend.get_kernels(name)
        for label, fn in work.items():
            fn()  # warm up
            timings[label, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))

    print(f"|S|={args.states} |A|={args.actions} N={args.samples} threads={args.threads}")
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label in work:
        row = f"{label:<24}" + "".join(f"{timings[label, b] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{timings[label, 'python'] / timings[label, 'cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
