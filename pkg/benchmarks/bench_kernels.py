"""Compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed on a representative problem after one warm-up call
(numba compilation excluded) and checked to agree with the fallback.
"""
import argparse
import itertools
import time

import numpy as np

from qmcforce.afqmc import _lu_inverse_numba, _lu_inverse_numpy
from qmcforce.chem.geometry import diatomic
from qmcforce.chem.integrals import compute_integrals
from qmcforce.hamiltonian import transform_to_mo
from qmcforce.oracle import FCIHamiltonian, FCISpace
from qmcforce.scf import run_rhf


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_integrals(repeat):
    g = diatomic("N", 1.2)
    a = compute_integrals(g, use_numba=True)
    b = compute_integrals(g, use_numba=False)
    err = np.abs(a.eri - b.eri).max()
    return (best_of(lambda: compute_integrals(g, use_numba=True), repeat),
            best_of(lambda: compute_integrals(g, use_numba=False), repeat), err)


def bench_sigma(repeat):
    g = diatomic("N", 1.2)
    ints = compute_integrals(g)
    ham = transform_to_mo(ints, run_rhf(ints))
    space = FCISpace.build(ham.n_orb, 7, 7)
    fast, slow = FCIHamiltonian(ham, space, use_numba=True), FCIHamiltonian(ham, space, use_numba=False)
    C = np.random.default_rng(0).normal(size=space.shape)
    err = np.abs(fast.sigma(C) - slow.sigma(C)).max()
    return best_of(lambda: fast.sigma(C), repeat), best_of(lambda: slow.sigma(C), repeat), err


def bench_lu(repeat):
    # N2 (6e,6o) working space: 4 core + 3 active electrons per spin, 20 strings
    rng = np.random.default_rng(1)
    phi = rng.normal(size=(1024, 10, 7)) + 1j * rng.normal(size=(1024, 10, 7))
    strings = np.array([list(range(4)) + [4 + i for i in c] for c in itertools.combinations(range(6), 3)])
    a = _lu_inverse_numba(phi, strings, 1e-12)
    b = _lu_inverse_numpy(phi, strings, 1e-12)
    err = np.abs(a[1] - b[1]).max()
    return (best_of(lambda: _lu_inverse_numba(phi, strings, 1e-12), repeat),
            best_of(lambda: _lu_inverse_numpy(phi, strings, 1e-12), repeat), err)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = [("integrals N2/STO-3G", bench_integrals), ("FCI sigma N2 dim 14400", bench_sigma),
             ("walker LU 1024x20 strings", bench_lu)]
    print(f"{'kernel':28s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s} {'max diff':>9s}")
    for name, fn in cases:
        t_fast, t_slow, err = fn(args.repeat)
        print(f"{name:28s} {t_fast:10.4f} {t_slow:10.4f} {t_slow / t_fast:8.1f} {err:9.1e}")


if __name__ == "__main__":
    main()
