"""Benchmark the numba and numpy kernel backends on a representative chain.

Runs the Hall-pairing workload (magnetic projection, commutator chain over
the boundary corner) with both backends and reports wall times plus the
value difference, which must be at rounding level.

Usage: python3 benchmarks/bench_trace.py [--radius 12] [--kgrid 32] [--repeat 3]
"""

import argparse
import time
from fractions import Fraction

import coarsetrace as ct


def run_once(P, halfspaces):
    rep = ct.kubo_idempotent(P, halfspaces, validate=False)
    return rep.value


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--radius", type=int, default=12)
    ap.add_argument("--kgrid", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    spec = ct.HofstadterSpec(flux=Fraction(1, 3), gap_index=1,
                             truncation_radius=args.radius, kgrid=args.kgrid)
    P, _ = ct.hofstadter_projection(spec)
    halfspaces = [ct.HalfSpace(2, 0, 0, "geq"), ct.HalfSpace(2, 1, 0, "geq")]

    results = {}
    for backend in ("numba", "numpy"):
        try:
            ct.set_backend(backend)
        except RuntimeError as exc:
            print(f"{backend:>6}: unavailable ({exc})")
            continue
        run_once(P, halfspaces)  # warm-up (JIT compile / cache load)
        times = []
        value = None
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            value = run_once(P, halfspaces)
            times.append(time.perf_counter() - t0)
        results[backend] = (min(times), value)
        print(f"{backend:>6}: best {min(times):8.3f} s  "
              f"value {value.real:+.6e}{value.imag:+.6e}j")

    if len(results) == 2:
        diff = abs(results["numba"][1] - results["numpy"][1])
        speedup = results["numpy"][0] / results["numba"][0]
        print(f"value difference: {diff:.3e} (rounding level)")
        print(f"speedup (numpy/numba): {speedup:.2f}x")


if __name__ == "__main__":
    main()
