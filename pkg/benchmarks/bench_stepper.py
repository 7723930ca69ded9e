"""Time the compiled and pure-Python oracle stepping loops.

Runs the raw ``advance`` loop on a synthetic job set and a full oracle run
on a small contended scenario, once per available backend, and prints the
speedup of the compiled loop.

    python3 benchmarks/bench_stepper.py [--steps N] [--repeat R]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from desync import stepper
from desync.model import (Compute, InjectionSpec, Irecv, Isend, KernelSpec, Scenario,
                          SystemSpec, WaitAll, validate_scenario)
from desync.oracle import oracle_run


def _jobs(n_jobs: int, n_pools: int):
    rng = np.random.default_rng(0)
    rem = rng.uniform(1e6, 2e6, n_jobs)
    pool = (np.arange(n_jobs) % n_pools).astype(np.intc)
    pool[::7] = -1  # a few timers
    b_single = np.full(n_pools, 10e9)
    b_cap = np.full(n_pools, 40e9)
    return rem, pool, b_single, b_cap


def bench_advance(backend: str, steps: int, repeat: int) -> float:
    advance = stepper.get(backend)
    best = float("inf")
    for _ in range(repeat):
        rem, pool, bs, bc = _jobs(16, 2)
        rate = np.zeros(len(rem))
        count = np.zeros(len(bs), dtype=np.int64)
        t = time.perf_counter()
        advance(rem, pool, bs, bc, 1e-9, steps, rate, count)
        best = min(best, time.perf_counter() - t)
    return best


def scenario():
    system = SystemSpec.uniform(8, 4, 10e9, 25e9)
    prog = (Compute(KernelSpec("k", traffic_bytes=2e7)),
            Irecv(1, 8192, relative=True), Isend(1, 8192, relative=True),
            Irecv(-1, 8192, relative=True), Isend(-1, 8192, relative=True), WaitAll())
    return validate_scenario(Scenario(system, 10, (prog,),
                                      injections=(InjectionSpec(2, 3, 5e-4),)))


def bench_oracle(backend: str, repeat: int) -> float:
    s = scenario()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        oracle_run(s, dt=1e-6, backend=backend)
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    rows = []
    for backend in stepper.BACKENDS:
        rows.append((backend, bench_advance(backend, args.steps, args.repeat),
                     bench_oracle(backend, args.repeat)))
    print(f"{'backend':<10} {'advance [s]':>12} {'oracle [s]':>12}")
    for name, a, o in rows:
        print(f"{name:<10} {a:12.4f} {o:12.4f}")
    if len(rows) == 2:
        (_, ca, co), (_, pa, po) = rows
        print(f"compiled speedup: advance {pa / ca:.1f}x, oracle {po / co:.1f}x")
    else:
        print("compiled stepper not built; only the Python loop was timed")


if __name__ == "__main__":
    main()
