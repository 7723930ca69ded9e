"""Shared builders and checks for the test suite."""
from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from desync.matrixio import gen_banded
from desync.model import (Barrier, Compute, InjectionKind, InjectionSpec, Irecv, Isend,
                          KernelSpec, NetworkSpec, NoiseSpec, Scenario, SystemSpec, WaitAll,
                          contention_rate, validate_scenario)
from desync.trace import EXEC, Trace
from desync.workloads import (ChebfdConfig, SpmvmMode, make_chebfd_scenario,
                              make_spmvm_scenario, profile_loads, spmvm_config)


def halo(offsets, nbytes):
    out = []
    for d in offsets:
        out += [Irecv(d, nbytes, relative=True), Isend(d, nbytes, relative=True)]
    return out


def contention_case(n_ranks: int, traffic: float = 1e9, b_single: float = 10e9,
                    b_cap: float = 50e9):
    """``n_ranks`` identical one-shot kernels in one memory domain."""
    system = SystemSpec.uniform(n_ranks, n_ranks, b_single, b_cap)
    prog = (Compute(KernelSpec("stream", traffic_bytes=traffic)),)
    return validate_scenario(Scenario(system, 1, (prog,), name=f"contention-{n_ranks}"))


def _chain(n, rpd, bs, bc, traffic, offsets, nbytes, n_iters, **kw):
    net = kw.pop("network", NetworkSpec(latency=5e-6, bandwidth=5e9))
    system = SystemSpec.uniform(n, rpd, bs, bc, network=net,
                                eager_limit_bytes=kw.pop("eager", 16384),
                                nic_ranks=kw.pop("nic_ranks", None),
                                nic_bandwidth=kw.pop("nic_bandwidth", None))
    prog = [Compute(KernelSpec("k", traffic_bytes=traffic,
                               scalable_seconds=kw.pop("scalable", 0.0)))]
    prog += halo(offsets, nbytes) + [WaitAll()]
    if kw.pop("barrier", False):
        prog.append(Barrier())
    return validate_scenario(Scenario(system, n_iters, (tuple(prog),), **kw))


def golden_suite() -> Dict[str, object]:
    """Small scenarios spanning contention, eager/rendezvous, NIC sharing and barriers."""
    suite = {}
    suite["single-rank"] = contention_case(1)
    suite["saturated-5"] = contention_case(5)
    suite["oversaturated-10"] = contention_case(10)
    suite["triad-eager-inject"] = _chain(
        16, 8, 10e9, 40e9, 2e6, (1, -1), 16384, 20,
        injections=(InjectionSpec(3, 4, 2e-3),))
    suite["rendezvous-handshake"] = _chain(
        12, 6, 10e9, 30e9, 1.5e6, (1, -1), 200_000, 15,
        network=NetworkSpec(latency=2e-6, bandwidth=4e9, rendezvous_handshake=3e-6))
    suite["barrier-uniform-noise"] = _chain(
        8, 4, 10e9, 25e9, 1e6, (1, -1), 4096, 20, barrier=True,
        noise=NoiseSpec("uniform", 0.1, 7))
    suite["nic-contended"] = _chain(
        8, 4, 10e9, 25e9, 1e6, (1, -1, 4, -4), 300_000, 10, eager=4096,
        nic_ranks=4, nic_bandwidth=6e9, network=NetworkSpec(latency=1e-6, bandwidth=5e9))
    suite["periodic-next-pair"] = _chain(
        16, 8, 10e9, 50e9, 1e6, (1, -1, 2, -2), 8192, 12, boundary="periodic",
        injections=(InjectionSpec(0, 2, 1e-3),))
    suite["memory-bound-inject"] = _chain(
        10, 5, 10e9, 30e9, 1e6, (1, -1), 16384, 12, scalable=5e-5,
        injections=(InjectionSpec(6, 3, 1e-3, InjectionKind.MEMORY),))
    suite["exponential-noise-barrier"] = _chain(
        6, 3, 8e9, 16e9, 8e5, (1, -1), 20_000, 16, barrier=True, eager=16384,
        noise=NoiseSpec("exponential", 0.05, 11))
    m = gen_banded(24_000, 40, 7, seed=3)
    net = NetworkSpec(latency=3e-6, bandwidth=2e9)
    for mode in (SpmvmMode.SPLIT_WAIT, SpmvmMode.NON_SPLIT):
        cfg = spmvm_config(m, 12, mode, barrier=mode is SpmvmMode.NON_SPLIT, n_iters=20)
        suite[f"spmvm-{mode.value}"] = make_spmvm_scenario(
            cfg, SystemSpec.uniform(12, 6, 10e9, 30e9, network=net))
    cfg = spmvm_config(m, 8, n_iters=1)
    loads = profile_loads(cfg.comm, 3000, 13)
    cheb = ChebfdConfig(cfg.comm, loads, "pipeline", n_b=4, n_p=5, n_search=8, n_sub=2,
                        barrier_each_p=True)
    suite["chebfd-pipeline"] = make_chebfd_scenario(
        cheb, SystemSpec.uniform(8, 4, 10e9, 30e9, network=net))
    return suite


def boundary_error(a: Trace, b: Trace) -> float:
    """Largest start/end difference over matching segments of two traces."""
    err = 0.0
    for r in range(a.n_ranks):
        sa, sb = a.ranks[r], b.ranks[r]
        if [(s.kind, s.iteration) for s in sa] != [(s.kind, s.iteration) for s in sb]:
            raise AssertionError(f"rank {r}: segment structure differs")
        for x, y in zip(sa, sb):
            err = max(err, abs(x.t_start - y.t_start), abs(x.t_end - y.t_end))
    return err


def replay_domains(trace: Trace, system: SystemSpec, law=contention_rate):
    """Replay contended exec segments against each memory domain.

    Returns ``(peak_ratio, served)`` where ``peak_ratio`` is the largest
    aggregate allocated bandwidth over ``b_cap`` seen at any instant, and
    ``served`` maps (rank, segment index) to the bytes that segment moved.
    """
    peak = 0.0
    served: Dict[Tuple[int, int], float] = {}
    for d in system.memory_domains:
        events: List[Tuple[float, int, int, int]] = []
        for r in range(d.start, d.stop):
            for i, s in enumerate(trace.ranks[r]):
                if s.kind == EXEC and s.contended and s.t_end > s.t_start:
                    events.append((s.t_start, 1, r, i))
                    events.append((s.t_end, -1, r, i))
        events.sort(key=lambda e: (e[0], e[1]))
        active = set()
        prev = 0.0
        for t, step, r, i in events:
            if t > prev and active:
                rate = law(d.b_single, d.b_cap, len(active))
                peak = max(peak, rate * len(active) / d.b_cap)
                for key in active:
                    served[key] = served.get(key, 0.0) + rate * (t - prev)
            prev = t
            if step > 0:
                active.add((r, i))
            else:
                active.discard((r, i))
    return peak, served


def expected_traffic(s, trace: Trace) -> Dict[Tuple[int, int], float]:
    """Bytes each contended exec segment should move, from the scenario."""
    out = {}
    b_single = {r: s.system.memory_domains[s.system.memory_domain_of(r)].b_single
                for r in range(s.system.n_ranks)}
    kernels = {}
    for r in range(s.system.n_ranks):
        for p in s.program_of(r):
            if isinstance(p, Compute):
                kernels[(r, p.kernel.name)] = p.kernel.traffic_bytes
    inj = {(i.rank, i.iteration): i for i in s.injections}
    for r, segs in enumerate(trace.ranks):
        for i, seg in enumerate(segs):
            if seg.kind == EXEC and seg.contended and seg.t_end > seg.t_start:
                if seg.detail == "inject":
                    out[(r, i)] = inj[(r, seg.iteration)].extra_seconds * b_single[r]
                else:
                    out[(r, i)] = kernels[(r, seg.detail)]
    return out


def exec_start_matrix(trace: Trace) -> np.ndarray:
    from desync.analysis import exec_starts
    return exec_starts(trace)
