"""STREAM-triad loop with nearest-neighbour style halo exchange.

Each iteration streams the rank's slice of ``a = b + s*c`` (three arrays of
doubles, 2 flops and 24 bytes per element with streaming stores, i.e. a code
balance of 12 B/F), then exchanges one message with every partner offset and
waits for all of them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from ..model import (Boundary, Compute, InjectionSpec, Irecv, Isend, KernelSpec, NetworkSpec,
                     NoiseSpec, Scenario, SystemSpec, WaitAll, validate_scenario)

ARRAYS = 3
BYTES_PER_ELEMENT = 8
FLOPS_PER_ELEMENT = 2
CODE_BALANCE = ARRAYS * BYTES_PER_ELEMENT / FLOPS_PER_ELEMENT  # 12 B/F


@dataclass(frozen=True)
class TriadConfig:
    n_ranks: int = 40
    ranks_per_domain: int = 20
    distances: Tuple[int, ...] = (1, -1)
    boundary: Boundary = Boundary.OPEN
    total_bytes: float = 2.4e9  # working set of all three arrays
    msg_bytes: int = 16384
    n_iters: int = 500

    def __post_init__(self):
        object.__setattr__(self, "distances", tuple(int(d) for d in self.distances))
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if not self.distances:
            raise ValueError("distance set must not be empty")
        if 0 in self.distances:
            raise ValueError("distance 0 would be a message to self")
        if len(set(self.distances)) != len(self.distances):
            raise ValueError("duplicate distances")
        if self.n_ranks < 1 or self.ranks_per_domain < 1 or self.total_bytes <= 0:
            raise ValueError("n_ranks, ranks_per_domain and total_bytes must be positive")

    @property
    def elements_per_rank(self) -> float:
        return self.total_bytes / (ARRAYS * BYTES_PER_ELEMENT) / self.n_ranks

    def kernel(self) -> KernelSpec:
        flops = FLOPS_PER_ELEMENT * self.elements_per_rank
        return KernelSpec.from_balance("triad", flops, CODE_BALANCE)


def symmetric_distances(*reach: int) -> Tuple[int, ...]:
    """``(1, 2)`` gives ``(1, -1, 2, -2)``."""
    out = []
    for d in reach:
        out += [d, -d]
    return tuple(out)


def chain(max_distance: int) -> Tuple[int, ...]:
    """Offsets +/-1 ... +/-max_distance."""
    return symmetric_distances(*range(1, max_distance + 1))


def triad_system(n_ranks: int = 40, ranks_per_domain: int = 20, b_single: float = 10e9,
                 b_cap: float = 50e9, latency: float = 1e-3,
                 bandwidth: float = 12.5e9) -> SystemSpec:
    """Two-socket-like cluster: saturation at ``b_cap / b_single`` = 5 ranks.

    ``latency`` is an effective per-message cost (software overhead plus
    wire latency); it sets how strongly communication couples neighbours.
    """
    return SystemSpec.uniform(n_ranks, ranks_per_domain, b_single, b_cap,
                              network=NetworkSpec(latency=latency, bandwidth=bandwidth))


def make_triad_scenario(c: TriadConfig, system: Optional[SystemSpec] = None,
                        injections: Sequence[InjectionSpec] = (),
                        noise: Optional[NoiseSpec] = None, name: str = "triad"):
    system = system or triad_system(c.n_ranks, c.ranks_per_domain)
    if system.n_ranks != c.n_ranks:
        raise ValueError(f"system has {system.n_ranks} ranks, config {c.n_ranks}")
    prog = [Compute(c.kernel())]
    for d in c.distances:
        prog += [Irecv(d, c.msg_bytes, relative=True), Isend(d, c.msg_bytes, relative=True)]
    prog.append(WaitAll())
    s = Scenario(system, c.n_iters, (tuple(prog),), noise or NoiseSpec(),
                 tuple(injections), c.boundary, name)
    return validate_scenario(s)
