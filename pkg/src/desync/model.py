"""Machine, workload, noise and injection specifications.

All quantities use seconds, bytes and flops; rates are bytes/s or flops/s.
Every type here is frozen, so a validated scenario can be shared freely.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np


class ModelError(ValueError):
    """Base class for rejected specifications."""


class NonPositiveInput(ModelError):
    pass


class UnmatchedMessage(ModelError):
    pass


class RankOutOfRange(ModelError):
    pass


class EmptyProgram(ModelError):
    pass


class BarrierMismatch(ModelError):
    pass


class DomainKind(str, Enum):
    MEMORY = "memory"
    NETWORK = "network-injection"


class Boundary(str, Enum):
    OPEN = "open"
    PERIODIC = "periodic"


class NoiseKind(str, Enum):
    NONE = "none"
    UNIFORM = "uniform"
    EXPONENTIAL = "exponential"


class InjectionKind(str, Enum):
    CORE = "core-bound"
    MEMORY = "memory-bound"


@dataclass(frozen=True)
class ContentionDomain:
    """A group of ranks sharing one bandwidth bottleneck.

    ``b_single`` is what one process achieves alone, ``b_cap`` the aggregate
    ceiling of the group. Ranks ``start <= r < stop`` belong to the domain.
    """

    start: int
    stop: int
    b_single: float
    b_cap: float
    kind: DomainKind = DomainKind.MEMORY

    def __post_init__(self):
        if not 0 <= self.start < self.stop:
            raise ModelError(f"empty or negative rank range [{self.start}, {self.stop})")
        if not self.b_single > 0:
            raise NonPositiveInput(f"b_single must be > 0, got {self.b_single}")
        if self.b_cap < self.b_single:
            raise ModelError(f"b_cap ({self.b_cap}) < b_single ({self.b_single})")
        object.__setattr__(self, "kind", DomainKind(self.kind))

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def saturation_point(self) -> int:
        return saturation_point(self)

    def __contains__(self, rank: int) -> bool:
        return self.start <= rank < self.stop


@dataclass(frozen=True)
class NetworkSpec:
    # defaults: Omni-Path class link, 100 Gbit/s
    latency: float = 1.0e-6
    bandwidth: float = 12.5e9
    rendezvous_handshake: float = 0.0

    def __post_init__(self):
        if self.latency < 0 or self.rendezvous_handshake < 0:
            raise ModelError("latency and rendezvous_handshake must be >= 0")
        if not self.bandwidth > 0:
            raise NonPositiveInput("network bandwidth must be > 0")

    def wire_time(self, nbytes: float) -> float:
        return self.latency + nbytes / self.bandwidth


@dataclass(frozen=True)
class SystemSpec:
    n_ranks: int
    domains: Tuple[ContentionDomain, ...]
    network: NetworkSpec = field(default_factory=NetworkSpec)
    eager_limit_bytes: int = 16384
    # overrides the log2 dissemination barrier model when set
    barrier_cost: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if self.n_ranks < 1:
            raise ModelError("n_ranks must be >= 1")
        if self.eager_limit_bytes < 0:
            raise ModelError("eager_limit_bytes must be >= 0")
        if self.barrier_cost is not None and self.barrier_cost < 0:
            raise ModelError("barrier_cost must be >= 0")
        mem = sorted((d for d in self.domains if d.kind is DomainKind.MEMORY),
                     key=lambda d: d.start)
        pos = 0
        for d in mem:
            if d.start != pos:
                raise ModelError(f"memory domains do not partition ranks: gap/overlap at {pos}")
            pos = d.stop
        if pos != self.n_ranks:
            raise ModelError(f"memory domains cover [0, {pos}) but n_ranks={self.n_ranks}")
        net = sorted((d for d in self.domains if d.kind is DomainKind.NETWORK),
                     key=lambda d: d.start)
        for a, b in zip(net, net[1:]):
            if b.start < a.stop:
                raise ModelError("network-injection domains overlap")
        if net and net[-1].stop > self.n_ranks:
            raise ModelError("network-injection domain exceeds n_ranks")

    @classmethod
    def uniform(cls, n_ranks: int, ranks_per_domain: int, b_single: float, b_cap: float,
                network: Optional[NetworkSpec] = None, eager_limit_bytes: int = 16384,
                nic_ranks: Optional[int] = None, nic_bandwidth: Optional[float] = None,
                barrier_cost: Optional[float] = None) -> "SystemSpec":
        """Equal memory domains of ``ranks_per_domain``; optional shared NICs."""
        network = network or NetworkSpec()
        doms = [ContentionDomain(s, min(s + ranks_per_domain, n_ranks), b_single, b_cap)
                for s in range(0, n_ranks, ranks_per_domain)]
        if nic_ranks:
            cap = nic_bandwidth if nic_bandwidth is not None else network.bandwidth
            doms += [ContentionDomain(s, min(s + nic_ranks, n_ranks), network.bandwidth,
                                      max(cap, network.bandwidth), DomainKind.NETWORK)
                     for s in range(0, n_ranks, nic_ranks)]
        return cls(n_ranks, tuple(doms), network, eager_limit_bytes, barrier_cost)

    @property
    def memory_domains(self) -> Tuple[ContentionDomain, ...]:
        return tuple(sorted((d for d in self.domains if d.kind is DomainKind.MEMORY),
                            key=lambda d: d.start))

    @property
    def network_domains(self) -> Tuple[ContentionDomain, ...]:
        return tuple(sorted((d for d in self.domains if d.kind is DomainKind.NETWORK),
                            key=lambda d: d.start))

    def memory_domain_of(self, rank: int) -> int:
        for i, d in enumerate(self.memory_domains):
            if rank in d:
                return i
        raise RankOutOfRange(f"rank {rank} outside [0, {self.n_ranks})")

    def network_domain_of(self, rank: int) -> Optional[int]:
        for i, d in enumerate(self.network_domains):
            if rank in d:
                return i
        return None

    def barrier_seconds(self) -> float:
        if self.barrier_cost is not None:
            return self.barrier_cost
        return dissemination_barrier(self.network.latency, self.n_ranks)


@dataclass(frozen=True)
class KernelSpec:
    """One compute kernel: contended traffic plus a non-contended time part."""

    name: str
    traffic_bytes: float = 0.0
    flops: float = 0.0
    code_balance: Optional[float] = None
    scalable_seconds: float = 0.0

    def __post_init__(self):
        if min(self.traffic_bytes, self.flops, self.scalable_seconds) < 0:
            raise ModelError(f"kernel {self.name!r}: negative quantity")
        if self.code_balance is not None:
            if self.code_balance < 0:
                raise ModelError(f"kernel {self.name!r}: negative code balance")
            if self.traffic_bytes and self.flops:
                expect = self.flops * self.code_balance
                if not math.isclose(self.traffic_bytes, expect, rel_tol=1e-9):
                    raise ModelError(
                        f"kernel {self.name!r}: traffic {self.traffic_bytes} != "
                        f"flops*code_balance {expect}")
        if not (self.traffic_bytes > 0 or self.scalable_seconds > 0):
            raise ModelError(f"kernel {self.name!r} has no work")

    @classmethod
    def from_balance(cls, name: str, flops: float, code_balance: float,
                     scalable_seconds: float = 0.0) -> "KernelSpec":
        return cls(name, flops * code_balance, flops, code_balance, scalable_seconds)


@dataclass(frozen=True)
class Compute:
    kernel: KernelSpec


@dataclass(frozen=True)
class Isend:
    peer: int
    nbytes: int
    relative: bool = False


@dataclass(frozen=True)
class Irecv:
    peer: int
    nbytes: int
    relative: bool = False


@dataclass(frozen=True)
class WaitAll:
    pass


@dataclass(frozen=True)
class Barrier:
    pass


Phase = Union[Compute, Isend, Irecv, WaitAll, Barrier]


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.NONE
    intensity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.intensity < 0:
            raise ModelError("noise intensity must be >= 0")


@dataclass(frozen=True)
class InjectionSpec:
    rank: int
    iteration: int
    extra_seconds: float
    kind: InjectionKind = InjectionKind.CORE

    def __post_init__(self):
        object.__setattr__(self, "kind", InjectionKind(self.kind))


@dataclass(frozen=True)
class Scenario:
    """A bulk-synchronous program: one phase list per rank, repeated ``n_iters`` times.

    ``programs`` holds either a single template shared by all ranks or one
    phase list per rank. Peers flagged ``relative`` are offsets resolved
    against ``boundary`` by :func:`validate_scenario`.
    """

    system: SystemSpec
    n_iters: int
    programs: Tuple[Tuple[Phase, ...], ...]
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    injections: Tuple[InjectionSpec, ...] = ()
    boundary: Boundary = Boundary.OPEN
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "programs", tuple(tuple(p) for p in self.programs))
        object.__setattr__(self, "injections", tuple(self.injections))
        object.__setattr__(self, "boundary", Boundary(self.boundary))

    def program_of(self, rank: int) -> Tuple[Phase, ...]:
        return self.programs[0] if len(self.programs) == 1 else self.programs[rank]


@dataclass(frozen=True)
class ValidatedScenario(Scenario):
    """Scenario with explicit absolute peers for every rank."""


def validate_scenario(s: Scenario) -> ValidatedScenario:
    """Resolve boundary conditions and check every structural invariant.

    Raises the first violated invariant as a :class:`ModelError` subclass.
    Validating an already validated scenario returns it unchanged.
    """
    if isinstance(s, ValidatedScenario):
        return s
    n = s.system.n_ranks
    if s.n_iters < 1:
        raise ModelError("n_iters must be >= 1")
    if len(s.programs) not in (1, n):
        raise ModelError(f"expected 1 or {n} programs, got {len(s.programs)}")

    resolved = []
    for r in range(n):
        prog = s.program_of(r)
        if not prog:
            raise EmptyProgram(f"rank {r} has an empty program")
        out = []
        for ph in prog:
            if isinstance(ph, (Isend, Irecv)):
                if ph.nbytes < 0:
                    raise ModelError(f"rank {r}: negative message size")
                peer = ph.peer
                if ph.relative:
                    peer = r + ph.peer
                    if s.boundary is Boundary.PERIODIC:
                        peer %= n
                    elif not 0 <= peer < n:
                        continue
                if not 0 <= peer < n:
                    raise RankOutOfRange(f"rank {r}: peer {peer} outside [0, {n})")
                if peer == r:
                    raise ModelError(f"rank {r}: message to itself")
                ph = type(ph)(peer, ph.nbytes)
            elif not isinstance(ph, (Compute, WaitAll, Barrier)):
                raise ModelError(f"rank {r}: unknown phase {ph!r}")
            out.append(ph)
        if not out:
            raise EmptyProgram(f"rank {r} has no phases after boundary resolution")
        resolved.append(tuple(out))

    _check_matching(resolved)
    nbar = {sum(isinstance(p, Barrier) for p in prog) for prog in resolved}
    if len(nbar) > 1:
        raise BarrierMismatch(f"ranks disagree on barriers per iteration: {sorted(nbar)}")

    for inj in s.injections:
        if not 0 <= inj.rank < n:
            raise RankOutOfRange(f"injection rank {inj.rank} outside [0, {n})")
        if not 0 <= inj.iteration < s.n_iters:
            raise ModelError(f"injection iteration {inj.iteration} outside [0, {s.n_iters})")
        if not inj.extra_seconds > 0:
            raise ModelError("injection extra_seconds must be > 0")
        if not any(isinstance(p, Compute) for p in resolved[inj.rank]):
            raise ModelError(f"injection on rank {inj.rank} which never computes")

    return ValidatedScenario(s.system, s.n_iters, tuple(resolved), s.noise,
                             s.injections, s.boundary, s.name)


def _check_matching(programs: Sequence[Sequence[Phase]]) -> None:
    sends: dict = {}
    recvs: dict = {}
    for r, prog in enumerate(programs):
        for ph in prog:
            if isinstance(ph, Isend):
                sends.setdefault((r, ph.peer), []).append(ph.nbytes)
            elif isinstance(ph, Irecv):
                recvs.setdefault((ph.peer, r), []).append(ph.nbytes)
    for key in sorted(set(sends) | set(recvs)):
        src, dst = key
        a, b = sends.get(key, []), recvs.get(key, [])
        if len(a) != len(b):
            raise UnmatchedMessage(
                f"rank {src} posts {len(a)} sends to rank {dst}, "
                f"which posts {len(b)} receives from rank {src}")
        if a != b:
            raise UnmatchedMessage(f"message sizes {src}->{dst} disagree: {a} vs {b}")


def roofline_limit(b_cap: float, code_balance: float) -> float:
    """Bandwidth-bound performance ceiling in flops/s."""
    if not (b_cap > 0 and code_balance > 0):
        raise NonPositiveInput("roofline_limit needs b_cap > 0 and code_balance > 0")
    return b_cap / code_balance


def saturation_point(d: ContentionDomain) -> int:
    """Minimum number of concurrently active ranks that exhausts ``d.b_cap``."""
    # guard against 5.000000001 from float division of exact multiples
    ratio = d.b_cap / d.b_single
    n = math.ceil(ratio)
    if n > 1 and math.isclose(ratio, n - 1, rel_tol=1e-12):
        n -= 1
    return max(1, n)


def contention_rate(b_single: float, b_cap: float, m: int) -> float:
    """Per-rank bandwidth with ``m`` ranks sharing a domain.

    Equal processor sharing with a single-stream ceiling. Every simulator
    path calls this one function.
    """
    if m <= 0:
        return b_single
    return min(b_single, b_cap / m)


def dissemination_barrier(latency: float, n_ranks: int) -> float:
    if n_ranks <= 1:
        return 0.0
    return latency * math.ceil(math.log2(n_ranks))


def substream_seed(seed: int, name: str) -> int:
    """Deterministic child seed for the named random stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def nominal_seconds(kernel: KernelSpec, b_single: float) -> float:
    return kernel.traffic_bytes / b_single + kernel.scalable_seconds


def noise_table(s: ValidatedScenario, seed: int) -> np.ndarray:
    """Extra non-contended seconds per (rank, iteration, compute phase)."""
    n = s.system.n_ranks
    ncomp = max(sum(isinstance(p, Compute) for p in s.program_of(r)) for r in range(n))
    table = np.zeros((n, s.n_iters, max(ncomp, 1)))
    if s.noise.kind is NoiseKind.NONE or s.noise.intensity == 0:
        return table
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(s.noise.seed) & 0xFFFFFFFF,
                                 zlib.crc32(b"noise")])
    if s.noise.kind is NoiseKind.UNIFORM:
        frac = rng.uniform(0.0, 2.0 * s.noise.intensity, size=table.shape)
    else:
        frac = rng.exponential(s.noise.intensity, size=table.shape)
    mem = s.system.memory_domains
    for r in range(n):
        b = mem[s.system.memory_domain_of(r)].b_single
        comps = [p.kernel for p in s.program_of(r) if isinstance(p, Compute)]
        for k, kern in enumerate(comps):
            table[r, :, k] = frac[r, :, k] * nominal_seconds(kern, b)
    return table


def total_flops(s: Scenario) -> float:
    return s.n_iters * sum(p.kernel.flops
                           for r in range(s.system.n_ranks)
                           for p in s.program_of(r) if isinstance(p, Compute))


def with_injections(s: Scenario, injections: Iterable[InjectionSpec]) -> Scenario:
    if isinstance(s, ValidatedScenario):
        return validate_scenario(Scenario(s.system, s.n_iters, s.programs, s.noise,
                                          tuple(injections), s.boundary, s.name))
    return replace(s, injections=tuple(injections))
