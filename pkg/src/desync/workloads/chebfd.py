"""Communication and compute skeleton of a blocked Chebyshev filter iteration.

One outer iteration is one polynomial degree. The ``n_search`` sought vectors
are processed in blocks of ``n_b``; each block needs one halo exchange of
``n_b`` vectors followed by the fused filter kernel. The filter coefficients
and reductions are not simulated, only their traffic (folded into the code
balance).

``pipeline`` mode cuts each block into sub-blocks of ``n_sub`` vectors and
posts the exchange of sub-block ``k+1`` before finishing sub-block ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

from ..matrixio import CommMatrix, InconsistentCommMatrix, RankLoad
from ..model import (Barrier, Compute, KernelSpec, NoiseSpec, Phase, Scenario, SystemSpec,
                     WaitAll, validate_scenario)
from .spmvm import exchange


class InvalidBlocking(ValueError):
    pass


class ChebfdMode(str, Enum):
    NON_SPLIT = "non-split"
    SPLIT_WAIT = "split-wait"
    PIPELINE = "pipeline"


class ValueKind(str, Enum):
    COMPLEX = "complex-double"
    REAL = "real-double"


# flops per matrix row and vector, and the balance coefficients (bytes per
# row shared by the block, bytes per row and vector)
_KERNEL = {
    ValueKind.COMPLEX: (146.0, 260.0, 80.0, 16),
    ValueKind.REAL: (19.0, 48.0, 40.0, 8),
}


def code_balance(n_b: int, kind: ValueKind = ValueKind.COMPLEX) -> float:
    """Optimistic bytes per flop of the fused filter kernel at block size ``n_b``."""
    flops, matrix_bytes, vector_bytes, _ = _KERNEL[ValueKind(kind)]
    return (matrix_bytes / n_b + vector_bytes) / flops


@dataclass(frozen=True)
class ChebfdConfig:
    comm: CommMatrix  # halo volume of one vector
    loads: RankLoad
    mode: ChebfdMode = ChebfdMode.NON_SPLIT
    n_b: int = 2
    n_p: int = 10
    n_search: int = 8
    n_sub: Optional[int] = None
    barrier_each_p: bool = False
    value_kind: ValueKind = ValueKind.COMPLEX

    def __post_init__(self):
        object.__setattr__(self, "mode", ChebfdMode(self.mode))
        object.__setattr__(self, "value_kind", ValueKind(self.value_kind))
        if self.n_b < 1 or self.n_p < 1 or self.n_search < 1:
            raise InvalidBlocking("n_b, n_p and n_search must be positive")
        if self.n_search % self.n_b:
            raise InvalidBlocking(f"n_search={self.n_search} is not a multiple of n_b={self.n_b}")
        if self.mode is ChebfdMode.PIPELINE:
            if self.n_sub is None or self.n_sub < 1 or self.n_b % self.n_sub:
                raise InvalidBlocking(f"n_sub={self.n_sub} does not divide n_b={self.n_b}")
        if len(self.loads.rows) != self.comm.n_ranks:
            raise InconsistentCommMatrix("loads and communication matrix disagree on n_ranks")

    @property
    def n_blocks(self) -> int:
        return self.n_search // self.n_b

    @property
    def sub_block(self) -> int:
        return self.n_sub if self.mode is ChebfdMode.PIPELINE else self.n_b


def _split_kernels(c: ChebfdConfig, rank: int, n_vec: int, penalty: bool):
    """Local and remote share of the filter kernel over ``n_vec`` vectors."""
    flops_row, _, _, value_bytes = _KERNEL[c.value_kind]
    rows = c.loads.rows[rank]
    nnz = c.loads.nnz_local[rank] + c.loads.nnz_remote[rank]
    frac = c.loads.nnz_remote[rank] / nnz if nnz else 0.0
    flops = flops_row * rows * n_vec
    bal = code_balance(n_vec, c.value_kind)
    f_rem = flops * frac
    f_loc = flops - f_rem
    local = KernelSpec.from_balance("chebfd-local", f_loc, bal) if f_loc > 0 else None
    remote = None
    if f_rem > 0:
        # second pass over the result block: read and write once more
        extra = 2 * value_bytes * rows * n_vec if penalty else 0.0
        remote = KernelSpec("chebfd-remote", f_rem * bal + extra, f_rem)
    return local, remote


def _whole_kernel(c: ChebfdConfig, rank: int, n_vec: int) -> Optional[KernelSpec]:
    flops_row = _KERNEL[c.value_kind][0]
    flops = flops_row * c.loads.rows[rank] * n_vec
    if flops <= 0:
        return None
    return KernelSpec.from_balance("chebfd", flops, code_balance(n_vec, c.value_kind))


def block_phases(c: ChebfdConfig, rank: int) -> List[Phase]:
    out: List[Phase] = []
    if c.mode is ChebfdMode.NON_SPLIT:
        out += exchange(c.comm, rank, c.n_b)
        out.append(WaitAll())
        k = _whole_kernel(c, rank, c.n_b)
        if k is not None:
            out.append(Compute(k))
    elif c.mode is ChebfdMode.SPLIT_WAIT:
        local, remote = _split_kernels(c, rank, c.n_b, penalty=True)
        out += exchange(c.comm, rank, c.n_b)
        if local is not None:
            out.append(Compute(local))
        out.append(WaitAll())
        if remote is not None:
            out.append(Compute(remote))
    else:
        n_steps = c.n_b // c.n_sub
        local, remote = _split_kernels(c, rank, c.n_sub, penalty=False)
        out += exchange(c.comm, rank, c.n_sub)
        if local is not None:
            out.append(Compute(local))
        out.append(WaitAll())
        for k in range(n_steps):
            last = k == n_steps - 1
            if not last:
                out += exchange(c.comm, rank, c.n_sub)
            if remote is not None:
                out.append(Compute(remote))
            if not last:
                if local is not None:
                    out.append(Compute(local))
                out.append(WaitAll())
    return out


def rank_program(c: ChebfdConfig, rank: int) -> List[Phase]:
    prog: List[Phase] = []
    for _ in range(c.n_blocks):
        prog += block_phases(c, rank)
    if c.barrier_each_p:
        prog.append(Barrier())
    return prog


def make_chebfd_scenario(c: ChebfdConfig, system: SystemSpec, noise: Optional[NoiseSpec] = None,
                         name: str = "chebfd"):
    """One scenario iteration per polynomial degree, so ``n_iters = n_p``."""
    if system.n_ranks != c.comm.n_ranks:
        raise InconsistentCommMatrix(
            f"system has {system.n_ranks} ranks, communication matrix {c.comm.n_ranks}")
    progs = tuple(tuple(rank_program(c, r)) for r in range(system.n_ranks))
    return validate_scenario(Scenario(system, c.n_p, progs, noise or NoiseSpec(), name=name))


def profile_loads(comm: CommMatrix, rows_per_rank: int, nnz_per_row: int) -> RankLoad:
    """Per-rank loads for a stencil matrix known only through its halo volumes.

    Each received halo element is counted as one remote coupling.
    """
    n = comm.n_ranks
    remote = [int(comm.volume[i].sum() // comm.element_bytes) for i in range(n)]
    total = rows_per_rank * nnz_per_row
    return RankLoad(tuple([rows_per_rank] * n), tuple(max(total - r, 0) for r in remote),
                    tuple(min(r, total) for r in remote))
