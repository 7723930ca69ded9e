"""Halo-exchange SpMVM in two communication schemes.

``non-split`` waits for all halo data before touching the matrix; ``split-wait``
computes the purely local part of the product while messages are in flight
and the remote part afterwards. Splitting costs extra memory traffic because
the result vector is written twice.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

from ..matrixio import (CommMatrix, InconsistentCommMatrix, RankLoad, SparseMatrix,
                        build_comm_matrix, partition_rows, rank_loads)
from ..model import (Barrier, Compute, Irecv, Isend, KernelSpec, NoiseSpec, Phase, Scenario,
                     SystemSpec, WaitAll, validate_scenario)

FLOPS_PER_NONZERO = 2
BASE_CODE_BALANCE = 6.0  # 8 B value + 4 B index per 2 flops


class SpmvmMode(str, Enum):
    SPLIT_WAIT = "split-wait"
    NON_SPLIT = "non-split"


def crs_code_balance(n_nzr: float) -> float:
    """Bytes per flop of CRS SpMVM including one load and store of both vectors.

    Each nonzero moves 12 B of matrix data; the right-hand side read and the
    result read/write (8 B each) are shared by the ``n_nzr`` nonzeros of a row.
    """
    return (12.0 + 24.0 / n_nzr) / FLOPS_PER_NONZERO


def split_penalty(n_nzr: float) -> float:
    """Extra bytes per flop when the result vector is updated twice."""
    return 16.0 / n_nzr


@dataclass(frozen=True)
class SpmvmConfig:
    comm: CommMatrix
    loads: RankLoad
    mode: SpmvmMode = SpmvmMode.NON_SPLIT
    barrier: bool = False
    n_iters: int = 20
    n_nzr: Optional[float] = None  # defaults to total nonzeros / total rows
    code_balance: float = BASE_CODE_BALANCE
    # fixed kernels override the per-rank derivation from ``loads``
    kernel_local: Optional[KernelSpec] = None
    kernel_remote: Optional[KernelSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SpmvmMode(self.mode))
        if len(self.loads.rows) != self.comm.n_ranks:
            raise InconsistentCommMatrix(
                f"loads cover {len(self.loads.rows)} ranks, matrix {self.comm.n_ranks}")

    @property
    def nzr(self) -> float:
        if self.n_nzr is not None:
            return self.n_nzr
        return sum(self.loads.nnz) / max(sum(self.loads.rows), 1)


def spmvm_config(m: SparseMatrix, n_ranks: int, mode=SpmvmMode.NON_SPLIT, barrier=False,
                 n_iters: int = 20, element_bytes: int = 8) -> SpmvmConfig:
    part = partition_rows(m, n_ranks)
    return SpmvmConfig(build_comm_matrix(m, part, element_bytes), rank_loads(m, part), mode,
                       barrier, n_iters)


def exchange(comm: CommMatrix, rank: int, scale: int = 1) -> List[Phase]:
    """Post every receive, then every send, of one halo exchange."""
    out: List[Phase] = [Irecv(j, b * scale) for j, b in comm.recv_from(rank)]
    out += [Isend(i, b * scale) for i, b in comm.send_to(rank)]
    return out


def kernels(c: SpmvmConfig, rank: int):
    """(local, remote) kernels of ``rank``; either may be None when it has no work."""
    if c.kernel_local is not None or c.kernel_remote is not None:
        return c.kernel_local, c.kernel_remote
    bc = c.code_balance
    f_loc = FLOPS_PER_NONZERO * c.loads.nnz_local[rank]
    f_rem = FLOPS_PER_NONZERO * c.loads.nnz_remote[rank]
    local = KernelSpec.from_balance("spmv-local", f_loc, bc) if f_loc else None
    remote = None
    if c.mode is SpmvmMode.SPLIT_WAIT:
        # a rank without remote entries never revisits its result vector
        if f_rem:
            extra = split_penalty(c.nzr) * (f_loc + f_rem)
            remote = KernelSpec("spmv-remote", f_rem * bc + extra, f_rem)
    elif f_rem:
        remote = KernelSpec.from_balance("spmv-remote", f_rem, bc)
    return local, remote


def rank_program(c: SpmvmConfig, rank: int) -> List[Phase]:
    local, remote = kernels(c, rank)
    prog = exchange(c.comm, rank)
    if c.mode is SpmvmMode.SPLIT_WAIT:
        if local is not None:
            prog.append(Compute(local))
        prog.append(WaitAll())
        if remote is not None:
            prog.append(Compute(remote))
    else:
        prog.append(WaitAll())
        prog += [Compute(k) for k in (local, remote) if k is not None]
    if c.barrier:
        prog.append(Barrier())
    return prog


def make_spmvm_scenario(c: SpmvmConfig, system: SystemSpec, noise: Optional[NoiseSpec] = None,
                        name: str = "spmvm"):
    if system.n_ranks != c.comm.n_ranks:
        raise InconsistentCommMatrix(
            f"system has {system.n_ranks} ranks, communication matrix {c.comm.n_ranks}")
    progs = tuple(tuple(rank_program(c, r)) for r in range(system.n_ranks))
    return validate_scenario(Scenario(system, c.n_iters, progs, noise or NoiseSpec(), name=name))
