import numpy as np
import pytest

from desync.engine import run
from desync.matrixio import (CommMatrix, InconsistentCommMatrix, build_comm_matrix, from_coo,
                             gen_banded, partition_rows, rank_loads)
from desync.model import Irecv, Isend, SystemSpec, ValidatedScenario
from desync.workloads import (ChebfdConfig, ChebfdMode, DecompSpec, IndivisibleGrid,
                              InvalidBlocking, SpmvmMode, TriadConfig, ValueKind, chain,
                              code_balance, crs_code_balance, decompose, make_chebfd_scenario,
                              make_spmvm_scenario, make_triad_scenario, preset, preset_comm_matrix,
                              preset_names, preset_profile, profile_loads, spmvm_config,
                              split_penalty, symmetric_distances, triad_system)
from desync.workloads.chebfd import rank_program as chebfd_program
from desync.workloads.spmvm import kernels


def sends(s, rank):
    return [p for p in s.program_of(rank) if isinstance(p, Isend)]


def comm_bytes(s):
    return sum(p.nbytes for r in range(s.system.n_ranks) for p in sends(s, r)) * s.n_iters


# -- triad ----------------------------------------------------------------------

def test_triad_kernel_traffic_and_balance():
    c = TriadConfig(n_ranks=4, ranks_per_domain=4, total_bytes=2.4e9)
    k = c.kernel()
    assert k.traffic_bytes == pytest.approx(6e8)
    assert k.code_balance == pytest.approx(12.0)


def test_triad_topology_open_boundary():
    c = TriadConfig(n_ranks=6, ranks_per_domain=3, distances=chain(2), n_iters=2)
    s = make_triad_scenario(c, triad_system(6, 3))
    assert isinstance(s, ValidatedScenario)
    assert sorted(p.peer for p in sends(s, 0)) == [1, 2]
    assert sorted(p.peer for p in sends(s, 3)) == [1, 2, 4, 5]


def test_triad_config_rejects_bad_distances():
    assert symmetric_distances(1, 3) == (1, -1, 3, -3)
    for bad in [(), (0, 1), (1, 1)]:
        with pytest.raises(ValueError):
            TriadConfig(distances=bad)


def test_triad_system_saturates_at_five():
    d = triad_system().memory_domains[0]
    assert d.b_cap / d.b_single == 5


# -- SpMVM ----------------------------------------------------------------------

def test_crs_code_balance():
    assert crs_code_balance(13) == pytest.approx(6.923, abs=1e-3)
    assert split_penalty(8) == 2.0


def test_diagonal_matrix_needs_no_messages():
    m = from_coo(12, 12, range(12), range(12))
    s = make_spmvm_scenario(spmvm_config(m, 4, n_iters=2), SystemSpec.uniform(4, 4, 1e9, 4e9))
    assert all(not sends(s, r) for r in range(4))
    run(s).check_coverage()


def test_banded_matrix_talks_to_neighbours_only():
    m = gen_banded(100, 5, 7, seed=0)
    c = spmvm_config(m, 4)
    assert set(c.comm.distances()) <= {-1, 1}


def test_split_moves_same_messages_more_memory_traffic():
    m = gen_banded(2000, 40, 9, seed=1)
    sysm = SystemSpec.uniform(4, 4, 10e9, 20e9)
    a = make_spmvm_scenario(spmvm_config(m, 4, SpmvmMode.NON_SPLIT, n_iters=3), sysm)
    b = make_spmvm_scenario(spmvm_config(m, 4, SpmvmMode.SPLIT_WAIT, n_iters=3), sysm)
    assert comm_bytes(a) == comm_bytes(b) > 0
    ca = spmvm_config(m, 4, SpmvmMode.NON_SPLIT)
    cb = spmvm_config(m, 4, SpmvmMode.SPLIT_WAIT)
    for r in range(4):
        ta = sum(k.traffic_bytes for k in kernels(ca, r) if k)
        tb = sum(k.traffic_bytes for k in kernels(cb, r) if k)
        fa = sum(k.flops for k in kernels(ca, r) if k)
        fb = sum(k.flops for k in kernels(cb, r) if k)
        assert tb > ta and fa == fb


def test_spmvm_rank_count_must_match():
    m = gen_banded(100, 5, 7)
    with pytest.raises(InconsistentCommMatrix):
        make_spmvm_scenario(spmvm_config(m, 4), SystemSpec.uniform(3, 3, 1e9, 1e9))


# -- ChebFD ---------------------------------------------------------------------

def test_chebfd_code_balance():
    assert code_balance(32) == pytest.approx(0.6036, abs=1e-4)
    assert code_balance(2, ValueKind.REAL) == pytest.approx(3.368, abs=1e-3)
    assert code_balance(1) > code_balance(4) > code_balance(64)


def _chebfd(mode, **kw):
    m = gen_banded(600, 12, 7, seed=5)
    part = partition_rows(m, 4)
    return ChebfdConfig(build_comm_matrix(m, part), rank_loads(m, part), mode, **kw)


def test_chebfd_blocking_errors():
    with pytest.raises(InvalidBlocking):
        _chebfd(ChebfdMode.NON_SPLIT, n_b=3, n_search=8)
    with pytest.raises(InvalidBlocking):
        _chebfd(ChebfdMode.PIPELINE, n_b=4, n_search=8, n_sub=3)
    with pytest.raises(InvalidBlocking):
        _chebfd(ChebfdMode.PIPELINE, n_b=4, n_search=8)


@pytest.mark.parametrize("n_sub", [1, 2, 4])
def test_pipeline_moves_the_same_volume(n_sub):
    sysm = SystemSpec.uniform(4, 4, 10e9, 20e9)
    base = make_chebfd_scenario(_chebfd(ChebfdMode.NON_SPLIT, n_b=4, n_search=8, n_p=2), sysm)
    pipe = make_chebfd_scenario(_chebfd(ChebfdMode.PIPELINE, n_b=4, n_search=8, n_p=2,
                                        n_sub=n_sub), sysm)
    assert comm_bytes(pipe) == comm_bytes(base) > 0
    assert sum(isinstance(p, Irecv) for p in pipe.program_of(1)) == \
        2 * (4 // n_sub) * 2
    run(pipe).check_coverage()


def test_chebfd_iterations_are_polynomial_degrees():
    c = _chebfd(ChebfdMode.SPLIT_WAIT, n_b=2, n_search=8, n_p=7, barrier_each_p=True)
    s = make_chebfd_scenario(c, SystemSpec.uniform(4, 4, 10e9, 20e9))
    assert s.n_iters == 7
    assert len(chebfd_program(c, 0)) == len(s.program_of(0))


def test_profile_loads_counts_halo_elements():
    comm = CommMatrix(np.array([[0, 80], [160, 0]]))
    load = profile_loads(comm, rows_per_rank=10, nnz_per_row=13)
    assert load.nnz_remote == (10, 20)
    assert load.nnz == (130, 130)


# -- decomposition ----------------------------------------------------------------

def test_x_split_gives_nearest_neighbours_only():
    p = decompose(DecompSpec((4, 1, 1), (32, 8, 8), ranks_per_node=4))
    assert p.distances() == [-1, 1]


def test_single_node_is_a_chain():
    p = decompose(DecompSpec((1, 1, 1), (32, 8, 8), ranks_per_node=4, periodic_dims=()))
    assert p.distances() == [-1, 1]
    assert p.sizes()[1] == (2 * 8 * 8 * 4 * 16,)


def test_node_grid_shape_sets_reach():
    flat = decompose(DecompSpec((4, 1, 1), (32, 8, 8), ranks_per_node=4))
    square = decompose(DecompSpec((1, 2, 2), (32, 8, 8), ranks_per_node=4))
    assert square.max_distance() > flat.max_distance()
    assert 4 in [abs(d) for d in square.distances()]


def test_indivisible_grid():
    with pytest.raises(IndivisibleGrid):
        DecompSpec((1, 1, 1), (8, 8, 8), ranks_per_node=8, radius=2)
    with pytest.raises(IndivisibleGrid):
        DecompSpec((1, 2), (8, 8, 8))


def test_presets():
    assert preset_names() == [f"M{i}" for i in range(1, 10)]
    m1 = preset("M1")
    assert m1.node_grid == (1, 1, 64)
    assert m1.message_kb()[-19] == 0.128
    assert preset("M4").node_grid == (1, 8, 8)
    prof = preset_profile("M3", n_ranks=10)
    assert prof.partners[0] == ((1, 1_050_000),)
    assert preset_comm_matrix("M3", n_ranks=10).total_volume() == 18 * 1_050_000
    with pytest.raises(KeyError):
        preset("M10")
