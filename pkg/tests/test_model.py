import math

import pytest
from hypothesis import given, strategies as st

from desync.engine import run
from desync.model import (Barrier, BarrierMismatch, Compute, ContentionDomain, EmptyProgram,
                          InjectionSpec, Irecv, Isend, KernelSpec, ModelError, NetworkSpec,
                          NoiseSpec, NonPositiveInput, RankOutOfRange, Scenario, SystemSpec,
                          UnmatchedMessage, ValidatedScenario, WaitAll, contention_rate,
                          dissemination_barrier, noise_table, roofline_limit, saturation_point,
                          substream_seed, total_flops, validate_scenario, with_injections)

K = KernelSpec("k", traffic_bytes=1e6)


def two_rank(prog0, prog1, **kw):
    return Scenario(SystemSpec.uniform(2, 2, 10e9, 20e9), 1, (tuple(prog0), tuple(prog1)), **kw)


def test_minimal_matched_pair_is_valid():
    s = two_rank([Isend(1, 8), WaitAll()], [Irecv(0, 8), WaitAll()])
    assert isinstance(validate_scenario(s), ValidatedScenario)


def test_send_without_receive_rejected():
    s = two_rank([Isend(1, 8), WaitAll()], [Compute(K), WaitAll()])
    with pytest.raises(UnmatchedMessage, match="rank 0"):
        validate_scenario(s)


def test_mismatched_sizes_rejected():
    s = two_rank([Isend(1, 8), WaitAll()], [Irecv(0, 16), WaitAll()])
    with pytest.raises(UnmatchedMessage):
        validate_scenario(s)


def test_open_boundary_drops_outside_partners():
    prog = (Compute(K), Irecv(1, 8, True), Isend(1, 8, True), Irecv(-1, 8, True),
            Isend(-1, 8, True), WaitAll())
    v = validate_scenario(Scenario(SystemSpec.uniform(40, 20, 10e9, 50e9), 1, (prog,)))
    peers = lambda r: {p.peer for p in v.program_of(r) if isinstance(p, (Isend, Irecv))}
    assert peers(0) == {1}
    assert peers(39) == {38}
    assert peers(17) == {16, 18}


def test_periodic_boundary_wraps():
    prog = (Compute(K), Irecv(1, 8, True), Isend(1, 8, True), Irecv(-1, 8, True),
            Isend(-1, 8, True), WaitAll())
    v = validate_scenario(Scenario(SystemSpec.uniform(6, 3, 10e9, 50e9), 1, (prog,),
                                   boundary="periodic"))
    assert {p.peer for p in v.program_of(0) if isinstance(p, Isend)} == {1, 5}


def test_absolute_peer_out_of_range():
    s = two_rank([Isend(5, 8), WaitAll()], [Compute(K)])
    with pytest.raises(RankOutOfRange):
        validate_scenario(s)


def test_empty_program_rejected():
    with pytest.raises(EmptyProgram):
        validate_scenario(two_rank([], [Compute(K)]))


def test_program_emptied_by_boundary_rejected():
    s = Scenario(SystemSpec.uniform(2, 2, 1e9, 1e9), 1, ((Isend(-1, 8, True),),))
    with pytest.raises(EmptyProgram):
        validate_scenario(s)


def test_barrier_count_must_agree():
    with pytest.raises(BarrierMismatch):
        validate_scenario(two_rank([Compute(K), Barrier()], [Compute(K)]))


def test_injection_checks():
    base = Scenario(SystemSpec.uniform(2, 2, 1e9, 1e9), 3, ((Compute(K),),))
    with pytest.raises(RankOutOfRange):
        validate_scenario(with_injections(base, [InjectionSpec(2, 0, 1.0)]))
    with pytest.raises(ModelError):
        validate_scenario(with_injections(base, [InjectionSpec(0, 3, 1.0)]))
    with pytest.raises(ModelError):
        validate_scenario(with_injections(base, [InjectionSpec(0, 1, 0.0)]))


def test_validation_is_idempotent():
    v = validate_scenario(two_rank([Isend(1, 8), WaitAll()], [Irecv(0, 8), WaitAll()]))
    assert validate_scenario(v) is v


def test_domain_invariants():
    with pytest.raises(NonPositiveInput):
        ContentionDomain(0, 2, 0.0, 1.0)
    with pytest.raises(ModelError):
        ContentionDomain(0, 2, 2.0, 1.0)
    with pytest.raises(ModelError):
        ContentionDomain(2, 2, 1.0, 1.0)


def test_domains_must_partition_ranks():
    d = ContentionDomain(0, 3, 1.0, 2.0)
    with pytest.raises(ModelError):
        SystemSpec(4, (d,))
    with pytest.raises(ModelError):
        SystemSpec(4, (d, ContentionDomain(2, 4, 1.0, 2.0)))
    with pytest.raises(ModelError):
        SystemSpec(3, (d,), eager_limit_bytes=-1)


def test_network_invariants():
    with pytest.raises(NonPositiveInput):
        NetworkSpec(bandwidth=0)
    with pytest.raises(ModelError):
        NetworkSpec(latency=-1)
    with pytest.raises(ModelError):
        NetworkSpec(rendezvous_handshake=-1)
    assert NetworkSpec(latency=1e-6, bandwidth=1e9).wire_time(1000) == pytest.approx(2e-6)


def test_kernel_consistency():
    with pytest.raises(ModelError):
        KernelSpec("bad", traffic_bytes=100, flops=10, code_balance=12)
    with pytest.raises(ModelError):
        KernelSpec("idle")
    with pytest.raises(ModelError):
        KernelSpec("neg", traffic_bytes=-1)
    k = KernelSpec.from_balance("triad", 2e8, 12)
    assert k.traffic_bytes == 2.4e9


def test_noise_invariants():
    with pytest.raises(ModelError):
        NoiseSpec("uniform", -0.1)
    with pytest.raises(ValueError):
        NoiseSpec("pink", 0.1)


def test_roofline_examples():
    assert roofline_limit(48e9, 12) == 4e9
    with pytest.raises(NonPositiveInput):
        roofline_limit(0, 1)
    with pytest.raises(NonPositiveInput):
        roofline_limit(1, 0)


@given(st.floats(1e6, 1e12), st.floats(0.1, 100), st.floats(0.01, 100))
def test_roofline_is_homogeneous(b, bc, k):
    assert roofline_limit(k * b, bc) == pytest.approx(k * roofline_limit(b, bc), rel=1e-12)


def test_saturation_point_examples():
    assert saturation_point(ContentionDomain(0, 4, 10e9, 10e9)) == 1
    assert saturation_point(ContentionDomain(0, 20, 10e9, 50e9)) == 5
    assert saturation_point(ContentionDomain(0, 20, 12e9, 50e9)) == 5


def test_saturation_point_matches_throughput_plateau():
    # 12 GB/s per rank against a 50 GB/s cap: 4 ranks do not yet saturate, 5 do
    def throughput(m):
        s = Scenario(SystemSpec.uniform(m, m, 12e9, 50e9), 1,
                     ((Compute(KernelSpec("k", traffic_bytes=1e9)),),))
        return m * 1e9 / run(s).end_time

    assert throughput(4) == pytest.approx(48e9)
    assert throughput(5) == pytest.approx(50e9)
    assert throughput(6) == pytest.approx(50e9)


@given(st.integers(1, 64), st.floats(1e8, 1e11), st.floats(1.0, 64.0))
def test_contention_rate_never_exceeds_cap(m, bs, ratio):
    bc = bs * ratio
    r = contention_rate(bs, bc, m)
    assert r <= bs * (1 + 1e-12)
    assert m * r <= bc * (1 + 1e-12)


@given(st.lists(st.integers(1, 6), min_size=1, max_size=6))
def test_uniform_system_partitions_ranks(sizes):
    n = sum(sizes)
    rpd = max(sizes)
    s = SystemSpec.uniform(n, rpd, 1e9, 4e9)
    covered = []
    for d in s.memory_domains:
        covered += list(range(d.start, d.stop))
    assert covered == list(range(n))


def test_dissemination_barrier():
    assert dissemination_barrier(1e-6, 1) == 0
    assert dissemination_barrier(3e-6, 2) == 3e-6
    assert dissemination_barrier(1e-6, 40) == pytest.approx(6e-6)
    assert SystemSpec.uniform(4, 4, 1, 1, barrier_cost=0.5).barrier_seconds() == 0.5


def test_noise_is_deterministic_and_scaled():
    prog = (Compute(KernelSpec("k", traffic_bytes=1e9)),)
    sysm = SystemSpec.uniform(4, 4, 10e9, 40e9)
    s = validate_scenario(Scenario(sysm, 50, (prog,), NoiseSpec("exponential", 0.2, 3)))
    a, b = noise_table(s, 1), noise_table(s, 1)
    assert (a == b).all()
    assert not (a == noise_table(s, 2)).all()
    assert a.mean() == pytest.approx(0.2 * 0.1, rel=0.25)
    quiet = validate_scenario(Scenario(sysm, 5, (prog,)))
    assert not noise_table(quiet, 1).any()


def test_substreams_are_independent():
    assert substream_seed(1, "noise") != substream_seed(1, "matrix")
    assert substream_seed(1, "noise") == substream_seed(1, "noise")


def test_total_flops_counts_every_rank_and_iteration():
    k = KernelSpec.from_balance("k", 10.0, 2.0)
    s = Scenario(SystemSpec.uniform(3, 3, 1, 1), 4, ((Compute(k), Compute(k)),))
    assert total_flops(s) == 3 * 4 * 20.0
    assert math.isclose(total_flops(validate_scenario(s)), 240.0)
