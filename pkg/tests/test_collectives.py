"""Schedule accounting and deterministic all-reduce results."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradsync import halfprec as hp
from gradsync.collectives import (
    ReduceSchedule,
    Topology,
    allreduce_f16,
    choose_algorithm,
    chunk_sizes,
    hierarchical_allreduce,
    hierarchical_schedule,
    hybrid_allreduce,
    ring_allreduce,
    ring_schedule,
)


def seq_sum_oracle(buffers):
    """Sequential left-to-right rank-order sum, independent of the module."""
    acc = np.array(buffers[0], dtype=np.float32, copy=True)
    for b in buffers[1:]:
        acc = acc + np.asarray(b, dtype=np.float32)
    return acc


# --- topology ---------------------------------------------------------------


def test_topology_groups_and_masters():
    t = Topology(8, 2)
    assert t.group_count == 4
    assert t.masters() == [0, 2, 4, 6]
    assert list(t.members(1)) == [2, 3]
    assert t.group_of(5) == 2


@pytest.mark.parametrize("p,k", [(0, 1), (4, 3), (4, 0), (2, 4)])
def test_topology_rejects_bad_shapes(p, k):
    with pytest.raises(ValueError):
        Topology(p, k)


def test_chunk_sizes_contiguous_cover():
    assert chunk_sizes(7, 4).tolist() == [2, 2, 2, 1]
    assert chunk_sizes(3, 8).tolist() == [1, 1, 1, 0, 0, 0, 0, 0]
    assert chunk_sizes(12, 3).tolist() == [4, 4, 4]


# --- schedules --------------------------------------------------------------


@pytest.mark.parametrize("p", [2, 3, 4, 16, 256])
def test_ring_step_count(p):
    assert ring_schedule(p, 64).total_steps == 2 * (p - 1)


@pytest.mark.parametrize("p,k", [(4, 2), (16, 4), (16, 16), (64, 8), (1024, 16)])
def test_hierarchical_step_count(p, k):
    s = hierarchical_schedule(Topology(p, k), 64)
    assert s.total_steps == 4 * (k - 1) + 2 * (p // k - 1)


def test_flagship_step_counts():
    assert ring_schedule(1024, 25_087_744).total_steps == 2046
    assert hierarchical_schedule(Topology(1024, 16), 25_087_744).total_steps == 186


def test_ring_p4_m8_schedule_bytes():
    # 8 floats over 4 workers: chunks of 2 floats, so every transfer in
    # all 6 rounds is 8 bytes.
    s = ring_schedule(4, 8)
    assert s.total_steps == 6
    for r in s.rounds:
        assert len(r.transfers) == 4
        assert np.all(r.transfers[:, 2] == 8)
    assert s.bytes_on_wire == 6 * 4 * 8


def test_ring_bytes_on_wire_total():
    # every ring round moves the whole vector once across the workers
    p, n = 8, 1000
    s = ring_schedule(p, n)
    for r in s.rounds:
        assert r.total_bytes == n * 4
    assert s.bytes_on_wire == 2 * (p - 1) * n * 4


def test_hierarchical_phase_structure():
    s = hierarchical_schedule(Topology(8, 4), 64)
    assert s.phases() == [
        "intra_reduce_scatter", "intra_gather",
        "master_reduce_scatter", "master_allgather",
        "intra_scatter", "intra_allgather",
    ]
    counts = {ph: sum(1 for r in s.rounds if r.phase == ph) for ph in s.phases()}
    assert counts == {
        "intra_reduce_scatter": 3, "intra_gather": 3,
        "master_reduce_scatter": 1, "master_allgather": 1,
        "intra_scatter": 3, "intra_allgather": 3,
    }


def test_hierarchical_k_equals_p_has_no_master_ring():
    s = hierarchical_schedule(Topology(16, 16), 64)
    assert s.total_steps == 60
    assert not any(r.phase.startswith("master") for r in s.rounds)


def test_hierarchical_k1_is_pure_master_ring():
    s = hierarchical_schedule(Topology(8, 1), 64)
    assert s.total_steps == 14
    assert all(r.phase.startswith("master") for r in s.rounds)


def test_hierarchical_intra_transfers_stay_in_group():
    topo = Topology(12, 4)
    s = hierarchical_schedule(topo, 48)
    for r in s.rounds:
        if r.phase.startswith("intra"):
            for snd, rcv, _ in r.transfers:
                assert topo.group_of(int(snd)) == topo.group_of(int(rcv))
        else:
            masters = set(topo.masters())
            for snd, rcv, _ in r.transfers:
                assert int(snd) in masters and int(rcv) in masters


def test_p1_schedules_are_empty():
    assert ring_schedule(1, 64).total_steps == 0
    assert hierarchical_schedule(Topology(1, 1), 64).total_steps == 0


def test_schedule_json_roundtrip():
    s = hierarchical_schedule(Topology(4, 2), 10)
    back = ReduceSchedule.from_json(s.to_json())
    assert back.algorithm == s.algorithm and back.p == 4 and back.k == 2
    assert back.total_steps == s.total_steps
    for a, b in zip(back.rounds, s.rounds):
        assert a.phase == b.phase
        assert np.array_equal(a.transfers, b.transfers)


def test_ring_p2_golden_schedule():
    s = ring_schedule(2, 4)
    assert [r.phase for r in s.rounds] == ["reduce_scatter", "allgather"]
    assert s.rounds[0].transfers.tolist() == [[0, 1, 8], [1, 0, 8]]
    assert s.rounds[1].transfers.tolist() == [[0, 1, 8], [1, 0, 8]]


# --- execution --------------------------------------------------------------


def test_ring_matches_sequential_oracle_bitwise():
    rng = np.random.default_rng(1)
    for p in (2, 3, 7, 16):
        bufs = [rng.standard_normal(513).astype(np.float32) * 10 for _ in range(p)]
        out, sched = ring_allreduce(bufs)
        oracle = seq_sum_oracle(bufs)
        assert sched.total_steps == 2 * (p - 1)
        for o in out:
            assert np.array_equal(o, oracle)


def test_cross_algorithm_bitwise_equality():
    rng = np.random.default_rng(2)
    bufs = [rng.standard_normal(200).astype(np.float32) for _ in range(8)]
    ring_out, _ = ring_allreduce(bufs)
    hier_out, _ = hierarchical_allreduce(bufs, Topology(8, 2))
    assert np.array_equal(ring_out[0], hier_out[0])


def test_mean_mode():
    bufs = [np.full(4, float(i + 1), dtype=np.float32) for i in range(4)]
    out, _ = ring_allreduce(bufs, op="mean")
    assert np.array_equal(out[0], np.full(4, 2.5, dtype=np.float32))


def test_mean_permutation_invariance():
    rng = np.random.default_rng(3)
    bufs = [rng.standard_normal(300).astype(np.float32) for _ in range(6)]
    a, _ = ring_allreduce(bufs, op="mean")
    b, _ = ring_allreduce(bufs[::-1], op="mean")
    np.testing.assert_allclose(a[0], b[0], rtol=1e-6, atol=1e-7)


def test_second_reduce_with_zeros_is_identity():
    rng = np.random.default_rng(4)
    bufs = [rng.standard_normal(64).astype(np.float32) for _ in range(4)]
    once, _ = ring_allreduce(bufs)
    again, _ = ring_allreduce([once[0]] + [np.zeros(64, np.float32)] * 3)
    assert np.array_equal(again[0], once[0])


def test_p1_identity():
    buf = np.arange(5, dtype=np.float32)
    out, sched = ring_allreduce([buf])
    assert sched.total_steps == 0
    assert np.array_equal(out[0], buf)
    out[0][0] = -1  # results are copies, caller owns them
    assert buf[0] == 0


def test_hybrid_selector_boundaries():
    assert choose_algorithm(100, 101) == "hierarchical"
    assert choose_algorithm(100, 100) == "ring"   # tie goes to ring
    assert choose_algorithm(100, 0) == "ring"     # zero threshold: always ring
    bufs = [np.ones(25, np.float32) for _ in range(4)]  # 100-byte payloads
    _, sched = hybrid_allreduce(bufs, Topology(4, 2), eta_bytes=101)
    assert sched.algorithm == "hierarchical"
    _, sched = hybrid_allreduce(bufs, Topology(4, 2), eta_bytes=100)
    assert sched.algorithm == "ring"


def test_validation_errors():
    good = np.ones(4, np.float32)
    with pytest.raises(ValueError, match="at least one"):
        ring_allreduce([])
    with pytest.raises(ValueError, match="expected float32"):
        ring_allreduce([good.astype(np.float64), good.astype(np.float64)])
    with pytest.raises(ValueError, match="shape"):
        ring_allreduce([good, np.ones(5, np.float32)])
    with pytest.raises(ValueError, match="topology is for"):
        ring_allreduce([good, good], Topology(4, 2))
    with pytest.raises(ValueError, match="needs a topology"):
        allreduce_f16([np.zeros(4, np.uint16)] * 2, algorithm="hierarchical")
    with pytest.raises(ValueError, match="unknown algorithm"):
        allreduce_f16([np.zeros(4, np.uint16)] * 2, algorithm="tree")


# --- fp16 path --------------------------------------------------------------


def test_f16_allreduce_error_bound_and_determinism():
    rng = np.random.default_rng(5)
    for p in (2, 5, 16):
        bufs32 = [rng.uniform(0.5, 1.5, 2048).astype(np.float32) for _ in range(p)]
        bufs16 = [hp.f32_to_f16(b) for b in bufs32]
        out, sched = allreduce_f16(bufs16)
        ref = seq_sum_oracle(bufs32)
        rel = np.max(np.abs(hp.f16_to_f32(out[0]) - ref) / np.abs(ref))
        assert rel <= 2.0**-9
        assert out[0].dtype == np.uint16
        again, _ = allreduce_f16(bufs16)
        assert np.array_equal(out[0], again[0])
        # schedule accounts 2-byte elements
        assert sched.bytes_on_wire == 2 * (p - 1) * 2048 * 2


def test_f16_hierarchical_variant():
    rng = np.random.default_rng(6)
    bufs32 = [rng.uniform(0.5, 1.5, 256).astype(np.float32) for _ in range(8)]
    bufs16 = [hp.f32_to_f16(b) for b in bufs32]
    out, sched = allreduce_f16(bufs16, Topology(8, 4), algorithm="hierarchical")
    assert sched.algorithm == "hierarchical"
    ref = seq_sum_oracle(bufs32)
    rel = np.max(np.abs(hp.f16_to_f32(out[0]) - ref) / np.abs(ref))
    assert rel <= 2.0**-9


# --- properties -------------------------------------------------------------


@settings(max_examples=150, derandomize=True, deadline=None)
@given(
    p=st.integers(min_value=1, max_value=24),
    k_idx=st.integers(min_value=0, max_value=10),
    n=st.integers(min_value=1, max_value=300),
)
def test_schedule_accounting_properties(p, k_idx, n):
    divisors = [d for d in range(1, p + 1) if p % d == 0]
    k = divisors[k_idx % len(divisors)]
    ring = ring_schedule(p, n)
    hier = hierarchical_schedule(Topology(p, k), n)
    assert ring.total_steps == 2 * (p - 1)
    assert hier.total_steps == (4 * (k - 1) + 2 * (p // k - 1) if p > 1 else 0)
    for r in ring.rounds + hier.rounds:
        assert np.all(r.transfers[:, 2] >= 0)
        assert np.all(r.transfers[:, 0] != r.transfers[:, 1])  # no self-sends


@settings(max_examples=100, derandomize=True, deadline=None)
@given(
    p=st.integers(min_value=2, max_value=10),
    n=st.integers(min_value=1, max_value=64),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_allreduce_oracle_property(p, n, seed):
    rng = np.random.default_rng(seed)
    bufs = [rng.standard_normal(n).astype(np.float32) for _ in range(p)]
    out, _ = ring_allreduce(bufs)
    assert np.array_equal(out[0], seq_sum_oracle(bufs))
