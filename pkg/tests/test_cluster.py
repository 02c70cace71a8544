from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftfair.cluster import (
    COMPUTE,
    NETWORK,
    ClusterSpec,
    GpuId,
    OwnershipState,
    SlowdownProfile,
    SpanLevel,
    best_score_pick,
    consolidated_counts,
    consolidated_pick,
    free_gpus,
    placement_score,
    slot_counts,
    slowdown,
    span_level,
    spread_pick,
)


def two_rack_cluster() -> ClusterSpec:
    # rack 0: machine with two 2-GPU slots, machine with one 4-GPU slot; rack 1: one 2-GPU machine
    return ClusterSpec.from_nested([[[2, 2], [4]], [[2]]])


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


def test_total_gpus_is_sum_of_slots():
    spec = two_rack_cluster()
    assert spec.total_gpus == 10
    assert len(spec.all_gpus()) == 10
    assert len(set(spec.all_gpus())) == 10


def test_uniform_builder():
    spec = ClusterSpec.uniform(2, 4, 8, slots_per_machine=2)
    assert spec.total_gpus == 64
    assert spec.racks[1][3] == (4, 4)


def test_every_gpu_resolves():
    spec = two_rack_cluster()
    assert all(spec.contains(g) for g in spec.all_gpus())
    assert not spec.contains(GpuId(0, 0, 0, 2))
    assert not spec.contains(GpuId(2, 0, 0, 0))
    assert not spec.contains(GpuId(0, -1, 0, 0))


@pytest.mark.parametrize("bad", [[[[0]]], [[]], [[[]]]])
def test_invalid_cluster_rejected(bad):
    with pytest.raises(ValueError):
        ClusterSpec.from_nested(bad)


# ---------------------------------------------------------------------------
# Span and slowdown
# ---------------------------------------------------------------------------


def test_span_levels():
    assert span_level([GpuId(0, 0, 0, 0)]) == SpanLevel.SLOT
    assert span_level([GpuId(0, 0, 0, 0), GpuId(0, 0, 1, 0)]) == SpanLevel.MACHINE
    assert span_level([GpuId(0, 0, 0, 0), GpuId(0, 1, 0, 0)]) == SpanLevel.RACK
    assert span_level([GpuId(0, 0, 0, 0), GpuId(1, 0, 0, 0)]) == SpanLevel.CROSS_RACK


def test_span_of_empty_set_errors():
    with pytest.raises(ValueError, match="empty allocation"):
        span_level([])
    with pytest.raises(ValueError, match="empty allocation"):
        slowdown(NETWORK, frozenset())


def test_default_profiles():
    assert NETWORK.factors() == (1.0, 1.2, 2.0, 2.5)
    assert COMPUTE.factors() == (1.0, 1.0, 1.0, 1.0)


def test_network_app_across_two_machines_halves_speed():
    assert slowdown(NETWORK, [GpuId(0, 0, 0, 0), GpuId(0, 1, 0, 0)]) == 2.0


def test_compute_app_is_placement_insensitive():
    spread = [GpuId(0, 0, 0, 0), GpuId(0, 1, 0, 0), GpuId(1, 0, 0, 0), GpuId(1, 1, 0, 0)]
    assert slowdown(COMPUTE, spread) == 1.0
    assert placement_score(COMPUTE, spread) == 1.0


def test_single_gpu_never_slows_down():
    for profile in (COMPUTE, NETWORK):
        assert slowdown(profile, [GpuId(1, 0, 0, 1)]) == 1.0


def test_placement_score_reciprocal():
    assert placement_score(NETWORK, [GpuId(0, 0, 0, 0)]) == 1.0
    assert placement_score(NETWORK, [GpuId(0, 0, 0, 0), GpuId(0, 1, 0, 0)]) == 0.5


@pytest.mark.parametrize("factors", [(1.0, 0.9, 1.0, 1.0), (1.0, 2.0, 1.5, 3.0), (1.1, 1.2, 1.3, 1.4)])
def test_profile_validation(factors):
    with pytest.raises(ValueError):
        SlowdownProfile.from_factors(factors)


gpu_sets = st.sets(st.sampled_from(two_rack_cluster().all_gpus()), min_size=1)


@given(gpu_sets)
def test_score_times_slowdown_is_one(gpus):
    for profile in (COMPUTE, NETWORK):
        assert placement_score(profile, gpus) * slowdown(profile, gpus) == pytest.approx(1.0)


@given(gpu_sets, st.sampled_from(two_rack_cluster().all_gpus()))
def test_widening_never_lowers_slowdown(gpus, extra):
    assert slowdown(NETWORK, gpus | {extra}) >= slowdown(NETWORK, gpus)


# ---------------------------------------------------------------------------
# Ownership
# ---------------------------------------------------------------------------


def test_free_gpus_all_free():
    spec = two_rack_cluster()
    assert free_gpus(OwnershipState(spec), 0.0) == tuple(sorted(spec.all_gpus()))


def test_lease_expiry_is_inclusive():
    spec = ClusterSpec.from_nested([[[2]]])
    state = OwnershipState(spec)
    state.assign(spec.all_gpus(), "A", expiry=600.0, now=0.0)
    assert free_gpus(state, 599.0) == ()
    assert free_gpus(state, 600.0) == spec.all_gpus()


def test_partial_lease():
    spec = ClusterSpec.from_nested([[[2]]])
    state = OwnershipState(spec)
    a, b = spec.all_gpus()
    state.assign([a], "A", expiry=900.0, now=0.0)
    assert free_gpus(state, 600.0) == (b,)
    assert state.owner(a, 600.0) == "A"
    assert state.held_by("A", 600.0) == frozenset([a])


def test_exclusive_ownership():
    spec = ClusterSpec.from_nested([[[2]]])
    state = OwnershipState(spec)
    a, _ = spec.all_gpus()
    state.assign([a], "A", expiry=900.0, now=0.0)
    with pytest.raises(ValueError):
        state.assign([a], "B", expiry=900.0, now=100.0)
    with pytest.raises(ValueError):
        state.assign([a], "B", expiry=50.0, now=100.0)
    with pytest.raises(KeyError):
        state.assign([GpuId(5, 0, 0, 0)], "B", expiry=900.0, now=0.0)


# ---------------------------------------------------------------------------
# Picks
# ---------------------------------------------------------------------------


def test_consolidated_pick_prefers_narrowest_span():
    spec = two_rack_cluster()
    pick = consolidated_pick(spec.all_gpus(), 4)
    assert span_level(pick) == SpanLevel.SLOT  # the 4-GPU slot
    pick = consolidated_pick(spec.all_gpus(), 2)
    # best fit: a 2-GPU slot rather than half of the 4-GPU slot
    assert span_level(pick) == SpanLevel.SLOT
    assert {g.slot_key for g in pick} == {(0, 0, 0)}


def test_consolidated_pick_uses_anchor():
    spec = two_rack_cluster()
    anchor = [GpuId(1, 0, 0, 0)]
    pool = [g for g in spec.all_gpus() if g not in anchor]
    pick = consolidated_pick(pool, 1, anchor=anchor)
    assert pick == frozenset([GpuId(1, 0, 0, 1)])


def test_spread_pick_crosses_machines():
    spec = two_rack_cluster()
    pick = spread_pick(spec.all_gpus(), 3)
    assert len({g.machine_key for g in pick}) == 3


def test_best_score_pick_is_lexicographic_among_best():
    row = frozenset([GpuId(0, 0, 0, 0), GpuId(0, 0, 0, 1), GpuId(0, 1, 0, 0), GpuId(0, 1, 0, 1)])
    assert best_score_pick(row, 2, NETWORK) == frozenset([GpuId(0, 0, 0, 0), GpuId(0, 0, 0, 1)])
    # compute apps score 1 everywhere, so the lexicographically smallest pair wins
    assert best_score_pick(row, 2, COMPUTE) == frozenset([GpuId(0, 0, 0, 0), GpuId(0, 0, 0, 1)])


def test_best_score_pick_matches_exhaustive_search():
    spec = two_rack_cluster()
    pool = spec.all_gpus()
    for k in range(1, 6):
        for profile in (COMPUTE, NETWORK):
            subsets = [frozenset(c) for c in itertools.combinations(pool, k)]
            top = max(placement_score(profile, s) for s in subsets)
            expected = min((s for s in subsets if placement_score(profile, s) == top), key=sorted)
            assert best_score_pick(pool, k, profile) == expected


@settings(max_examples=200)
@given(st.data())
def test_count_level_pick_agrees_with_set_pick(data):
    spec = two_rack_cluster()
    pool = data.draw(st.sets(st.sampled_from(spec.all_gpus()), min_size=1))
    k = data.draw(st.integers(1, len(pool)))
    assert slot_counts(consolidated_pick(pool, k)) == consolidated_counts(slot_counts(pool), k)
