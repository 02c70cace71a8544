from __future__ import annotations

import numpy as np
import pytest

from ftfair.apps import AppRuntime, AppSpec, JobSpec, SingleJob
from ftfair.auction import offline_minmax_rho
from ftfair.bidding import Agent
from ftfair.cluster import COMPUTE, NETWORK, ClusterSpec, GpuId, span_level, SpanLevel
from ftfair.instances import drf_allocation, drf_instance_1, drf_instance_2
from ftfair.schedulers import (
    POLICY_NAMES,
    SchedContext,
    SchedulerPolicy,
    check_properties,
    drf_decide,
    gandiva_decide,
    optimus_decide,
    predicted_loss_drop,
    slaq_decide,
    tiresias_decide,
)


def agent(app_id, cap=4, profile=NETWORK, arrival=0.0, iters=1000, attained=0.0, held=frozenset(),
          loss=(1.0, 1.0, 0.0)):
    app = AppSpec(app_id, arrival, (JobSpec(1.0, iters, cap, loss),), SingleJob(), profile, cap)
    rt = AppRuntime.start(app, now=arrival, n_avg=2)
    rt.gpu_seconds_consumed = attained
    rt.allocation = frozenset(held)
    return Agent(app, rt)


def ctx(cluster, agents, free=None):
    free = frozenset(cluster.all_gpus()) if free is None else frozenset(free)
    return SchedContext(0.0, cluster, agents, free, np.random.default_rng(0))


def test_policy_validation():
    assert set(POLICY_NAMES) == {"themis", "gandiva", "tiresias", "optimus", "slaq", "drf"}
    with pytest.raises(ValueError, match="unknown scheduler"):
        SchedulerPolicy("fifo")
    with pytest.raises(ValueError):
        SchedulerPolicy("themis", f=1.5)
    with pytest.raises(ValueError):
        SchedulerPolicy("themis", lease=0.0)


@pytest.mark.parametrize("name", POLICY_NAMES)
def test_every_policy_grants_only_free_gpus_disjointly(name):
    cluster = ClusterSpec.uniform(1, 3, 4, slots_per_machine=2)
    busy = cluster.all_gpus()[:2]
    agents = [agent("a", 4, held=busy), agent("b", 4, COMPUTE, arrival=1.0), agent("c", 2, arrival=2.0)]
    free = frozenset(cluster.all_gpus()) - frozenset(busy)
    decision = SchedulerPolicy(name).decide(ctx(cluster, agents, free))
    granted = [g for gs in decision.grants.values() for g in gs]
    assert len(granted) == len(set(granted))
    assert set(granted) <= free
    for a in agents:
        assert len(decision.grants.get(a.app_id, frozenset())) + len(a.runtime.allocation) <= a.app.app_demand_max


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def test_gandiva_prefers_consolidated_placement():
    cluster = ClusterSpec.from_nested([[[4], [2], [2]]])
    grants = gandiva_decide(ctx(cluster, [agent("net", 4)]))
    assert span_level(grants["net"]) == SpanLevel.SLOT


def test_gandiva_tie_goes_to_earlier_arrival():
    cluster = ClusterSpec.from_nested([[[4]]])
    grants = gandiva_decide(ctx(cluster, [agent("late", 4, COMPUTE, arrival=5.0), agent("early", 4, arrival=1.0)]))
    assert set(grants) == {"early"}


def test_tiresias_serves_least_attained_first():
    cluster = ClusterSpec.uniform(1, 1, 4)
    agents = [agent("rich", 4, attained=500.0), agent("poor", 4, attained=10.0, arrival=3.0)]
    grants = tiresias_decide(ctx(cluster, agents))
    assert set(grants) == {"poor"} and len(grants["poor"]) == 4


def test_tiresias_is_placement_blind():
    cluster = ClusterSpec.from_nested([[[1], [1]], [[2]]])
    free = [GpuId(0, 0, 0, 0), GpuId(1, 0, 0, 0)]
    grants = tiresias_decide(ctx(cluster, [agent("net", 2)], free))
    assert span_level(grants["net"]) == SpanLevel.CROSS_RACK


def test_optimus_serves_shortest_remaining_first():
    cluster = ClusterSpec.uniform(1, 1, 4)
    agents = [agent("long", 4, iters=10_000), agent("short", 4, iters=100, arrival=5.0)]
    grants = optimus_decide(ctx(cluster, agents))
    assert set(grants) == {"short"}


def test_slaq_serves_biggest_loss_drop_first():
    cluster = ClusterSpec.uniform(1, 1, 4)
    flat = agent("flat", 4, loss=(0.01, 1.0, 0.0))
    steep = agent("steep", 4, arrival=5.0, loss=(10.0, 1.0, 0.0))
    grants = slaq_decide(ctx(cluster, [flat, steep]))
    assert set(grants) == {"steep"}
    g = frozenset(cluster.all_gpus())
    assert predicted_loss_drop(steep.app, steep.runtime, g, 600.0) > predicted_loss_drop(flat.app, flat.runtime, g, 600.0)


def test_drf_equalizes_gpu_counts():
    cluster = ClusterSpec.uniform(1, 2, 4)
    grants = drf_decide(ctx(cluster, [agent("a", 8), agent("b", 8, arrival=1.0)]))
    assert len(grants["a"]) == len(grants["b"]) == 4


# ---------------------------------------------------------------------------
# Fairness properties and the DRF counterexamples
# ---------------------------------------------------------------------------


def test_drf_instance_1_violates_sharing_incentive():
    cluster, apps = drf_instance_1()
    alloc = drf_allocation(cluster, apps)
    report = check_properties(apps, alloc, cluster)
    assert sorted(report.si_violations) == ["A1", "A2"]
    # each app is split over both machines
    assert all(len({g.machine_key for g in s}) == 2 for s in alloc.values())


def test_drf_instance_2_violates_envy_freeness_and_pareto_efficiency():
    cluster, apps = drf_instance_2()
    alloc = drf_allocation(cluster, apps, sequential=True)
    report = check_properties(apps, alloc, cluster)
    assert ("A2", "A1") in report.envy
    assert not report.pe_ok
    witness = report.pe_witness
    assert span_level(witness["A2"]) == SpanLevel.SLOT


@pytest.mark.parametrize("build", [drf_instance_1, drf_instance_2])
def test_minmax_allocation_is_clean(build):
    cluster, apps = build()
    report = check_properties(apps, offline_minmax_rho(apps, cluster), cluster)
    assert report.clean, report


def test_minmax_gives_network_app_the_big_machine():
    cluster, apps = drf_instance_2()
    alloc = offline_minmax_rho(apps, cluster)
    assert {g.machine for g in alloc["A2"]} == {0}


def test_property_check_size_guard():
    cluster = ClusterSpec.uniform(1, 4, 4)
    apps = [AppSpec(f"a{i}", 0.0, (JobSpec(1.0, 10, 1),)) for i in range(2)]
    with pytest.raises(ValueError, match="too large"):
        check_properties(apps, {}, cluster)
