from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftfair.apps import AppRuntime, AppSpec, JobSpec, SingleJob
from ftfair.cluster import COMPUTE, NETWORK, ClusterSpec
from ftfair.engine import EventKind, SimConfig, Simulator, apply_reallocation, run, update_navg
from ftfair.metrics import records_csv
from ftfair.schedulers import POLICY_NAMES, SchedulerPolicy
from ftfair.workload import desk_spec, generate


def gang(app_id, iters, cap, arrival=0.0, profile=COMPUTE, serial=1.0):
    return AppSpec(app_id, arrival, (JobSpec(serial, iters, cap),), SingleJob(), profile, cap)


def small_spec(**kw):
    return desk_spec(n_apps=4, jobs_min=2, jobs_max=4, task_median_gpu_s=600.0, **kw)


# ---------------------------------------------------------------------------
# Pure pieces
# ---------------------------------------------------------------------------


def test_reallocation_overheads():
    a, b, c = (frozenset([i]) for i in range(3))
    assert apply_reallocation(a, a, 100.0) == 100.0
    # gaining GPUs only restarts the container
    assert apply_reallocation(frozenset(), a, 100.0) == 142.5
    assert apply_reallocation(a, a | b, 100.0) == 142.5
    # losing any GPU also checkpoints
    assert apply_reallocation(a | b, a, 100.0) == 150.0
    assert apply_reallocation(a, c, 100.0, checkpoint=5.0, container=35.0) == 140.0


def test_navg_is_time_weighted():
    app = gang("a", 10, 1)
    rt = AppRuntime.start(app)
    update_navg(rt, 2, 100.0)
    update_navg(rt, 4, 300.0)
    assert rt.n_avg == pytest.approx((2 * 100 + 4 * 300) / 400)
    update_navg(rt, 0, 0.0)
    assert rt.n_avg == pytest.approx(3.5)


def test_event_kinds_order_within_a_timestamp():
    assert EventKind.ARRIVAL < EventKind.LEASE_EXPIRY < EventKind.MILESTONE < EventKind.TRIGGER


def test_config_validation():
    cluster = ClusterSpec.uniform(1, 1, 4)
    with pytest.raises(ValueError):
        SimConfig(cluster, checkpoint_overhead=-1.0)
    with pytest.raises(ValueError):
        SimConfig(cluster, theta=1.0)
    with pytest.raises(ValueError):
        SimConfig(cluster, lie_x=-5.0)
    with pytest.raises(ValueError):
        SimConfig(cluster, horizon=0.0)


def test_duplicate_app_ids_rejected():
    cluster = ClusterSpec.uniform(1, 1, 4)
    with pytest.raises(ValueError, match="duplicate"):
        Simulator(SimConfig(cluster), [gang("a", 10, 1), gang("a", 10, 1, arrival=5.0)])


# ---------------------------------------------------------------------------
# Hand-computed runs
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name", POLICY_NAMES)
def test_lone_app_timeline(name):
    # 4000 iterations of 1 s on 4 GPUs: 1000 s of work after a 42.5 s container
    # start; lease renewals at 600 s hand back the same GPUs, so no further overhead.
    cluster = ClusterSpec.uniform(1, 1, 4)
    out = run(SimConfig(cluster, SchedulerPolicy(name)), [gang("a", 4000, 4)])
    (rec,) = out.records
    assert rec.finish_s == pytest.approx(1042.5)
    assert rec.t_id_s == pytest.approx(1000.0)
    assert rec.rho == pytest.approx(1.0425)
    assert rec.gpu_seconds == pytest.approx(4000.0)
    assert not rec.censored
    assert out.ledger.balanced
    assert out.ledger.paused == Fraction(4 * 85, 2)
    assert out.ledger.consumed == 4000


def test_network_app_spread_runs_at_half_speed():
    cluster = ClusterSpec.uniform(1, 2, 2, slots_per_machine=1)
    out = run(SimConfig(cluster, SchedulerPolicy("tiresias")), [gang("a", 1000, 4, profile=NETWORK)])
    # 4 GPUs over two machines: 1000 x 1 s x 2.0 / 4 = 500 s after the container start
    assert out.records[0].finish_s == pytest.approx(542.5)
    assert out.records[0].mean_placement_score == pytest.approx(0.5)


def test_second_arrival_triggers_a_round():
    cluster = ClusterSpec.uniform(1, 1, 4)
    apps = [gang("a", 2000, 2), gang("b", 2000, 2, arrival=100.0)]
    out = run(SimConfig(cluster, SchedulerPolicy("drf")), apps)
    by_id = {r.app_id: r for r in out.records}
    assert by_id["a"].finish_s == pytest.approx(1042.5)
    assert by_id["b"].finish_s == pytest.approx(1142.5)


def test_horizon_censors_unfinished_apps():
    cluster = ClusterSpec.uniform(1, 1, 4)
    out = run(SimConfig(cluster, SchedulerPolicy("themis"), horizon=500.0), [gang("a", 4000, 4)])
    rec = out.records[0]
    assert rec.censored and rec.finish_s is None
    assert out.span == 500.0
    assert out.ledger.balanced


# ---------------------------------------------------------------------------
# Invariants on generated workloads
# ---------------------------------------------------------------------------


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(POLICY_NAMES))
def test_conservation_is_exact(seed, name):
    spec = small_spec()
    cluster = ClusterSpec.uniform(1, 2, 4, slots_per_machine=2)
    out = run(SimConfig(cluster, SchedulerPolicy(name), seed=seed), generate(spec, seed))
    led = out.ledger
    assert led.consumed + led.paused + led.idle == led.capacity
    assert led.capacity == cluster.total_gpus * Fraction(out.span)
    assert sum(out.per_app_consumed.values()) == led.consumed
    assert all(not r.censored for r in out.records)


@pytest.mark.parametrize("name", ["themis", "gandiva"])
def test_runs_are_deterministic(name):
    spec = small_spec()
    cluster = ClusterSpec.uniform(1, 2, 4, slots_per_machine=2)
    texts = []
    for _ in range(2):
        out = run(SimConfig(cluster, SchedulerPolicy(name), seed=7), generate(spec, 7))
        texts.append(records_csv(out.records, name, 7))
    assert texts[0] == texts[1]


def test_bid_errors_and_lies_keep_runs_valid():
    spec = small_spec()
    cluster = ClusterSpec.uniform(1, 2, 4, slots_per_machine=2)
    apps = generate(spec, 3)
    out = run(SimConfig(cluster, SchedulerPolicy("themis"), seed=3, theta=0.2,
                        lying_app=apps[0].app_id, lie_x=50.0), apps)
    assert out.ledger.balanced
    assert all(not r.censored for r in out.records)
