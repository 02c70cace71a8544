"""Small hand-built scenarios: the 16-GPU bid-table example and the two DRF
counterexamples."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .apps import AppRuntime, AppSpec, JobSpec, SingleJob, SuccessiveHalving, halving_schedule
from .bidding import Agent, BidTable, Offer, prepare_bid
from .cluster import COMPUTE, NETWORK, ClusterSpec
from .schedulers import SchedContext, drf_decide

# Reference bid values as published next to the values our evaluation yields.
WORKED_COUNTS = (1, 2, 4, 8, 16)
WORKED_REFERENCE = {1: 4.0, 2: 2.0, 4: 1.0, 8: 0.5, 16: 0.34}
WORKED_EXPECTED = {1: 4.0, 2: 2.0, 4: 1.064, 8: 0.532, 16: 0.356}
WORKED_T_ID = 2500.0


@dataclass
class WorkedExample:
    cluster: ClusterSpec
    app: AppSpec
    runtime: AppRuntime


def worked_example() -> WorkedExample:
    """One 16-GPU machine; 4 successive-halving jobs with a 10000 GPU-s budget."""
    cluster = ClusterSpec.uniform(1, 1, 16)
    serial = (80.0, 100.0, 100.0, 120.0)
    iters = halving_schedule(10000.0, serial)
    total = sum(iters)
    jobs = tuple(JobSpec(s, total, job_demand_max=8) for s in serial)
    app = AppSpec("hp-search", 0.0, jobs, SuccessiveHalving(10000.0, 4, iters), COMPUTE, 16)
    return WorkedExample(cluster, app, AppRuntime.start(app, now=0.0, n_avg=4))


def worked_bid_table(ex: WorkedExample = None) -> BidTable:
    ex = ex or worked_example()
    offer = Offer(0, frozenset(ex.cluster.all_gpus()))
    return prepare_bid(ex.app, ex.runtime, offer, 0.0, ex.cluster)


def worked_rows(ex: WorkedExample = None) -> Dict[int, float]:
    """Bid rho by GPU count for the counts listed in the reference table."""
    table = worked_bid_table(ex)
    by_count = {r.count: r.rho for r in table.rows}
    return {k: by_count[k] for k in WORKED_COUNTS}


# ---------------------------------------------------------------------------
# DRF counterexamples
# ---------------------------------------------------------------------------


def _gang_app(app_id: str, profile, arrival: float = 0.0) -> AppSpec:
    return AppSpec(app_id, arrival, (JobSpec(1.0, 1000, job_demand_max=4),), SingleJob(), profile, 4)


def drf_instance_1() -> Tuple[ClusterSpec, List[AppSpec]]:
    """Two 4-GPU machines, two placement-sensitive 4-GPU apps."""
    cluster = ClusterSpec.from_nested([[[4], [4]]])
    return cluster, [_gang_app("A1", NETWORK), _gang_app("A2", NETWORK)]


def drf_instance_2() -> Tuple[ClusterSpec, List[AppSpec]]:
    """One 4-GPU and two 2-GPU machines; A1 is insensitive, A2 sensitive."""
    cluster = ClusterSpec.from_nested([[[4], [2], [2]]])
    return cluster, [_gang_app("A1", COMPUTE, 0.0), _gang_app("A2", NETWORK, 1.0)]


def drf_allocation(cluster: ClusterSpec, apps: List[AppSpec],
                   sequential: bool = False) -> Dict[str, frozenset]:
    """DRF grants when apps arrive together, or one after another if ``sequential``."""
    agents = [Agent(a, AppRuntime.start(a, now=0.0)) for a in apps]
    free = frozenset(cluster.all_gpus())
    rng = np.random.default_rng(0)
    batches = [[a] for a in agents] if sequential else [agents]
    out: Dict[str, frozenset] = {}
    live: List[Agent] = []
    for batch in batches:
        live.extend(batch)
        grants = drf_decide(SchedContext(0.0, cluster, live, free, rng))
        for app_id, g in grants.items():
            out[app_id] = out.get(app_id, frozenset()) | g
            free -= g
            agent = next(a for a in live if a.app_id == app_id)
            agent.runtime.allocation = out[app_id]
    return out
