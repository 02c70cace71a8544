"""Scheduler policies behind one interface, plus SI/PE/EF property checks.

Every policy sees the same snapshot (clock, live agents, free GPUs) and
returns new grants drawn from the free GPUs only; the engine wraps grants
in leases of the same length regardless of policy.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .apps import (
    AppRuntime,
    AppSpec,
    active_jobs,
    job_rates,
    job_targets,
    rho,
    shared_time_left,
    useful_demand,
)
from .auction import AuctionResult, _distributions, _realize, _slot_index, run_round
from .bidding import DEFAULT_CANDIDATE_CAP, Agent
from .cluster import EMPTY, ClusterSpec, consolidated_pick, placement_score

POLICY_NAMES = ("themis", "gandiva", "tiresias", "optimus", "slaq", "drf")


@dataclass
class SchedContext:
    now: float
    cluster: ClusterSpec
    agents: Sequence[Agent]
    free: frozenset
    rng: np.random.Generator
    lease: float = 600.0
    cap: int = DEFAULT_CANDIDATE_CAP


@dataclass
class Decision:
    grants: Dict[str, frozenset] = field(default_factory=dict)
    auction: Optional[AuctionResult] = None


@dataclass(frozen=True)
class SchedulerPolicy:
    name: str = "themis"
    f: float = 0.8
    lease: float = 600.0

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown scheduler {self.name!r}; choose from {', '.join(POLICY_NAMES)}")
        if not 0 <= self.f <= 1:
            raise ValueError("f must lie in [0, 1]")
        if self.lease <= 0:
            raise ValueError("lease must be positive")

    def decide(self, ctx: SchedContext) -> Decision:
        if self.name == "themis":
            return themis_decide(ctx, self.f)
        return Decision(_BASELINES[self.name](ctx))


def _live(ctx: SchedContext) -> List[Agent]:
    return [a for a in ctx.agents if a.runtime.status != "finished"]


def _demand_left(agent: Agent) -> int:
    return max(0, useful_demand(agent.app, agent.runtime) - len(agent.runtime.allocation))


def _order_key(agent: Agent) -> Tuple[float, str]:
    return (agent.app.arrival_time, agent.app_id)


# ---------------------------------------------------------------------------
# Themis
# ---------------------------------------------------------------------------


def themis_decide(ctx: SchedContext, f: float) -> Decision:
    live = _live(ctx)
    if not live or not ctx.free:
        return Decision()
    result, leases = run_round(live, ctx.free, f, ctx.lease, ctx.now, ctx.cluster, ctx.rng, ctx.cap)
    return Decision({l.app_id: l.gpus for l in leases}, result)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def gandiva_decide(ctx: SchedContext) -> Dict[str, frozenset]:
    """Greedy on placement score; ties to the bigger grant, then earlier arrival."""
    free = set(ctx.free)
    left = {a.app_id: _demand_left(a) for a in _live(ctx)}
    held = {a.app_id: frozenset(a.runtime.allocation) for a in _live(ctx)}
    grants: Dict[str, frozenset] = {}
    while free:
        best = None
        for a in _live(ctx):
            want = min(left[a.app_id], len(free))
            for k in range(want, 0, -1):
                pick = consolidated_pick(free, k, anchor=held[a.app_id])
                score = placement_score(a.app.profile, held[a.app_id] | pick)
                key = (-score, -k) + _order_key(a)
                if best is None or key < best[0]:
                    best = (key, a.app_id, pick)
        if best is None:
            break
        _, app_id, pick = best
        grants[app_id] = grants.get(app_id, EMPTY) | pick
        held[app_id] |= pick
        left[app_id] -= len(pick)
        free -= pick
    return grants


def tiresias_decide(ctx: SchedContext) -> Dict[str, frozenset]:
    """Least attained GPU service first; placement-blind GPU order."""
    free = sorted(ctx.free)
    grants: Dict[str, frozenset] = {}
    for a in sorted(_live(ctx), key=lambda a: (a.runtime.gpu_seconds_consumed,) + _order_key(a)):
        k = min(_demand_left(a), len(free))
        if k:
            grants[a.app_id] = frozenset(free[:k])
            free = free[k:]
    return grants


def _greedy_by(ctx: SchedContext, score: Callable[[Agent, frozenset], Optional[float]]) -> Dict[str, frozenset]:
    """Rank apps by ``score`` of a consolidated trial grant (lower first), then grant in order."""
    free = set(ctx.free)
    ranked = []
    for a in _live(ctx):
        k = min(_demand_left(a), len(free))
        if not k:
            continue
        trial = consolidated_pick(free, k, anchor=a.runtime.allocation)
        s = score(a, frozenset(a.runtime.allocation) | trial)
        if s is not None:
            ranked.append(((s,) + _order_key(a), a))
    grants: Dict[str, frozenset] = {}
    for _, a in sorted(ranked, key=lambda r: r[0]):
        k = min(_demand_left(a), len(free))
        if not k:
            continue
        pick = consolidated_pick(free, k, anchor=a.runtime.allocation)
        grants[a.app_id] = pick
        free -= pick
    return grants


def optimus_decide(ctx: SchedContext) -> Dict[str, frozenset]:
    """Shortest remaining time first."""
    def remaining(a: Agent, g: frozenset) -> Optional[float]:
        t = shared_time_left(a.app, a.runtime, g)
        return t if t > 0 else None
    return _greedy_by(ctx, remaining)


def predicted_loss_drop(app: AppSpec, rt: AppRuntime, g: frozenset, window: float) -> float:
    """Sum over active jobs of the loss decrease expected within ``window`` seconds on ``g``."""
    targets = job_targets(app, rt)
    drop = 0.0
    for j, rate in job_rates(app, rt, g).items():
        now_i = rt.iters_done[j]
        then_i = min(targets[j], now_i + rate * window)
        drop += app.jobs[j].loss(now_i) - app.jobs[j].loss(then_i)
    return drop


def slaq_decide(ctx: SchedContext) -> Dict[str, frozenset]:
    """Greatest predicted loss decrease over the next lease first."""
    def negative_drop(a: Agent, g: frozenset) -> Optional[float]:
        if not active_jobs(a.app, a.runtime):
            return None
        return -predicted_loss_drop(a.app, a.runtime, g, ctx.lease)
    return _greedy_by(ctx, negative_drop)


def drf_decide(ctx: SchedContext) -> Dict[str, frozenset]:
    """One GPU at a time, in GPU order, to the app holding the fewest GPUs."""
    live = _live(ctx)
    held = {a.app_id: len(a.runtime.allocation) for a in live}
    left = {a.app_id: _demand_left(a) for a in live}
    grants: Dict[str, set] = {}
    for g in sorted(ctx.free):
        able = [a for a in live if left[a.app_id] > 0]
        if not able:
            break
        a = min(able, key=lambda a: (held[a.app_id],) + _order_key(a))
        grants.setdefault(a.app_id, set()).add(g)
        held[a.app_id] += 1
        left[a.app_id] -= 1
    return {a: frozenset(s) for a, s in grants.items()}


_BASELINES = {
    "gandiva": gandiva_decide,
    "tiresias": tiresias_decide,
    "optimus": optimus_decide,
    "slaq": slaq_decide,
    "drf": drf_decide,
}


# ---------------------------------------------------------------------------
# Fairness properties
# ---------------------------------------------------------------------------


@dataclass
class PropertyReport:
    rho: Dict[str, float]
    dedicated_time: Dict[str, float]
    shared_time: Dict[str, float]
    si: Dict[str, bool]
    envy: List[Tuple[str, str]]
    pe_witness: Optional[Dict[str, frozenset]]

    @property
    def si_violations(self) -> List[str]:
        return [a for a, ok in self.si.items() if not ok]

    @property
    def ef_ok(self) -> bool:
        return not self.envy

    @property
    def pe_ok(self) -> bool:
        return self.pe_witness is None

    @property
    def clean(self) -> bool:
        return not self.si_violations and self.ef_ok and self.pe_ok


def _count_vectors_of_size(capacity: Sequence[int], k: int):
    for vec in itertools.product(*(range(c + 1) for c in capacity)):
        if sum(vec) == k:
            yield vec


def check_properties(apps: Sequence[AppSpec], allocations: Dict[str, frozenset],
                     cluster: ClusterSpec, contention: Optional[int] = None,
                     tol: float = 1e-9, max_apps: int = 4, max_gpus: int = 12) -> PropertyReport:
    """Sharing incentive, envy-freeness and Pareto efficiency of a static allocation.

    SI compares the app's finish time on its allocation to the time on the best
    dedicated set of floor(R / N) GPUs.  Apps start together at t=0.
    """
    if len(apps) > max_apps or cluster.total_gpus > max_gpus:
        raise ValueError("instance too large for property checking")
    n = contention or len(apps)
    everything = frozenset(cluster.all_gpus())
    for a in apps:
        if not allocations.get(a.app_id, EMPTY) <= everything:
            raise ValueError(f"allocation of {a.app_id} is outside the cluster")
    rts = {a.app_id: AppRuntime.start(a, now=0.0, n_avg=n) for a in apps}
    _, capacity, members = _slot_index(everything)

    def value(a: AppSpec, g: frozenset) -> float:
        return rho(a, rts[a.app_id], g, 0.0, cluster)

    rhos = {a.app_id: value(a, allocations.get(a.app_id, EMPTY)) for a in apps}
    share = cluster.total_gpus // n
    shared, dedicated, si = {}, {}, {}
    for a in apps:
        rt = rts[a.app_id]
        t_sh = shared_time_left(a, rt, allocations.get(a.app_id, EMPTY))
        t_ded = min(shared_time_left(a, rt, _realize([vec], members)[0])
                    for vec in _count_vectors_of_size(capacity, share))
        shared[a.app_id], dedicated[a.app_id] = t_sh, t_ded
        si[a.app_id] = t_sh <= t_ded * (1 + tol)

    envy = []
    for a in apps:
        for b in apps:
            other = allocations.get(b.app_id, EMPTY)
            if a is b or not other:
                continue
            if value(a, other) < rhos[a.app_id] * (1 - tol):
                envy.append((a.app_id, b.app_id))

    witness = None
    cache: List[Dict[tuple, float]] = [dict() for _ in apps]
    per_slot = [list(_distributions(c, len(apps))) for c in capacity]
    for combo in itertools.product(*per_slot):
        vecs = [tuple(combo[s][i] for s in range(len(capacity))) for i in range(len(apps))]
        better = False
        ok = True
        for i, (a, vec) in enumerate(zip(apps, vecs)):
            r = cache[i].get(vec)
            if r is None:
                r = value(a, _realize([vec], members)[0])
                cache[i][vec] = r
            if r > rhos[a.app_id] * (1 + tol):
                ok = False
                break
            if r < rhos[a.app_id] * (1 - tol):
                better = True
        if ok and better:
            witness = dict(zip((a.app_id for a in apps), _realize(vecs, members)))
            break
    return PropertyReport(rhos, dedicated, shared, si, envy, witness)
