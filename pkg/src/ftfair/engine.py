"""Deterministic discrete-event simulator for lease-based GPU scheduling.

Events are ordered by (time, kind, sequence).  Progress between events is
closed-form, so there is no time step.  GPU-seconds are booked with exact
rational arithmetic: every held GPU-second is either consumed by training,
paused by a reallocation overhead, or idle, and every free GPU-second is idle.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .apps import (
    AppRuntime,
    AppSpec,
    advance,
    ideal_time,
    job_level_assign,
    time_to_next_milestone,
    useful_demand,
)
from .bidding import DEFAULT_CANDIDATE_CAP, Agent
from .cluster import EMPTY, ClusterSpec, OwnershipState, free_gpus, placement_score
from .schedulers import SchedContext, SchedulerPolicy


class EventKind(enum.IntEnum):
    ARRIVAL = 0
    LEASE_EXPIRY = 1
    MILESTONE = 2
    TRIGGER = 3


@dataclass(order=True)
class Event:
    time: float
    kind: EventKind
    seq: int
    payload: tuple = field(default=(), compare=False)


@dataclass
class SimConfig:
    cluster: ClusterSpec
    policy: SchedulerPolicy = field(default_factory=SchedulerPolicy)
    checkpoint_overhead: float = 7.5
    container_overhead: float = 42.5
    theta: float = 0.0
    lying_app: Optional[str] = None
    lie_x: float = 0.0
    cap: int = DEFAULT_CANDIDATE_CAP
    seed: int = 0
    horizon: float = math.inf

    def __post_init__(self):
        if self.checkpoint_overhead < 0 or self.container_overhead < 0:
            raise ValueError("overheads must be >= 0")
        if not 0 <= self.theta < 1:
            raise ValueError("theta must lie in [0, 1)")
        if self.lie_x < 0:
            raise ValueError("lie_x must be >= 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def f(self) -> float:
        return self.policy.f

    @property
    def lease(self) -> float:
        return self.policy.lease


@dataclass
class AppRecord:
    app_id: str
    arrival_s: float
    finish_s: Optional[float]
    t_sh_s: float
    t_id_s: float
    rho: float
    gpu_seconds: float
    mean_placement_score: float
    censored: bool


@dataclass
class Ledger:
    consumed: Fraction = Fraction(0)
    paused: Fraction = Fraction(0)
    idle: Fraction = Fraction(0)
    capacity: Fraction = Fraction(0)

    @property
    def balanced(self) -> bool:
        return self.consumed + self.paused + self.idle == self.capacity


@dataclass
class SimOutcome:
    scheduler: str
    seed: int
    records: List[AppRecord]
    ledger: Ledger
    span: float
    rounds: int = 0
    leftover_fractions: List[float] = field(default_factory=list)
    series: List[Tuple[float, int, int]] = field(default_factory=list)
    per_app_consumed: Dict[str, Fraction] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Small pure pieces
# ---------------------------------------------------------------------------


def apply_reallocation(old: frozenset, new: frozenset, now: float,
                       checkpoint: float = 7.5, container: float = 42.5) -> float:
    """Time at which ``new`` becomes productive after switching from ``old``."""
    old, new = frozenset(old), frozenset(new)
    if old == new:
        return now
    delay = container
    if old - new:
        delay += checkpoint
    return now + delay


def update_navg(rt: AppRuntime, live_count: int, dt: float) -> None:
    """Fold ``dt`` seconds at ``live_count`` live apps into the contention average."""
    rt.contention_integral += live_count * dt
    rt.lifetime += dt
    if rt.lifetime > 0:
        rt.n_avg = max(1.0, rt.contention_integral / rt.lifetime)
    else:
        rt.n_avg = max(1.0, float(live_count))


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


@dataclass
class _Track:
    productive_from: float = 0.0
    version: int = 0
    score_time: float = 0.0
    held_time: float = 0.0
    consumed: Fraction = Fraction(0)


class Simulator:
    def __init__(self, config: SimConfig, workload: Sequence[AppSpec]):
        self.config = config
        self.cluster = config.cluster
        self.apps: Dict[str, AppSpec] = {}
        for a in sorted(workload, key=lambda a: (a.arrival_time, a.app_id)):
            if a.app_id in self.apps:
                raise ValueError(f"duplicate app id {a.app_id}")
            self.apps[a.app_id] = a
        self.clock = 0.0
        self.ownership = OwnershipState(self.cluster)
        self.agents: Dict[str, Agent] = {}
        self.track: Dict[str, _Track] = {}
        self.queue: List[Event] = []
        self._seq = 0
        self._trigger_at: Optional[float] = None
        streams = np.random.SeedSequence(config.seed).spawn(3)
        self.rng_leftover = np.random.default_rng(streams[0])
        self.rng_error = np.random.default_rng(streams[1])
        self.rng_tie = np.random.default_rng(streams[2])
        self.ledger = Ledger()
        self.rounds = 0
        self.leftover_fractions: List[float] = []
        self.series: List[Tuple[float, int, int]] = []
        for a in self.apps.values():
            self._push(a.arrival_time, EventKind.ARRIVAL, (a.app_id,))

    # -- queue -------------------------------------------------------------

    def _push(self, time: float, kind: EventKind, payload: tuple = ()) -> None:
        self._seq += 1
        heapq.heappush(self.queue, Event(time, kind, self._seq, payload))

    def _schedule_trigger(self, time: float) -> None:
        if self._trigger_at == time:
            return
        self._trigger_at = time
        self._push(time, EventKind.TRIGGER)

    def _live(self) -> List[Agent]:
        return [a for a in self.agents.values() if a.runtime.status != "finished"]

    # -- time --------------------------------------------------------------

    def _advance_to(self, t: float) -> None:
        if t < self.clock:
            raise RuntimeError("event out of order")
        if t == self.clock:
            return
        t0, t1 = Fraction(self.clock), Fraction(t)
        dt = t - self.clock
        live = self._live()
        for agent in live:
            update_navg(agent.runtime, len(live), dt)
        held_total = 0
        for agent in live:
            rt, tr = agent.runtime, self.track[agent.app_id]
            h = len(rt.allocation)
            if not h:
                continue
            held_total += h
            start = min(t1, max(t0, Fraction(tr.productive_from)))
            pause = start - t0
            prod = t1 - start
            used = prod
            if prod > 0:
                report = advance(agent.app, rt, rt.allocation, float(prod))
                if report.finished:
                    used = min(prod, Fraction(report.finished_after))
                    rt.finish_time = float(start + used)
            self.ledger.paused += h * pause
            self.ledger.consumed += h * used
            self.ledger.idle += h * (prod - used)
            tr.consumed += h * used
            rt.gpu_seconds_paused += float(h * pause)
            score = placement_score(agent.app.profile, rt.allocation)
            tr.score_time += score * dt
            tr.held_time += dt
        total = self.cluster.total_gpus
        self.ledger.idle += (total - held_total) * (t1 - t0)
        self.ledger.capacity += total * (t1 - t0)
        self.clock = t

    # -- handlers ----------------------------------------------------------

    def _on_arrival(self, app_id: str) -> None:
        app = self.apps[app_id]
        rt = AppRuntime.start(app, now=self.clock)
        lie = self.config.lie_x if app_id == self.config.lying_app else 0.0
        self.agents[app_id] = Agent(app, rt, lie_x=lie, theta=self.config.theta, rng=self.rng_error)
        self.track[app_id] = _Track(productive_from=self.clock)
        live = len(self._live())
        for agent in self._live():
            if agent.runtime.lifetime == 0:
                agent.runtime.n_avg = max(1.0, float(live))
        self._schedule_trigger(self.clock)

    def _on_expiry(self, app_id: str, gpus: frozenset, expiry: float) -> None:
        released = []
        for g in gpus:
            held = self.ownership.owners.get(g)
            if held is not None and held[0] == app_id and held[1] <= self.clock:
                released.append(g)
        if released:
            self.ownership.release(released)
            self._schedule_trigger(self.clock)

    def _on_milestone(self, app_id: str, version: int) -> None:
        tr = self.track[app_id]
        if version != tr.version:
            return
        agent = self.agents[app_id]
        rt = agent.runtime
        # Snap any float residue at the milestone instant.
        advance(agent.app, rt, rt.allocation, 0.0)
        if rt.status == "finished":
            self._finish(agent)
            return
        surplus = job_level_assign(agent.app, rt, rt.allocation).unassigned
        keep_n = useful_demand(agent.app, rt)
        if surplus and len(rt.allocation) > keep_n:
            # Idle GPUs after a halving step go back to the pool without a restart.
            drop = frozenset(sorted(surplus)[: len(rt.allocation) - keep_n])
            self.ownership.release(drop)
            rt.allocation = rt.allocation - drop
            self._schedule_trigger(self.clock)
        self._reschedule(agent)

    def _finish(self, agent: Agent) -> None:
        rt = agent.runtime
        if rt.finish_time is None:
            rt.finish_time = self.clock
        rt.status = "finished"
        self.ownership.release(rt.allocation)
        rt.allocation = EMPTY
        self.track[agent.app_id].version += 1
        self._schedule_trigger(self.clock)

    def _reschedule(self, agent: Agent) -> None:
        tr = self.track[agent.app_id]
        tr.version += 1
        rt = agent.runtime
        if rt.status == "finished" or not rt.allocation:
            return
        ttm = time_to_next_milestone(agent.app, rt, rt.allocation)
        if math.isinf(ttm):
            return
        at = max(self.clock, tr.productive_from) + ttm
        self._push(at, EventKind.MILESTONE, (agent.app_id, tr.version))

    def _on_trigger(self) -> None:
        self._trigger_at = None
        live = self._live()
        old = {a.app_id: a.runtime.allocation for a in live}
        for a in live:
            a.runtime.allocation = self.ownership.held_by(a.app_id, self.clock)
        free = frozenset(free_gpus(self.ownership, self.clock))
        decision = None
        if free and live:
            ctx = SchedContext(self.clock, self.cluster, live, free, self.rng_leftover,
                               self.config.lease, self.config.cap)
            decision = self.config.policy.decide(ctx)
            self.rounds += 1
            if decision.auction is not None and decision.auction.chosen:
                offered = len(free)
                self.leftover_fractions.append(decision.auction.fractional_leftover / offered)
        grants = decision.grants if decision else {}
        expiry = self.clock + self.config.lease
        by_id = {a.app_id: a for a in live}
        for app_id in sorted(grants):
            g = grants[app_id]
            if not g:
                continue
            if not g <= free:
                raise RuntimeError(f"policy granted non-free GPUs to {app_id}")
            free = free - g
            self.ownership.assign(g, app_id, expiry, self.clock)
            self._push(expiry, EventKind.LEASE_EXPIRY, (app_id, g, expiry))
            rt = by_id[app_id].runtime
            rt.allocation = rt.allocation | g
        for a in live:
            rt, tr = a.runtime, self.track[a.app_id]
            new = rt.allocation
            if new != old[a.app_id]:
                tr.productive_from = apply_reallocation(
                    old[a.app_id], new, self.clock,
                    self.config.checkpoint_overhead, self.config.container_overhead)
                if new:
                    rt.status = "running"
                self._reschedule(a)
        busy = sum(len(a.runtime.allocation) for a in live)
        self.series.append((self.clock, len(live), busy))

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimOutcome:
        horizon = self.config.horizon
        while self.queue:
            ev = heapq.heappop(self.queue)
            if ev.time > horizon:
                heapq.heappush(self.queue, ev)
                break
            self._advance_to(ev.time)
            if ev.kind == EventKind.ARRIVAL:
                self._on_arrival(*ev.payload)
            elif ev.kind == EventKind.LEASE_EXPIRY:
                self._on_expiry(*ev.payload)
            elif ev.kind == EventKind.MILESTONE:
                self._on_milestone(*ev.payload)
            else:
                self._on_trigger()
        if self.queue and math.isfinite(horizon):
            self._advance_to(horizon)
        return self._outcome()

    def _outcome(self) -> SimOutcome:
        records = []
        for app_id, app in self.apps.items():
            agent = self.agents.get(app_id)
            tr = self.track.get(app_id)
            if agent is None:
                continue
            rt = agent.runtime
            done = rt.status == "finished"
            end = rt.finish_time if done else self.clock
            t_sh = end - app.arrival_time
            t_id = ideal_time(app, rt, self.cluster)
            score = tr.score_time / tr.held_time if tr.held_time > 0 else 0.0
            records.append(AppRecord(app_id, app.arrival_time, rt.finish_time if done else None,
                                     t_sh, t_id, t_sh / t_id, float(tr.consumed), score,
                                     not done))
        return SimOutcome(self.config.policy.name, self.config.seed, records, self.ledger,
                          self.clock, self.rounds, self.leftover_fractions, self.series,
                          {k: t.consumed for k, t in self.track.items()})


def run(config: SimConfig, workload: Sequence[AppSpec]) -> SimOutcome:
    """Simulate ``workload`` under ``config``; pure function of both."""
    return Simulator(config, workload).run()
