"""ML apps: jobs, tuning schemes, finish-time fairness and progress.

An app is one or more synchronous-SGD training jobs plus a tuning scheme
that decides which jobs keep running.  ``rho`` is the ratio of the app's
estimated shared finish time to its finish time on a dedicated 1/N share
of the cluster; smaller is better.
"""

from __future__ import annotations

import functools
import heapq
import math
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .cluster import (
    COMPUTE,
    EMPTY,
    ClusterSpec,
    GpuId,
    SlowdownProfile,
    SpanLevel,
    consolidated_counts,
    consolidated_pick,
    slot_counts,
    slowdown,
    span_of_counts,
)

INF = math.inf
# Fractional-iteration slack when deciding that a job reached its target.
ITER_EPS = 1e-7


@dataclass(frozen=True)
class JobSpec:
    serial_iter_time: float
    total_iters: int
    job_demand_max: int = 1
    loss_curve: Tuple[float, float, float] = (1.0, 1.0, 0.0)
    iters_done: float = 0.0

    def __post_init__(self):
        if self.serial_iter_time <= 0:
            raise ValueError("serial_iter_time must be positive")
        if self.job_demand_max < 1:
            raise ValueError("job_demand_max must be >= 1")
        if not 0 <= self.iters_done <= self.total_iters:
            raise ValueError("iters_done must lie in [0, total_iters]")
        a, b, _ = self.loss_curve
        if a <= 0 or b <= 0:
            raise ValueError("loss curve needs a > 0 and b > 0")

    def loss(self, i: float) -> float:
        a, b, c = self.loss_curve
        return a / (i + b) + c

    @property
    def work(self) -> float:
        """Total GPU-seconds on one GPU."""
        return self.total_iters * self.serial_iter_time


@dataclass(frozen=True)
class SingleJob:
    kind = "single"


@dataclass(frozen=True)
class SuccessiveHalving:
    budget: float
    n_initial_jobs: int
    iters_per_phase: Tuple[int, ...]
    kind = "sh"

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if len(self.iters_per_phase) != len(self.phase_sizes()):
            raise ValueError(
                f"{self.n_initial_jobs} jobs need {len(self.phase_sizes())} phases, "
                f"got {len(self.iters_per_phase)}")

    def phase_sizes(self) -> Tuple[int, ...]:
        return _sizes(self.n_initial_jobs)

    def phase_ends(self) -> Tuple[int, ...]:
        ends, acc = [], 0
        for n in self.iters_per_phase:
            acc += n
            ends.append(acc)
        return tuple(ends)

    @property
    def n_phases(self) -> int:
        return len(self.iters_per_phase)


@dataclass(frozen=True)
class PerfCurve:
    """Stop a job once its per-iteration loss improvement drops below a threshold.

    ``margin`` inflates the forecast, giving the latest-finishing estimate.
    """

    min_improvement: float = 1e-4
    margin: float = 0.0
    kind = "pc"

    def forecast(self, job: JobSpec) -> int:
        a, b, _ = job.loss_curve
        stop = math.sqrt(a / self.min_improvement) - b
        stop = math.ceil(max(stop, 0.0) * (1.0 + self.margin))
        return int(min(max(stop, 1), job.total_iters))


TuningScheme = Union[SingleJob, SuccessiveHalving, PerfCurve]


def halving_schedule(budget: float, serial_times: Sequence[float]) -> Tuple[int, ...]:
    """Split ``budget`` evenly over successive-halving phases.

    The first phase knows every job's iteration time; later phases assume the
    median job, and the last phase absorbs what earlier flooring left over.
    """
    n = len(serial_times)
    sizes = _sizes(n)
    per_phase = budget / len(sizes)
    median = statistics.median(serial_times)
    iters, spent = [], 0.0
    for p, size in enumerate(sizes):
        unit = sum(serial_times) if p == 0 else size * median
        if p == len(sizes) - 1:
            it = math.floor((budget - spent) / unit)
        else:
            it = math.floor(per_phase / unit)
        it = max(it, 1)
        iters.append(it)
        spent += it * unit
    return tuple(iters)


def _sizes(n: int) -> Tuple[int, ...]:
    sizes = [n]
    while sizes[-1] > 1:
        sizes.append(math.ceil(sizes[-1] / 2))
    return tuple(sizes)


@dataclass(frozen=True)
class AppSpec:
    app_id: str
    arrival_time: float
    jobs: Tuple[JobSpec, ...]
    scheme: TuningScheme = SingleJob()
    profile: SlowdownProfile = COMPUTE
    app_demand_max: int = 0

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(self.jobs))
        if not self.jobs:
            raise ValueError("app needs at least one job")
        cap = max(j.job_demand_max for j in self.jobs)
        if self.app_demand_max == 0:
            object.__setattr__(self, "app_demand_max", cap)
        if self.app_demand_max < cap:
            raise ValueError("app_demand_max must be >= every job_demand_max")
        if isinstance(self.scheme, SingleJob) and len(self.jobs) != 1:
            raise ValueError("single-job scheme needs exactly one job")
        if isinstance(self.scheme, SuccessiveHalving):
            if self.scheme.n_initial_jobs != len(self.jobs):
                raise ValueError("n_initial_jobs must match the job count")
            total = self.scheme.phase_ends()[-1]
            if any(j.total_iters != total for j in self.jobs):
                raise ValueError(f"successive-halving jobs must have total_iters={total}")

    @property
    def app_class(self) -> str:
        return self.profile.name

    @property
    def budget(self) -> float:
        """Aggregate GPU-seconds the app is expected to need."""
        if isinstance(self.scheme, SuccessiveHalving):
            return self.scheme.budget
        if isinstance(self.scheme, PerfCurve):
            return sum(self.scheme.forecast(j) * j.serial_iter_time for j in self.jobs)
        return self.jobs[0].work


@dataclass
class AppRuntime:
    t_start: float
    iters_done: List[float]
    alive: List[bool]
    allocation: frozenset = EMPTY
    phase: int = 0
    n_avg: float = 1.0
    gpu_seconds_consumed: float = 0.0
    gpu_seconds_paused: float = 0.0
    status: str = "queued"
    finish_time: Optional[float] = None
    # time-weighted live-app-count integral backing n_avg
    contention_integral: float = 0.0
    lifetime: float = 0.0

    @classmethod
    def start(cls, app: AppSpec, now: Optional[float] = None, n_avg: float = 1.0) -> "AppRuntime":
        t0 = app.arrival_time if now is None else now
        return cls(t_start=t0,
                   iters_done=[float(j.iters_done) for j in app.jobs],
                   alive=[True] * len(app.jobs),
                   n_avg=max(1.0, float(n_avg)))

    def copy(self) -> "AppRuntime":
        return AppRuntime(**{**self.__dict__,
                             "iters_done": list(self.iters_done),
                             "alive": list(self.alive)})


# ---------------------------------------------------------------------------
# Job targets
# ---------------------------------------------------------------------------


def job_targets(app: AppSpec, rt: AppRuntime) -> Dict[int, float]:
    """Iteration each live job must reach before the app's next state change."""
    scheme = app.scheme
    if rt.status == "finished":
        return {}
    if isinstance(scheme, SuccessiveHalving):
        end = scheme.phase_ends()[rt.phase]
        return {j: float(end) for j, ok in enumerate(rt.alive) if ok}
    if isinstance(scheme, PerfCurve):
        return {j: float(scheme.forecast(job)) for j, job in enumerate(app.jobs) if rt.alive[j]}
    return {0: float(app.jobs[0].total_iters)} if rt.alive[0] else {}


def active_jobs(app: AppSpec, rt: AppRuntime) -> List[int]:
    """Jobs with work left before their target, ordered by remaining work (desc)."""
    out = []
    for j, target in job_targets(app, rt).items():
        left = target - rt.iters_done[j]
        if left > ITER_EPS:
            out.append((-(left * app.jobs[j].serial_iter_time), j))
    return [j for _, j in sorted(out)]


def useful_demand(app: AppSpec, rt: AppRuntime) -> int:
    live = [app.jobs[j].job_demand_max for j, ok in enumerate(rt.alive) if ok]
    if rt.status == "finished" or not live:
        return 0
    return min(app.app_demand_max, sum(live))


# ---------------------------------------------------------------------------
# Job-level assignment
# ---------------------------------------------------------------------------


def split_counts(caps: Sequence[int], k: int) -> List[int]:
    """Water-fill ``k`` GPUs over jobs (in priority order) under per-job caps."""
    counts = [0] * len(caps)
    remaining = k
    if len(caps) > k:
        for j in range(k):
            counts[j] = 1
        return counts
    while remaining > 0:
        open_jobs = [j for j, c in enumerate(caps) if counts[j] < c]
        if not open_jobs:
            break
        share = remaining // len(open_jobs)
        if share == 0:
            for j in open_jobs[:remaining]:
                counts[j] += 1
            break
        for j in open_jobs:
            add = min(share, caps[j] - counts[j])
            counts[j] += add
            remaining -= add
    return counts


@dataclass(frozen=True)
class JobAssignment:
    per_job: Dict[int, frozenset]
    unassigned: frozenset


def _assign(caps: Sequence[int], g: frozenset) -> Tuple[List[frozenset], frozenset]:
    counts = split_counts(caps, len(g))
    sets: List[frozenset] = [EMPTY] * len(caps)
    pool = set(g)
    for j in sorted(range(len(caps)), key=lambda j: (-counts[j], j)):
        if counts[j] == 0:
            continue
        pick = consolidated_pick(pool, counts[j])
        sets[j] = pick
        pool -= pick
    return sets, frozenset(pool)


def job_level_assign(app: AppSpec, rt: AppRuntime, g: frozenset) -> JobAssignment:
    """Hand the app's GPUs to its active jobs, largest remaining work first."""
    jobs = active_jobs(app, rt)
    caps = [app.jobs[j].job_demand_max for j in jobs]
    sets, rest = _assign(caps, frozenset(g))
    return JobAssignment({j: s for j, s in zip(jobs, sets) if s}, rest)


# ---------------------------------------------------------------------------
# Finish-time estimates
# ---------------------------------------------------------------------------


def phase_time(entries: Sequence[Tuple[float, float, int]], g: frozenset,
               profile: SlowdownProfile) -> float:
    """Time until every (iters_left, serial_iter_time, cap) entry is done on ``g``.

    Entries must be ordered by remaining work, descending.  With fewer GPUs
    than jobs, jobs run one per GPU and queue (list scheduling).
    """
    return _phase_time(entries, len(g), _pool(g), profile)


def _pool(g: frozenset) -> Tuple[Tuple[tuple, int], ...]:
    return tuple(sorted(slot_counts(g).items()))


def _phase_time(entries, k: int, pool, profile) -> float:
    entries = [e for e in entries if e[0] > ITER_EPS]
    if not entries:
        return 0.0
    if not k:
        return INF
    if k < len(entries):
        loads = [0.0] * k
        heapq.heapify(loads)
        for iters, serial, _ in entries:
            heapq.heappush(loads, heapq.heappop(loads) + iters * serial)
        return max(loads)
    spans = _assign_spans(tuple(cap for _, _, cap in entries), pool)
    worst = 0.0
    for (iters, serial, cap), (n, level) in zip(entries, spans):
        t = iters * serial * profile.factor(level) / min(n, cap)
        worst = max(worst, t)
    return worst


@functools.lru_cache(maxsize=65536)
def _assign_spans(caps: Tuple[int, ...], pool: Tuple[Tuple[tuple, int], ...]) -> Tuple[Tuple[int, SpanLevel], ...]:
    """(count, span level) per job that ``_assign`` would produce, from slot counts."""
    left = dict(pool)
    counts = split_counts(caps, sum(left.values()))
    out: List[Tuple[int, SpanLevel]] = [(0, SpanLevel.SLOT)] * len(caps)
    for j in sorted(range(len(caps)), key=lambda j: (-counts[j], j)):
        if counts[j] == 0:
            continue
        taken = consolidated_counts(left, counts[j])
        for s, c in taken.items():
            left[s] -= c
        out[j] = (counts[j], span_of_counts(taken))
    return tuple(out)


def _remaining_entries(app: AppSpec, rt: AppRuntime) -> List[Tuple[float, float, int]]:
    targets = job_targets(app, rt)
    return [(targets[j] - rt.iters_done[j], app.jobs[j].serial_iter_time, app.jobs[j].job_demand_max)
            for j in active_jobs(app, rt)]


def remaining_time_estimator(app: AppSpec, rt: AppRuntime,
                             profile: Optional[SlowdownProfile] = None):
    """Function of an allocation giving the app's estimated time to finish on it.

    Everything that does not depend on the allocation is computed once, so
    evaluating many candidate allocations stays cheap.
    """
    profile = profile or app.profile
    if rt.status == "finished":
        return lambda g: 0.0
    phases = [_remaining_entries(app, rt)]
    scheme = app.scheme
    if isinstance(scheme, SuccessiveHalving):
        alive = [j for j, ok in enumerate(rt.alive) if ok]
        median = statistics.median(app.jobs[j].serial_iter_time for j in alive)
        cap = max(app.jobs[j].job_demand_max for j in alive)
        sizes = scheme.phase_sizes()
        for q in range(rt.phase + 1, scheme.n_phases):
            phases.append([(float(scheme.iters_per_phase[q]), median, cap)] * sizes[q])

    def estimate(g: frozenset) -> float:
        k, pool = len(g), _pool(g)
        return sum(_phase_time(entries, k, pool, profile) for entries in phases)

    return estimate


def shared_time_left(app: AppSpec, rt: AppRuntime, g: frozenset,
                     profile: Optional[SlowdownProfile] = None) -> float:
    """Estimated time to finish the app if ``g`` were held until completion."""
    return remaining_time_estimator(app, rt, profile)(frozenset(g))


def ideal_time(app: AppSpec, rt: AppRuntime, cluster: ClusterSpec) -> float:
    """Finish time on a dedicated 1/n_avg share of the cluster (linear speedup)."""
    if rt.n_avg < 1:
        raise ValueError("n_avg must be >= 1")
    if isinstance(app.scheme, SingleJob):
        job = app.jobs[0]
        if job.total_iters == 0:
            raise ValueError("degenerate job")
        t_cluster = job.work / min(cluster.total_gpus, job.job_demand_max)
    else:
        t_cluster = app.budget / min(cluster.total_gpus, app.app_demand_max)
    return t_cluster * rt.n_avg


def rho_many(app: AppSpec, rt: AppRuntime, allocations: Sequence[frozenset], now: float,
             cluster: ClusterSpec, profile: Optional[SlowdownProfile] = None) -> List[float]:
    """``rho`` for several allocations of the same app at the same instant."""
    if rt.status == "finished":
        raise ValueError("app already finished")
    if isinstance(app.scheme, SuccessiveHalving) and not any(rt.alive):
        raise ValueError("app already finished")
    t_id = ideal_time(app, rt, cluster)
    elapsed = now - rt.t_start
    estimate = remaining_time_estimator(app, rt, profile)
    out = []
    for g in allocations:
        left = estimate(frozenset(g))
        out.append(INF if math.isinf(left) else (elapsed + left) / t_id)
    return out


def rho(app: AppSpec, rt: AppRuntime, g: frozenset, now: float, cluster: ClusterSpec,
        profile: Optional[SlowdownProfile] = None) -> float:
    """Finish-time fairness of ``app`` if it held ``g`` until completion."""
    return rho_many(app, rt, [g], now, cluster, profile)[0]


def rho_single_job(app: AppSpec, rt: AppRuntime, g: frozenset, now: float,
                   cluster: ClusterSpec, profile: Optional[SlowdownProfile] = None) -> float:
    if not isinstance(app.scheme, SingleJob):
        raise TypeError("not a single-job app")
    return rho(app, rt, g, now, cluster, profile)


def rho_successive_halving(app: AppSpec, rt: AppRuntime, g: frozenset, now: float,
                           cluster: ClusterSpec, profile: Optional[SlowdownProfile] = None) -> float:
    if not isinstance(app.scheme, SuccessiveHalving):
        raise TypeError("not a successive-halving app")
    return rho(app, rt, g, now, cluster, profile)


def rho_perf_curve(app: AppSpec, rt: AppRuntime, g: frozenset, now: float,
                   cluster: ClusterSpec, profile: Optional[SlowdownProfile] = None) -> float:
    if not isinstance(app.scheme, PerfCurve):
        raise TypeError("not a performance-curve app")
    return rho(app, rt, g, now, cluster, profile)


# ---------------------------------------------------------------------------
# Progress
# ---------------------------------------------------------------------------


@dataclass
class ProgressReport:
    iters: Dict[int, float] = field(default_factory=dict)
    phase_transitions: List[int] = field(default_factory=list)
    killed: List[int] = field(default_factory=list)
    finished: bool = False
    finished_after: Optional[float] = None


def job_rates(app: AppSpec, rt: AppRuntime, allocation: frozenset,
              profile: Optional[SlowdownProfile] = None) -> Dict[int, float]:
    """Iterations per second of each active job under ``allocation``."""
    profile = profile or app.profile
    assignment = job_level_assign(app, rt, allocation)
    return {j: min(len(gs), app.jobs[j].job_demand_max) / (app.jobs[j].serial_iter_time * slowdown(profile, gs))
            for j, gs in assignment.per_job.items()}


def time_to_next_milestone(app: AppSpec, rt: AppRuntime, allocation: frozenset) -> float:
    """Productive seconds until some job reaches its target (inf if stalled)."""
    targets = job_targets(app, rt)
    best = INF
    for j, rate in job_rates(app, rt, allocation).items():
        best = min(best, (targets[j] - rt.iters_done[j]) / rate)
    return best


def _close_phase(app: AppSpec, rt: AppRuntime, report: ProgressReport) -> None:
    """Apply scheme transitions once no job has work left in the current step."""
    scheme = app.scheme
    while rt.status != "finished" and not active_jobs(app, rt):
        if isinstance(scheme, SuccessiveHalving) and rt.phase < scheme.n_phases - 1:
            end = scheme.phase_ends()[rt.phase]
            keep = scheme.phase_sizes()[rt.phase + 1]
            alive = [j for j, ok in enumerate(rt.alive) if ok]
            ranked = sorted(alive, key=lambda j: (app.jobs[j].loss(end), j))
            for j in ranked[keep:]:
                rt.alive[j] = False
                report.killed.append(j)
            rt.phase += 1
            report.phase_transitions.append(rt.phase)
        else:
            for j in range(len(rt.alive)):
                rt.alive[j] = False
            rt.status = "finished"
            report.finished = True


def advance(app: AppSpec, rt: AppRuntime, allocation: frozenset, dt: float,
            profile: Optional[SlowdownProfile] = None) -> ProgressReport:
    """Run the app on ``allocation`` for ``dt`` productive seconds, in place."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    report = ProgressReport()
    allocation = frozenset(allocation)
    left = float(dt)
    elapsed = 0.0
    _close_phase(app, rt, report)
    while left > 0 and rt.status != "finished":
        rates = job_rates(app, rt, allocation, profile)
        if not rates:
            break
        targets = job_targets(app, rt)
        until = {j: (targets[j] - rt.iters_done[j]) / r for j, r in rates.items()}
        step = min(left, min(until.values()))
        for j, r in rates.items():
            before = rt.iters_done[j]
            if until[j] <= step * (1 + 1e-12):
                rt.iters_done[j] = targets[j]
            else:
                rt.iters_done[j] = min(targets[j], before + r * step)
            report.iters[j] = report.iters.get(j, 0.0) + rt.iters_done[j] - before
        left -= step
        elapsed += step
        _close_phase(app, rt, report)
    used = elapsed if rt.status == "finished" else dt
    rt.gpu_seconds_consumed += used * len(allocation)
    if report.finished:
        report.finished_after = elapsed
    return report
