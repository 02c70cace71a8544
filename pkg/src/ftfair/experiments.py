"""Desk-scale experiments: strategic lying, bid errors, sensitivity, baselines.

Each function runs full simulations and returns per-seed numbers; judging
them is left to the caller.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .apps import AppSpec, JobSpec, SuccessiveHalving, halving_schedule
from .cluster import NETWORK, ClusterSpec
from .engine import SimConfig, SimOutcome, run
from .metrics import summarize
from .schedulers import POLICY_NAMES, SchedulerPolicy
from .workload import WorkloadSpec, desk_spec, generate

LIAR = "app0000"


def desk_cluster() -> ClusterSpec:
    """64 GPUs: 2 racks x 4 machines x 8 GPUs, two 4-GPU slots per machine."""
    return ClusterSpec.uniform(2, 4, 8, slots_per_machine=2)


def simulate(spec: WorkloadSpec, seed: int, policy: SchedulerPolicy,
             cluster: Optional[ClusterSpec] = None, **overrides) -> SimOutcome:
    cluster = cluster or desk_cluster()
    return run(SimConfig(cluster, policy, seed=seed, **overrides), generate(spec, seed))


def max_rho(outcome: SimOutcome) -> float:
    return max(r.rho for r in outcome.records)


# ---------------------------------------------------------------------------
# Strategic lying
# ---------------------------------------------------------------------------


def lying_cluster() -> ClusterSpec:
    """64 GPUs: one 8-GPU machine, every other machine has 2 GPUs."""
    return ClusterSpec.from_nested([[[8]] + [[2]] * 12, [[2]] * 16])


def lying_workload(seed: int, n_apps: int = 8) -> List[AppSpec]:
    """``n_apps`` identical placement-sensitive tuning apps arriving together."""
    rng = np.random.default_rng(seed)
    n = 4
    serial = [float(s) for s in rng.lognormal(np.log(10.0), 0.3, size=n)]
    budget = float(rng.uniform(40_000, 80_000))
    iters = halving_schedule(budget, serial)
    jobs = tuple(JobSpec(s, sum(iters), 4) for s in serial)
    return [AppSpec(f"app{i:04d}", i * 1e-6, jobs, SuccessiveHalving(budget, n, iters), NETWORK, 16)
            for i in range(n_apps)]


@dataclass
class LyingPoint:
    x: float
    liar: List[float] = field(default_factory=list)
    truthful: List[float] = field(default_factory=list)
    balanced: List[bool] = field(default_factory=list)

    @property
    def liar_mean(self) -> float:
        return statistics.fmean(self.liar)

    @property
    def truthful_mean(self) -> float:
        return statistics.fmean(self.truthful)


def lying_experiment(xs: Sequence[float], seeds: Sequence[int],
                     policy: Optional[SchedulerPolicy] = None) -> List[LyingPoint]:
    """Completion times of the lying app and mean of the truthful ones per X."""
    policy = policy or SchedulerPolicy("themis")
    cluster = lying_cluster()
    out = []
    for x in xs:
        point = LyingPoint(float(x))
        for seed in seeds:
            cfg = SimConfig(cluster, policy, seed=seed, lying_app=LIAR if x else None, lie_x=float(x))
            res = run(cfg, lying_workload(seed))
            times = {r.app_id: r.t_sh_s for r in res.records}
            point.liar.append(times[LIAR])
            point.truthful.append(statistics.fmean(v for k, v in times.items() if k != LIAR))
            point.balanced.append(res.ledger.balanced)
        out.append(point)
    return out


# ---------------------------------------------------------------------------
# Sweeps over one knob
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    label: str
    value: float
    max_rho: List[float] = field(default_factory=list)
    jain: List[float] = field(default_factory=list)
    gpu_time: List[float] = field(default_factory=list)
    balanced: List[bool] = field(default_factory=list)

    @property
    def median_max_rho(self) -> float:
        return statistics.median(self.max_rho)

    @property
    def median_jain(self) -> float:
        return statistics.median(self.jain)

    @property
    def median_gpu_time(self) -> float:
        return statistics.median(self.gpu_time)

    def add(self, outcome: SimOutcome) -> None:
        s = summarize(outcome)
        self.max_rho.append(s.max_rho)
        self.jain.append(s.jain)
        self.gpu_time.append(s.gpu_time)
        self.balanced.append(outcome.ledger.balanced)


def theta_experiment(thetas: Sequence[float], seeds: Sequence[int],
                     spec: Optional[WorkloadSpec] = None) -> List[SweepPoint]:
    spec = spec or desk_spec()
    out = []
    for theta in thetas:
        p = SweepPoint("theta", float(theta))
        for seed in seeds:
            p.add(simulate(spec, seed, SchedulerPolicy("themis"), theta=float(theta)))
        out.append(p)
    return out


def f_sweep(fs: Sequence[float], seeds: Sequence[int], lease: float = 600.0,
            spec: Optional[WorkloadSpec] = None) -> List[SweepPoint]:
    spec = spec or desk_spec()
    out = []
    for f in fs:
        p = SweepPoint("f", float(f))
        for seed in seeds:
            p.add(simulate(spec, seed, SchedulerPolicy("themis", f=float(f), lease=lease)))
        out.append(p)
    return out


def lease_sweep(leases: Sequence[float], seeds: Sequence[int], f: float = 0.8,
                spec: Optional[WorkloadSpec] = None) -> List[SweepPoint]:
    spec = spec or desk_spec()
    out = []
    for lease in leases:
        p = SweepPoint("lease", float(lease))
        for seed in seeds:
            p.add(simulate(spec, seed, SchedulerPolicy("themis", f=f, lease=float(lease))))
        out.append(p)
    return out


def compare_schedulers(seeds: Sequence[int], network_fraction: float = 0.4,
                       names: Sequence[str] = POLICY_NAMES,
                       spec: Optional[WorkloadSpec] = None) -> Dict[str, SweepPoint]:
    """Every policy on the same workloads (network-class share as given)."""
    spec = replace(spec or desk_spec(), network_fraction=network_fraction)
    out = {}
    for name in names:
        p = SweepPoint(name, network_fraction)
        for seed in seeds:
            p.add(simulate(spec, seed, SchedulerPolicy(name)))
        out[name] = p
    return out
