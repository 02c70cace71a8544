"""Synthetic workloads shaped like a shared-cluster trace, and a JSONL format.

File format: one JSON object per line with exactly these keys, in order:
``app_id, arrival_s, scheme, budget_gpu_s, app_demand_max, class, jobs``;
each job has ``serial_iter_s, total_iters, job_demand_max, loss_a, loss_b,
loss_c``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .apps import AppSpec, JobSpec, PerfCurve, SingleJob, SuccessiveHalving, halving_schedule
from .cluster import DEFAULT_PROFILES, SlowdownProfile

APP_FIELDS = ("app_id", "arrival_s", "scheme", "budget_gpu_s", "app_demand_max", "class", "jobs")
JOB_FIELDS = ("serial_iter_s", "total_iters", "job_demand_max", "loss_a", "loss_b", "loss_c")
ARRIVAL_JITTER = 1e-6


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    mode: str = "synthetic"
    path: Optional[str] = None
    n_apps: int = 100
    mean_interarrival_s: float = 1200.0
    single_fraction: float = 0.1
    jobs_min: int = 50
    jobs_max: int = 100
    # median task is 3.75 GPU-hours, scaled down five-fold
    task_median_gpu_s: float = 3.75 * 3600 / 5
    task_sigma: float = 1.0
    serial_median_s: float = 10.0
    serial_sigma: float = 0.3
    network_fraction: float = 0.4
    pc_fraction: float = 0.0
    job_demand_choices: Tuple[int, ...] = (1, 2, 4, 8)
    app_demand_max: int = 16

    def __post_init__(self):
        if self.mode not in ("synthetic", "file"):
            raise ValueError("mode must be 'synthetic' or 'file'")
        if self.mode == "file" and not self.path:
            raise ValueError("file mode needs a path")
        for name in ("single_fraction", "network_fraction", "pc_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mean_interarrival_s <= 0:
            raise ValueError("mean inter-arrival time must be positive")
        if not 1 <= self.jobs_min <= self.jobs_max:
            raise ValueError("need 1 <= jobs_min <= jobs_max")
        if min(self.task_median_gpu_s, self.serial_median_s) <= 0 or min(self.task_sigma, self.serial_sigma) < 0:
            raise ValueError("distributions need positive support")
        if not self.job_demand_choices or min(self.job_demand_choices) < 1:
            raise ValueError("job demand choices must be >= 1")
        if self.app_demand_max < max(self.job_demand_choices):
            raise ValueError("app_demand_max below largest job demand")


def desk_spec(**overrides) -> WorkloadSpec:
    """Small workload for a 64-GPU cluster that still produces contention.

    Jobs take at least two GPUs: with single-GPU jobs an app's rho is bounded
    below by its own job structure and every policy lands on the same value.
    """
    base = WorkloadSpec(n_apps=10, mean_interarrival_s=60.0, jobs_min=4, jobs_max=16,
                        job_demand_choices=(2, 4, 8))
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _loss_curve(rng: np.random.Generator) -> Tuple[float, float, float]:
    return (float(rng.uniform(0.5, 2.0)), float(rng.uniform(1.0, 50.0)), float(rng.uniform(0.0, 0.5)))


def generate(spec: WorkloadSpec, seed: int, profiles: Optional[Dict[str, SlowdownProfile]] = None) -> List[AppSpec]:
    if spec.mode != "synthetic":
        raise ValueError("generate needs a synthetic spec")
    profiles = profiles or DEFAULT_PROFILES
    rng = np.random.default_rng(seed)
    apps: List[AppSpec] = []
    t = 0.0
    last = -math.inf
    for i in range(spec.n_apps):
        t += float(rng.exponential(spec.mean_interarrival_s))
        arrival = max(t, last + ARRIVAL_JITTER)
        last = arrival
        cls = "network" if rng.random() < spec.network_fraction else "compute"
        profile = profiles[cls]
        cap = int(rng.choice(spec.job_demand_choices))
        app_id = f"app{i:04d}"
        if rng.random() < spec.single_fraction:
            serial = float(rng.lognormal(math.log(spec.serial_median_s), spec.serial_sigma))
            work = float(rng.lognormal(math.log(spec.task_median_gpu_s), spec.task_sigma))
            job = JobSpec(serial, max(1, round(work / serial)), cap, _loss_curve(rng))
            apps.append(AppSpec(app_id, arrival, (job,), SingleJob(), profile, cap))
            continue
        n = int(rng.integers(spec.jobs_min, spec.jobs_max + 1))
        serial = rng.lognormal(math.log(spec.serial_median_s), spec.serial_sigma, size=n)
        works = rng.lognormal(math.log(spec.task_median_gpu_s), spec.task_sigma, size=n)
        demand = max(cap, min(spec.app_demand_max, cap * n))
        if rng.random() < spec.pc_fraction:
            pc = PerfCurve()
            jobs = []
            for s, w in zip(serial, works):
                total = max(2, round(w / s))
                b = float(rng.uniform(1.0, 50.0))
                stop = float(rng.uniform(0.3, 1.0)) * total
                a = pc.min_improvement * (stop + b) ** 2
                jobs.append(JobSpec(float(s), total, cap, (a, b, float(rng.uniform(0.0, 0.5)))))
            apps.append(AppSpec(app_id, arrival, tuple(jobs), pc, profile, demand))
            continue
        budget = float(np.sum(works))
        iters = halving_schedule(budget, [float(s) for s in serial])
        total = sum(iters)
        jobs = tuple(JobSpec(float(s), total, cap, _loss_curve(rng)) for s in serial)
        apps.append(AppSpec(app_id, arrival, jobs, SuccessiveHalving(budget, n, iters), profile, demand))
    return apps


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def to_record(app: AppSpec) -> dict:
    return {
        "app_id": app.app_id,
        "arrival_s": app.arrival_time,
        "scheme": getattr(app.scheme, "kind"),
        "budget_gpu_s": app.budget,
        "app_demand_max": app.app_demand_max,
        "class": app.app_class,
        "jobs": [
            {"serial_iter_s": j.serial_iter_time, "total_iters": j.total_iters,
             "job_demand_max": j.job_demand_max, "loss_a": j.loss_curve[0],
             "loss_b": j.loss_curve[1], "loss_c": j.loss_curve[2]}
            for j in app.jobs
        ],
    }


def from_record(rec: dict, profiles: Optional[Dict[str, SlowdownProfile]] = None) -> AppSpec:
    profiles = profiles or DEFAULT_PROFILES
    if not isinstance(rec, dict):
        raise WorkloadError("record must be an object")
    if tuple(rec) != APP_FIELDS:
        extra = set(rec) - set(APP_FIELDS)
        missing = [k for k in APP_FIELDS if k not in rec]
        if extra:
            raise WorkloadError(f"unknown field {sorted(extra)[0]!r}")
        if missing:
            raise WorkloadError(f"missing field {missing[0]!r}")
        raise WorkloadError("fields out of order")
    jobs = []
    for j in rec["jobs"]:
        if not isinstance(j, dict) or tuple(j) != JOB_FIELDS:
            raise WorkloadError(f"job fields must be exactly {', '.join(JOB_FIELDS)}")
        try:
            jobs.append(JobSpec(float(j["serial_iter_s"]), int(j["total_iters"]), int(j["job_demand_max"]),
                                (float(j["loss_a"]), float(j["loss_b"]), float(j["loss_c"]))))
        except ValueError as exc:
            raise WorkloadError(f"jobs: {exc}") from exc
    if rec["class"] not in profiles:
        raise WorkloadError(f"class: unknown app class {rec['class']!r}")
    kind = rec["scheme"]
    if kind == "single":
        scheme = SingleJob()
    elif kind == "pc":
        scheme = PerfCurve()
    elif kind == "sh":
        budget = float(rec["budget_gpu_s"])
        if budget <= 0:
            raise WorkloadError("budget_gpu_s: must be positive")
        iters = halving_schedule(budget, [j.serial_iter_time for j in jobs])
        scheme = SuccessiveHalving(budget, len(jobs), iters)
    else:
        raise WorkloadError(f"scheme: unknown scheme {kind!r}")
    try:
        return AppSpec(str(rec["app_id"]), float(rec["arrival_s"]), tuple(jobs), scheme,
                       profiles[rec["class"]], int(rec["app_demand_max"]))
    except ValueError as exc:
        raise WorkloadError(str(exc)) from exc


def save(apps: Iterable[AppSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for app in apps:
            fh.write(json.dumps(to_record(app)) + "\n")


def loads(text: str, profiles: Optional[Dict[str, SlowdownProfile]] = None) -> List[AppSpec]:
    apps = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WorkloadError(f"line {n}: parse error: {exc.msg}") from exc
        try:
            apps.append(from_record(rec, profiles))
        except WorkloadError as exc:
            raise WorkloadError(f"line {n}: {exc}") from exc
    return apps


def load(path, profiles: Optional[Dict[str, SlowdownProfile]] = None) -> List[AppSpec]:
    return loads(Path(path).read_text(encoding="utf-8"), profiles)


def load_bundled(name: str = "worked_example.jsonl") -> List[AppSpec]:
    text = resources.files("ftfair").joinpath("data", name).read_text(encoding="utf-8")
    return loads(text)


def from_spec(spec: WorkloadSpec, seed: int, profiles: Optional[Dict[str, SlowdownProfile]] = None) -> List[AppSpec]:
    if spec.mode == "file":
        return load(spec.path, profiles)
    return generate(spec, seed, profiles)
