"""Experiment configuration files (YAML).

Top-level sections: ``cluster``, ``profiles``, ``policy``, ``overheads``,
``bidding``, ``workload``, ``seeds`` and ``horizon_s``.  Unknown keys are
errors so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .cluster import DEFAULT_PROFILES, ClusterSpec, SlowdownProfile
from .engine import SimConfig
from .experiments import desk_cluster
from .schedulers import SchedulerPolicy
from .workload import WorkloadSpec, desk_spec

LEVELS = ("slot", "machine", "rack", "cross_rack")
SECTIONS = {"cluster", "profiles", "policy", "overheads", "bidding", "workload", "seeds", "horizon_s"}


class ConfigError(ValueError):
    pass


@dataclass
class Experiment:
    sim: SimConfig
    workload: WorkloadSpec
    seeds: List[int] = field(default_factory=lambda: [0])
    profiles: Dict[str, SlowdownProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))

    def for_seed(self, seed: int) -> SimConfig:
        return replace(self.sim, seed=seed)


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key {sorted(unknown)[0]!r}")


def _cluster(data) -> ClusterSpec:
    if isinstance(data, dict):
        _check_keys("cluster", data, {"racks", "uniform"})
        if "racks" in data:
            return ClusterSpec.from_nested(data["racks"])
        u = data.get("uniform", {})
        _check_keys("cluster.uniform", u, {"racks", "machines_per_rack", "gpus_per_machine", "slots_per_machine"})
        return ClusterSpec.uniform(int(u["racks"]), int(u["machines_per_rack"]), int(u["gpus_per_machine"]),
                                   int(u.get("slots_per_machine", 1)))
    if isinstance(data, list):
        return ClusterSpec.from_nested(data)
    raise ConfigError("cluster: expected racks list or mapping")


def from_dict(doc: Optional[dict]) -> Experiment:
    doc = doc or {}
    _check_keys("config", doc, SECTIONS)
    try:
        cluster = _cluster(doc["cluster"]) if "cluster" in doc else desk_cluster()
        profiles = dict(DEFAULT_PROFILES)
        for name, factors in (doc.get("profiles") or {}).items():
            if isinstance(factors, dict):
                _check_keys(f"profiles.{name}", factors, LEVELS)
                factors = [factors.get(k, 1.0) for k in LEVELS]
            profiles[name] = SlowdownProfile.from_factors(factors, name)

        pol = doc.get("policy") or {}
        _check_keys("policy", pol, {"name", "f", "lease_s"})
        policy = SchedulerPolicy(pol.get("name", "themis"), float(pol.get("f", 0.8)),
                                 float(pol.get("lease_s", 600.0)))

        ov = doc.get("overheads") or {}
        _check_keys("overheads", ov, {"checkpoint_s", "container_s"})
        bid = doc.get("bidding") or {}
        _check_keys("bidding", bid, {"theta", "candidate_cap", "lying_app", "lie_x"})

        seeds = doc.get("seeds", [0])
        seeds = [int(seeds)] if isinstance(seeds, int) else [int(s) for s in seeds]
        if not seeds:
            raise ConfigError("seeds: need at least one seed")

        sim = SimConfig(
            cluster=cluster,
            policy=policy,
            checkpoint_overhead=float(ov.get("checkpoint_s", 7.5)),
            container_overhead=float(ov.get("container_s", 42.5)),
            theta=float(bid.get("theta", 0.0)),
            lying_app=bid.get("lying_app"),
            lie_x=float(bid.get("lie_x", 0.0)),
            cap=int(bid.get("candidate_cap", 256)),
            seed=seeds[0],
            horizon=float(doc.get("horizon_s", float("inf"))),
        )

        wl = dict(doc.get("workload") or {})
        _check_keys("workload", wl, {f.name for f in fields(WorkloadSpec)} | {"preset"})
        preset = wl.pop("preset", "desk")
        if "job_demand_choices" in wl:
            wl["job_demand_choices"] = tuple(int(x) for x in wl["job_demand_choices"])
        if preset == "desk":
            workload = desk_spec(**wl)
        elif preset == "trace":
            workload = WorkloadSpec(**wl)
        else:
            raise ConfigError(f"workload.preset: unknown preset {preset!r}")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return Experiment(sim, workload, seeds, profiles)


def load_config(path) -> Experiment:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(doc)
