"""Command line: simulate, sweep, validate-example, check-properties."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .apps import ideal_time
from .config import ConfigError, Experiment, from_dict, load_config
from .engine import run
from .instances import (
    WORKED_EXPECTED,
    WORKED_REFERENCE,
    WORKED_T_ID,
    drf_allocation,
    drf_instance_1,
    drf_instance_2,
    worked_example,
    worked_rows,
)
from .metrics import summarize, write_run
from .schedulers import POLICY_NAMES, SchedulerPolicy, check_properties
from .workload import WorkloadError, WorkloadSpec, from_spec, load

EXACT_TOL = 5e-4
REFERENCE_TOL = 0.07
SWEEP_PARAMS = ("f", "lease", "contention", "theta", "lying-x")


def _experiment(args) -> Experiment:
    exp = load_config(args.config) if getattr(args, "config", None) else from_dict({})
    sim = exp.sim
    if getattr(args, "scheduler", None):
        sim = replace(sim, policy=replace(sim.policy, name=args.scheduler))
    if getattr(args, "seed", None) is not None:
        exp.seeds = [args.seed]
    if getattr(args, "workload", None):
        exp.workload = WorkloadSpec(mode="file", path=args.workload)
    exp.sim = sim
    return exp


def _workload(exp: Experiment, seed: int):
    return from_spec(exp.workload, seed, exp.profiles)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    exp = _experiment(args)
    out = Path(args.out)
    for seed in exp.seeds:
        cfg = exp.for_seed(seed)
        apps = _workload(exp, seed)
        outcome = run(cfg, apps)
        target = out if len(exp.seeds) == 1 else out / f"seed{seed}"
        summary = write_run(target, outcome, emit_cdf=args.emit_cdf)
        print(f"{cfg.policy.name} seed={seed} apps={summary.n_apps} max_rho={summary.max_rho:.4f} "
              f"jain={summary.jain:.4f} gpu_time={summary.gpu_time:.1f} -> {target}")
        if not outcome.ledger.balanced:
            print("GPU-second conservation violated", file=sys.stderr)
            return 1
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def apply_param(exp: Experiment, param: str, value: float) -> Experiment:
    sim, wl = exp.sim, exp.workload
    if param == "f":
        sim = replace(sim, policy=replace(sim.policy, f=float(value)))
    elif param == "lease":
        sim = replace(sim, policy=replace(sim.policy, lease=float(value)))
    elif param == "theta":
        sim = replace(sim, theta=float(value))
    elif param == "lying-x":
        sim = replace(sim, lie_x=float(value), lying_app=sim.lying_app or "app0000")
    elif param == "contention":
        wl = replace(wl, n_apps=int(value))
    else:
        raise ValueError(f"unknown sweep parameter {param!r}")
    return Experiment(sim, wl, list(exp.seeds), dict(exp.profiles))


def _sweep_point(task):
    exp, param, value, seed = task
    point = apply_param(exp, param, value)
    outcome = run(point.for_seed(seed), _workload(point, seed))
    row = summarize(outcome).row()
    row.update({"param": param, "value": value, "conservation_ok": outcome.ledger.balanced})
    return row


def sweep_rows(exp: Experiment, param: str, values: Sequence[float], workers: int = 1) -> List[dict]:
    tasks = [(exp, param, v, s) for v in values for s in exp.seeds]
    if workers <= 1:
        return [_sweep_point(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_point, tasks))


def _workers() -> int:
    cap = os.environ.get("THEMIS_SIM_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = max(1, min(n, int(cap)))
        except ValueError:
            pass
    return n


def cmd_sweep(args) -> int:
    exp = _experiment(args)
    if args.seeds:
        exp.seeds = list(range(args.seeds))
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        print(f"bad --values {args.values!r}", file=sys.stderr)
        return 2
    rows = sweep_rows(exp, args.param, values, _workers())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["param", "value", "seed"] + [k for k in rows[0] if k not in ("param", "value", "seed")]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    for v in values:
        pts = [r["max_rho"] for r in rows if r["value"] == v]
        print(f"{args.param}={v:g} median_max_rho={float(np.median(pts)):.4f} seeds={len(pts)}")
    return 0 if all(r["conservation_ok"] for r in rows) else 1


# ---------------------------------------------------------------------------
# validate-example / check-properties
# ---------------------------------------------------------------------------


def cmd_validate_example(args) -> int:
    ex = worked_example()
    rows = worked_rows(ex)
    t_id = ideal_time(ex.app, ex.runtime, ex.cluster)
    print(f"T_id = {t_id:g} s (expected {WORKED_T_ID:g})")
    print(f"{'GPUs':>5} {'rho':>8} {'expected':>9} {'reference':>10}")
    ok = abs(t_id - WORKED_T_ID) < 1e-9
    for k, value in rows.items():
        exact = abs(value - WORKED_EXPECTED[k]) <= EXACT_TOL
        near = abs(value - WORKED_REFERENCE[k]) <= REFERENCE_TOL
        ok = ok and exact and near
        flag = "ok" if exact and near else "MISMATCH"
        print(f"{k:>5} {value:>8.4f} {WORKED_EXPECTED[k]:>9.3f} {WORKED_REFERENCE[k]:>10.2f}  {flag}")
    return 0 if ok else 1


def property_suite(n_instances: int, seed: int = 0) -> dict:
    from .propcheck import check_instance, misreport_gain, random_instance, scale_misreports

    rng = np.random.default_rng(seed)
    failures = 0
    sp_violations = 0
    for _ in range(n_instances):
        inst = random_instance(rng)
        if not check_instance(inst).ok:
            failures += 1
        sp_violations += len(misreport_gain(inst, scale_misreports))
    return {"instances": n_instances, "invariant_failures": failures, "sp_violations": sp_violations}


def counterexample_instances() -> List[dict]:
    from .auction import offline_minmax_rho

    out = []
    for name, build, sequential in (("instance-1", drf_instance_1, False), ("instance-2", drf_instance_2, True)):
        cluster, apps = build()
        drf = check_properties(apps, drf_allocation(cluster, apps, sequential), cluster)
        best = check_properties(apps, offline_minmax_rho(apps, cluster), cluster)
        out.append({"instance": name, "drf_si_violations": drf.si_violations, "drf_envy": drf.envy,
                    "drf_pe_witness": drf.pe_witness is not None, "minmax_clean": best.clean})
    return out


def cmd_check_properties(args) -> int:
    ok = True
    results = counterexample_instances()
    for r in results:
        print(f"{r['instance']}: DRF SI violations={r['drf_si_violations']} envy={r['drf_envy']} "
              f"PE witness={r['drf_pe_witness']}; min-max allocation clean={r['minmax_clean']}")
        ok = ok and r["minmax_clean"]
    i1, i2 = results
    ok = ok and sorted(i1["drf_si_violations"]) == ["A1", "A2"] and bool(i2["drf_envy"]) and i2["drf_pe_witness"]
    suite = property_suite(args.instances, args.seed)
    print(json.dumps(suite))
    ok = ok and suite["invariant_failures"] == 0 and suite["sp_violations"] == 0
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftfair", description="Finish-time fair GPU scheduling simulator")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one simulation per configured seed")
    sim.add_argument("--config")
    src = sim.add_mutually_exclusive_group()
    src.add_argument("--workload", help="JSONL workload file")
    src.add_argument("--synthetic", action="store_true", help="generate the workload (default)")
    sim.add_argument("--scheduler", choices=POLICY_NAMES)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", default="out")
    sim.add_argument("--emit-cdf", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="run a parameter sweep")
    sw.add_argument("--config")
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sw.add_argument("--values", required=True)
    sw.add_argument("--scheduler", choices=POLICY_NAMES)
    sw.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    sw.add_argument("--out", default="sweep")
    sw.set_defaults(func=cmd_sweep)

    ve = sub.add_parser("validate-example", help="print the 16-GPU worked-example bid table")
    ve.set_defaults(func=cmd_validate_example)

    cp = sub.add_parser("check-properties", help="DRF counterexamples and auction property suite")
    cp.add_argument("--instances", type=int, default=200)
    cp.add_argument("--seed", type=int, default=0)
    cp.set_defaults(func=cmd_check_properties)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, WorkloadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
