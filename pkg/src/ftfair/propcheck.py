"""Randomized small auction instances and brute-force checks of the mechanism.

Instances are built from real app models (not arbitrary tables) so bid
values have the structure the mechanism is designed for: more GPUs never
hurt, and tighter placement never hurts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .apps import AppRuntime, AppSpec, JobSpec, SingleJob, SuccessiveHalving, halving_schedule, rho
from .auction import (
    AuctionInput,
    AuctionResult,
    auction,
    proportional_fair,
    row_cost,
    _encode,
)
from .bidding import BidTable, Offer, ValuationRow, enumerate_candidates
from .cluster import COMPUTE, EMPTY, NETWORK, ClusterSpec

LEFTOVER_BOUND = 1.0 / math.e


@dataclass
class Instance:
    cluster: ClusterSpec
    apps: List[AppSpec]
    runtimes: Dict[str, AppRuntime]
    offer: frozenset
    tables: Dict[str, BidTable]
    now: float = 0.0

    def auction_input(self, tables: Optional[Dict[str, BidTable]] = None) -> AuctionInput:
        tables = tables or self.tables
        return AuctionInput(0, self.offer, tuple(sorted(tables.items())))

    @property
    def profiles(self):
        return {a.app_id: a.profile for a in self.apps}


def random_cluster(rng: np.random.Generator, max_gpus: int = 8) -> ClusterSpec:
    while True:
        racks = []
        for _ in range(int(rng.integers(1, 3))):
            machines = []
            for _ in range(int(rng.integers(1, 3))):
                machines.append([int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 3)))])
            racks.append(machines)
        spec = ClusterSpec.from_nested(racks)
        if spec.total_gpus <= max_gpus:
            return spec


def random_app(rng: np.random.Generator, app_id: str, max_gpus: int) -> AppSpec:
    profile = NETWORK if rng.random() < 0.5 else COMPUTE
    cap = int(rng.choice([1, 2, 4]))
    if rng.random() < 0.4:
        serial = float(rng.uniform(0.5, 2.0))
        job = JobSpec(serial, int(rng.integers(50, 500)), cap)
        return AppSpec(app_id, 0.0, (job,), SingleJob(), profile, cap)
    n = int(rng.integers(2, 5))
    serial = [float(s) for s in rng.uniform(0.5, 2.0, size=n)]
    budget = float(rng.uniform(200, 2000)) * n
    iters = halving_schedule(budget, serial)
    jobs = tuple(JobSpec(s, sum(iters), cap) for s in serial)
    demand = int(min(max_gpus, max(cap, cap * n)))
    return AppSpec(app_id, 0.0, jobs, SuccessiveHalving(budget, n, iters), profile, max(demand, cap))


def random_instance(rng: np.random.Generator, max_apps: int = 4, max_gpus: int = 8,
                    max_rows: Optional[int] = 8) -> Instance:
    cluster = random_cluster(rng, max_gpus)
    n = int(rng.integers(1, max_apps + 1))
    apps = [random_app(rng, f"a{i}", cluster.total_gpus) for i in range(n)]
    all_gpus = cluster.all_gpus()
    runtimes: Dict[str, AppRuntime] = {}
    held: set = set()
    # Some apps already hold a GPU, so empty rows carry finite values.
    for a in apps:
        rt = AppRuntime.start(a, now=0.0, n_avg=n)
        free = [g for g in all_gpus if g not in held]
        if free and rng.random() < 0.4:
            g = free[int(rng.integers(len(free)))]
            rt.allocation = frozenset([g])
            held.add(g)
        runtimes[a.app_id] = rt
    now = float(rng.uniform(0, 100))
    offer = frozenset(g for g in all_gpus if g not in held)
    tables = {}
    for a in apps:
        rt = runtimes[a.app_id]
        cands = enumerate_candidates(Offer(0, offer), a, held=rt.allocation)
        if max_rows is not None and len(cands) > max_rows - 1:
            pick = sorted(rng.choice(len(cands), max_rows - 1, replace=False))
            cands = [cands[int(i)] for i in pick]
        rows = [ValuationRow(EMPTY, rho(a, rt, rt.allocation, now, cluster))]
        rows += [ValuationRow(c, rho(a, rt, rt.allocation | c, now, cluster)) for c in cands]
        tables[a.app_id] = BidTable(a.app_id, tuple(rows))
    return Instance(cluster, apps, runtimes, offer, tables, now)


# ---------------------------------------------------------------------------
# Brute-force references
# ---------------------------------------------------------------------------


def _combos(inp: AuctionInput):
    """All row combinations as arrays: (ids, index grid, feasibility, per-app costs)."""
    parts = sorted(inp.participants, key=lambda p: p[0])
    encoded, capacity, _ = _encode(inp.offer, [t for _, t in parts])
    grids = np.meshgrid(*(np.arange(len(rows)) for rows in encoded), indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    costs = np.zeros(idx.shape, dtype=float)
    used = np.zeros((idx.shape[0], len(capacity)), dtype=int)
    nonempty = np.zeros(idx.shape, dtype=bool)
    for i, rows in enumerate(encoded):
        vecs = np.array([v for v, _ in rows], dtype=int).reshape(len(rows), len(capacity))
        cs = np.array([c for _, c in rows], dtype=float)
        costs[:, i] = cs[idx[:, i]]
        used += vecs[idx[:, i]]
        nonempty[:, i] = vecs.sum(axis=1)[idx[:, i]] > 0
    feasible = np.all(used <= np.array(capacity, dtype=int), axis=1)
    return [a for a, _ in parts], idx, feasible, costs, nonempty


def brute_force_served(inp: AuctionInput) -> List[str]:
    """Queued apps admitted in queue order while all admitted ones can get a row."""
    ids, _, feasible, _, nonempty = _combos(inp)
    tables = dict(inp.participants)
    waiting = inp.queue_order([a for a in ids if math.isinf(tables[a].empty_row.rho)])
    served: List[str] = []
    for a in waiting:
        cols = [ids.index(x) for x in served + [a]]
        if np.any(feasible & np.all(nonempty[:, cols], axis=1)):
            served.append(a)
    return served


def _admissible(inp: AuctionInput):
    ids, idx, feasible, costs, nonempty = _combos(inp)
    tables = dict(inp.participants)
    served = set(brute_force_served(inp))
    ok = feasible.copy()
    for i, a in enumerate(ids):
        if math.isinf(tables[a].empty_row.rho):
            ok &= nonempty[:, i] if a in served else ~nonempty[:, i]
    return ids, idx, ok, costs


def brute_force_pf(inp: AuctionInput) -> Tuple[Dict[str, int], float]:
    """Exhaustive search over one row per participant; lexicographic tie-break."""
    ids, idx, ok, costs = _admissible(inp)
    total = costs.sum(axis=1)
    best_cost = float(total[ok].min())
    # meshgrid with "ij" enumerates combinations in lexicographic order
    first = int(np.flatnonzero(ok & (total <= best_cost + 1e-9))[0])
    return dict(zip(ids, (int(i) for i in idx[first]))), best_cost


@dataclass
class CheckResult:
    disjoint: bool
    c_in_range: bool
    leftover_ok: bool
    matches_brute_force: bool
    pareto_ok: bool
    leftover_fraction: float
    details: str = ""

    @property
    def ok(self) -> bool:
        return self.disjoint and self.c_in_range and self.leftover_ok and self.matches_brute_force and self.pareto_ok


def _pareto_ok(inp: AuctionInput, choice: Dict[str, int]) -> bool:
    ids, idx, feasible, costs, _ = _combos(inp)
    chosen_row = np.array([choice[a] for a in ids])
    chosen = costs[np.all(idx == chosen_row, axis=1)][0]
    no_worse = np.all(costs <= chosen + 1e-12, axis=1)
    better = np.any(costs < chosen - 1e-9, axis=1)
    return not bool(np.any(feasible & no_worse & better))


def check_instance(inst: Instance, pareto: bool = True) -> CheckResult:
    inp = inst.auction_input()
    result = auction(inp, inst.profiles)
    pf = proportional_fair(inp)
    grants = list(result.grants.values())
    union = frozenset().union(*grants) if grants else frozenset()
    disjoint = sum(len(g) for g in grants) == len(union) and union <= inst.offer
    disjoint = disjoint and all(result.grants[a] <= result.chosen[a] for a in result.grants)
    disjoint = disjoint and result.leftover == inst.offer - union
    c_ok = all(0 < c <= 1 for c in result.c.values())
    winners = len(result.chosen)
    bound = LEFTOVER_BOUND * len(inst.offer) + winners
    leftover_ok = result.fractional_leftover <= bound + 1e-9
    bf_choice, bf_cost = brute_force_pf(inp)
    matches = bf_choice == pf.choice and abs(bf_cost - pf.cost) <= 1e-9
    pareto_ok = _pareto_ok(inp, pf.choice) if pareto else True
    frac = result.fractional_leftover / len(inst.offer) if inst.offer else 0.0
    return CheckResult(disjoint, c_ok, leftover_ok, matches, pareto_ok, frac)


# ---------------------------------------------------------------------------
# Strategy-proofness probes
# ---------------------------------------------------------------------------

SCALE_GRID = (0.25, 0.5, 2.0, 4.0)


def scale_table(table: BidTable, factor: float) -> BidTable:
    return BidTable(table.app_id, tuple(ValuationRow(r.allocation, r.rho * factor) for r in table.rows))


def _true_rho(inst: Instance, app_id: str, grant: frozenset) -> float:
    app = next(a for a in inst.apps if a.app_id == app_id)
    rt = inst.runtimes[app_id]
    return rho(app, rt, rt.allocation | grant, inst.now, inst.cluster)


def _slack_rho(inst: Instance, app_id: str, result: AuctionResult) -> float:
    """True rho of the truthful grant plus its best single extra GPU from the offer."""
    grant = result.grants.get(app_id, frozenset())
    base = _true_rho(inst, app_id, grant)
    extra = [g for g in inst.offer if g not in grant]
    if not extra:
        return base
    return min(base, min(_true_rho(inst, app_id, grant | {g}) for g in extra))


def misreport_gain(inst: Instance, misreports) -> List[Tuple[str, str, float, float]]:
    """Misreports that beat truth-telling by more than one GPU of slack.

    ``misreports(table, rng)`` yields (label, table) pairs.  Returns
    (app, label, truthful true rho with slack, misreport true rho) per violation.
    """
    truthful = auction(inst.auction_input(), inst.profiles)
    bad = []
    for app_id, table in sorted(inst.tables.items()):
        slack = _slack_rho(inst, app_id, truthful)
        for label, fake in misreports(table):
            tables = dict(inst.tables)
            tables[app_id] = fake
            res = auction(inst.auction_input(tables), inst.profiles)
            got = _true_rho(inst, app_id, res.grants.get(app_id, frozenset()))
            if got < slack * (1 - 1e-9):
                bad.append((app_id, label, slack, got))
    return bad


def scale_misreports(table: BidTable):
    for s in SCALE_GRID:
        yield f"scale x{s}", scale_table(table, s)


def row_misreports(table: BidTable):
    """Inflate or deflate one non-empty row at a time (a stronger adversary)."""
    for i, r in enumerate(table.rows):
        if not r.allocation:
            continue
        for s in SCALE_GRID:
            rows = list(table.rows)
            rows[i] = ValuationRow(r.allocation, r.rho * s)
            yield f"row {i} x{s}", BidTable(table.app_id, tuple(rows))
