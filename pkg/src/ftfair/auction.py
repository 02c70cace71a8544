"""Arbiter-side mechanism: filtering, partial-allocation auction, leftovers.

Winner determination maximizes the product of 1/rho over one bid row per
participant (equivalently minimizes the sum of log rho) subject to rows
being disjoint within the offer.  Rows are compared by per-slot GPU counts,
so the solver is a dynamic program over the remaining per-slot capacity.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .apps import AppRuntime, AppSpec, rho, useful_demand
from .bidding import Agent, BidTable, Offer
from .cluster import EMPTY, ClusterSpec, GpuId, SlowdownProfile, best_score_pick

# Cost of an unbounded (+inf) rho; dominates any realistic sum of log rho.
INF_COST = 1e4
TIE_TOL = 1e-9
DEFAULT_NODE_LIMIT = 10 ** 6


class SolverLimitExceeded(RuntimeError):
    pass


def row_cost(value: float) -> float:
    if value <= 0:
        raise ValueError("rho must be positive")
    return INF_COST if math.isinf(value) else math.log(value)


@dataclass(frozen=True)
class AuctionInput:
    round_id: int
    offer: frozenset
    participants: Tuple[Tuple[str, BidTable], ...]
    # Service order for apps whose empty row is unbounded (arrival order);
    # apps not listed follow in id order.
    order: Tuple[str, ...] = ()

    def queue_order(self, ids: Sequence[str]) -> List[str]:
        rank = {a: i for i, a in enumerate(self.order)}
        return sorted(ids, key=lambda a: (rank.get(a, len(rank)), a))


@dataclass(frozen=True)
class Lease:
    app_id: str
    gpus: frozenset
    start: float
    duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("lease duration must be positive")

    @property
    def expiry(self) -> float:
        return self.start + self.duration


@dataclass
class PFSolution:
    choice: Dict[str, int]
    rows: Dict[str, frozenset]
    cost: float
    nodes: int


@dataclass
class AuctionResult:
    chosen: Dict[str, frozenset] = field(default_factory=dict)
    c: Dict[str, float] = field(default_factory=dict)
    grants: Dict[str, frozenset] = field(default_factory=dict)
    leftover: frozenset = EMPTY
    fractional_leftover: float = 0.0
    nodes: int = 0
    participants: Tuple[str, ...] = ()
    leftover_grants: Dict[str, frozenset] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def filter_apps(apps: Sequence[Tuple[str, float, float]], f: float) -> List[str]:
    """Worst-off ``ceil((1 - f) N)`` apps (at least one) by reported rho.

    ``apps`` holds ``(app_id, rho, arrival_time)``; ties go to the earlier
    arrival, then the smaller id.
    """
    if not 0 <= f <= 1:
        raise ValueError("f must lie in [0, 1]")
    if not apps:
        return []
    ranked = sorted(apps, key=lambda a: (-a[1], a[2], a[0]))
    n = max(1, math.ceil(round((1.0 - f) * len(apps), 9)))
    return [a[0] for a in ranked[:n]]


# ---------------------------------------------------------------------------
# Proportional-fair winner determination
# ---------------------------------------------------------------------------


def _slot_index(offer: frozenset) -> Tuple[Dict[tuple, int], Tuple[int, ...], Dict[tuple, List[GpuId]]]:
    members: Dict[tuple, List[GpuId]] = defaultdict(list)
    for g in sorted(offer):
        members[g.slot_key].append(g)
    keys = sorted(members)
    index = {k: i for i, k in enumerate(keys)}
    return index, tuple(len(members[k]) for k in keys), members


def _encode(offer: frozenset, tables: Sequence[BidTable]):
    index, capacity, members = _slot_index(offer)
    encoded = []
    for table in tables:
        rows = []
        for r in table.rows:
            vec = [0] * len(capacity)
            for g in r.allocation:
                if g not in offer:
                    raise ValueError(f"row of {table.app_id} references GPU {g} outside the offer")
                vec[index[g.slot_key]] += 1
            rows.append((tuple(vec), row_cost(r.rho)))
        encoded.append(rows)
    return encoded, capacity, members


def solve_rows(rows: Sequence[Sequence[Tuple[Tuple[int, ...], float]]], capacity: Tuple[int, ...],
               node_limit: int = DEFAULT_NODE_LIMIT) -> Tuple[List[int], float, int]:
    """Exact min-cost selection of one row per app under per-slot capacity.

    Returns the lexicographically smallest optimal row-index vector.
    """
    n = len(rows)
    width = len(capacity)
    mats, costs = [], []
    for r in rows:
        order = sorted(range(len(r)), key=lambda k: r[k][1])
        mats.append(np.array([r[k][0] for k in order], dtype=np.int64).reshape(len(r), width))
        costs.append([r[k][1] for k in order])
    memo: Dict[Tuple[int, Tuple[int, ...]], float] = {}
    nodes = 0
    floor = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        floor[i] = floor[i + 1] + min(c for _, c in rows[i])

    def best(i: int, rem: Tuple[int, ...]) -> float:
        nonlocal nodes
        if i == n:
            return 0.0
        key = (i, rem)
        hit = memo.get(key)
        if hit is not None:
            return hit
        nodes += 1
        if nodes > node_limit:
            raise SolverLimitExceeded(f"winner determination exceeded {node_limit} nodes")
        value = math.inf
        rem_arr = np.array(rem, dtype=np.int64)
        fits = np.flatnonzero((mats[i] <= rem_arr).all(axis=1))
        for k in fits:
            cost = costs[i][k]
            if cost + floor[i + 1] >= value:
                break
            sub = best(i + 1, tuple((rem_arr - mats[i][k]).tolist()))
            value = min(value, cost + sub)
        memo[key] = value
        return value

    optimum = best(0, tuple(capacity))
    if math.isinf(optimum):
        raise ValueError("no feasible row selection; is an empty row missing?")
    choice, prefix, rem = [], 0.0, tuple(capacity)
    for i in range(n):
        for idx, (vec, cost) in enumerate(rows[i]):
            if any(v > r for v, r in zip(vec, rem)):
                continue
            nxt = tuple(r - v for r, v in zip(rem, vec))
            if prefix + cost + best(i + 1, nxt) <= optimum + TIE_TOL:
                choice.append(idx)
                prefix += cost
                rem = nxt
                break
    return choice, optimum, nodes


def _realize(choice_vecs: Sequence[Tuple[int, ...]], members: Dict[tuple, List[GpuId]]) -> List[frozenset]:
    """Concrete disjoint GPU sets for per-slot count vectors, in app order."""
    keys = sorted(members)
    cursor = [0] * len(keys)
    out = []
    for vec in choice_vecs:
        gpus = []
        for s, c in enumerate(vec):
            gpus.extend(members[keys[s]][cursor[s]:cursor[s] + c])
            cursor[s] += c
        out.append(frozenset(gpus))
    return out


def _unbounded(table: BidTable) -> bool:
    return math.isinf(table.empty_row.rho)


def served_queue(inp: AuctionInput, exclude: Optional[str] = None,
                 node_limit: int = DEFAULT_NODE_LIMIT) -> Tuple[List[str], int]:
    """Apps with an unbounded empty row that get a non-empty row this round.

    They are admitted in queue order while some disjoint choice of non-empty
    rows still fits all admitted apps.  Reported values play no part, so
    scaling a bid cannot push another queued app out.
    """
    tables = dict(p for p in inp.participants if p[0] != exclude)
    waiting = inp.queue_order([a for a, t in tables.items() if _unbounded(t)])
    served: List[str] = []
    nodes = 0
    for a in waiting:
        trial = sorted(served + [a])
        encoded, capacity, _ = _encode(inp.offer, [tables[x] for x in trial])
        rows = [[(v, 0.0) for v, _ in enc if any(v)] for enc in encoded]
        if any(not r for r in rows):
            continue
        try:
            _, _, used = solve_rows(rows, capacity, node_limit)
        except ValueError:
            continue
        nodes += used
        served.append(a)
    return served, nodes


def proportional_fair(inp: AuctionInput, exclude: Optional[str] = None,
                      node_limit: int = DEFAULT_NODE_LIMIT) -> PFSolution:
    """Proportional-fair row per participant; ties to the smallest (app id, row index).

    Queued apps (unbounded empty row) admitted by ``served_queue`` must take a
    non-empty row; the others keep their empty row.  Every remaining product
    term is then finite unless a bid itself marks a row unbounded.
    """
    parts = sorted((p for p in inp.participants if p[0] != exclude), key=lambda p: p[0])
    if not parts:
        return PFSolution({}, {}, 0.0, 0)
    served, nodes = served_queue(inp, exclude, node_limit)
    encoded, capacity, members = _encode(inp.offer, [t for _, t in parts])
    keep: List[List[int]] = []
    for (app_id, table), enc in zip(parts, encoded):
        if not _unbounded(table):
            keep.append(list(range(len(enc))))
        else:
            want = app_id in served
            keep.append([k for k, (v, _) in enumerate(enc) if any(v) == want])
    rows = [[enc[k] for k in idx] for enc, idx in zip(encoded, keep)]
    choice, cost, used = solve_rows(rows, capacity, node_limit)
    choice = [idx[c] for idx, c in zip(keep, choice)]
    vecs = [encoded[i][c][0] for i, c in enumerate(choice)]
    sets = _realize(vecs, members)
    ids = [a for a, _ in parts]
    return PFSolution(dict(zip(ids, choice)), dict(zip(ids, sets)), cost, nodes + used)


def hidden_payment(inp: AuctionInput, pf: PFSolution,
                   node_limit: int = DEFAULT_NODE_LIMIT) -> Tuple[Dict[str, float], int]:
    """Fraction c_i of its proportional-fair row each winner keeps.

    c_i is the others' product of 1/rho with i present over the same product
    with i absent.  Queued apps left unserved in the optimum are left out of
    both products (their admission does not depend on bids), and the ratio
    is clamped to 1.
    """
    tables = dict(inp.participants)
    out: Dict[str, float] = {}
    nodes = 0
    for i, row_idx in pf.choice.items():
        if not tables[i].rows[row_idx].allocation:
            continue
        without = proportional_fair(inp, exclude=i, node_limit=node_limit)
        nodes += without.nodes
        log_ratio = 0.0
        for j, idx in pf.choice.items():
            if j == i:
                continue
            with_i = tables[j].rows[idx].rho
            if math.isinf(with_i):
                continue
            without_i = tables[j].rows[without.choice[j]].rho
            log_ratio += math.log(without_i) - math.log(with_i) if math.isfinite(without_i) else math.inf
        out[i] = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
    return out, nodes


def discretize_grant(row: frozenset, c: float, profile: SlowdownProfile) -> frozenset:
    """Keep floor(c * |row|) GPUs of the row with the best placement score."""
    if not 0 < c <= 1:
        raise ValueError("c must lie in (0, 1]")
    if c == 1:
        return frozenset(row)
    k = math.floor(c * len(row) + 1e-9)
    return best_score_pick(row, k, profile) if k else EMPTY


def leftover_allocate(leftover: frozenset, candidates: Sequence[str],
                      holdings: Dict[str, frozenset], demand_left: Dict[str, int],
                      rng: np.random.Generator) -> Dict[str, frozenset]:
    """Hand leftover GPUs one at a time to candidate apps at random.

    Apps already holding a GPU on the same machine are preferred; apps with no
    unmet demand are skipped; GPUs nobody can take stay free.
    """
    held = {a: set(holdings.get(a, EMPTY)) for a in candidates}
    left = {a: demand_left.get(a, 0) for a in candidates}
    out: Dict[str, set] = defaultdict(set)
    for g in sorted(leftover):
        able = [a for a in sorted(candidates) if left[a] > 0]
        if not able:
            break
        near = [a for a in able if any(h.machine_key == g.machine_key for h in held[a])]
        pool = near or able
        pick = pool[int(rng.integers(len(pool)))] if len(pool) > 1 else pool[0]
        out[pick].add(g)
        held[pick].add(g)
        left[pick] -= 1
    return {a: frozenset(s) for a, s in out.items()}


# ---------------------------------------------------------------------------
# One round
# ---------------------------------------------------------------------------


def auction(inp: AuctionInput, profiles: Dict[str, SlowdownProfile],
            node_limit: int = DEFAULT_NODE_LIMIT) -> AuctionResult:
    """Partial-allocation auction over ``inp`` (no leftover handling)."""
    pf = proportional_fair(inp, node_limit=node_limit)
    c, extra = hidden_payment(inp, pf, node_limit)
    result = AuctionResult(nodes=pf.nodes + extra,
                           participants=tuple(a for a, _ in inp.participants))
    granted = set()
    for app_id in pf.choice:
        row = pf.rows[app_id]
        if not row:
            continue
        result.chosen[app_id] = row
        result.c[app_id] = c[app_id]
        result.fractional_leftover += (1.0 - c[app_id]) * len(row)
        grant = discretize_grant(row, c[app_id], profiles[app_id])
        if grant:
            result.grants[app_id] = grant
            granted |= grant
    result.leftover = frozenset(inp.offer) - granted
    return result


def run_round(agents: Sequence[Agent], offer: frozenset, f: float, lease_duration: float,
              now: float, cluster: ClusterSpec, rng: np.random.Generator,
              cap: int = 256, round_id: int = 0,
              node_limit: int = DEFAULT_NODE_LIMIT) -> Tuple[AuctionResult, List[Lease]]:
    """Probe, filter, auction, then place leftovers; returns leases for all grants."""
    offer = frozenset(offer)
    live = [a for a in agents if a.runtime.status != "finished"]
    if not offer or not live:
        return AuctionResult(leftover=offer), []
    by_id = {a.app_id: a for a in live}
    probes = [(a.app_id, a.current_rho(now, cluster), a.app.arrival_time) for a in live]
    chosen = filter_apps(probes, f)
    msg = Offer(round_id, offer)
    bids = tuple((a, by_id[a].prepare_bid(msg, now, cluster, cap)) for a in sorted(chosen))
    queue = tuple(a.app_id for a in sorted(live, key=lambda a: (a.app.arrival_time, a.app_id)))
    inp = AuctionInput(round_id, offer, bids, queue)
    result = auction(inp, {a.app_id: a.app.profile for a in live}, node_limit)

    holdings = {a.app_id: frozenset(a.runtime.allocation) | result.grants.get(a.app_id, EMPTY)
                for a in live}
    demand = {a.app_id: useful_demand(a.app, a.runtime) - len(holdings[a.app_id]) for a in live}
    others = [a for a in sorted(by_id) if a not in chosen]
    extra = leftover_allocate(result.leftover, others, holdings, demand, rng)
    remaining = result.leftover - frozenset().union(*extra.values()) if extra else result.leftover
    if remaining and not result.grants and not extra:
        # The round would hand out nothing at all; with no lease and no
        # progress there may be no later event, so give participants the rest.
        extra = leftover_allocate(remaining, sorted(chosen), holdings, demand, rng)
    result.leftover_grants = extra
    for a, s in extra.items():
        result.grants[a] = result.grants.get(a, EMPTY) | s
    leases = [Lease(a, g, now, lease_duration) for a, g in sorted(result.grants.items()) if g]
    return result, leases


# ---------------------------------------------------------------------------
# Offline oracle
# ---------------------------------------------------------------------------


def _distributions(size: int, n: int):
    """Ways to hand out at most ``size`` identical GPUs to ``n`` apps."""
    for combo in itertools.product(range(size + 1), repeat=n):
        if sum(combo) <= size:
            yield combo


def offline_minmax_rho(apps: Sequence[AppSpec], cluster: ClusterSpec,
                       max_apps: int = 4, max_gpus: int = 8) -> Dict[str, frozenset]:
    """Exhaustive leximin allocation (minimizes max rho first) for tiny instances.

    All apps are taken to start at t=0 with contention equal to their count.
    """
    if len(apps) > max_apps or cluster.total_gpus > max_gpus:
        raise ValueError("oracle scale exceeded")
    n = len(apps)
    _, capacity, members = _slot_index(frozenset(cluster.all_gpus()))
    rts = [AppRuntime.start(a, now=0.0, n_avg=n) for a in apps]
    cache: List[Dict[Tuple[int, ...], float]] = [dict() for _ in apps]

    def value(i: int, vec: Tuple[int, ...]) -> float:
        hit = cache[i].get(vec)
        if hit is None:
            g = _realize([vec], members)[0]
            hit = rho(apps[i], rts[i], g, 0.0, cluster)
            cache[i][vec] = hit
        return hit

    best_key, best_vecs = None, None
    per_slot = [list(_distributions(c, n)) for c in capacity]
    for combo in itertools.product(*per_slot):
        vecs = [tuple(combo[s][i] for s in range(len(capacity))) for i in range(n)]
        rhos = [value(i, v) for i, v in enumerate(vecs)]
        if any(sum(v) > a.app_demand_max for v, a in zip(vecs, apps)):
            continue
        key = tuple(sorted(rhos, reverse=True))
        if best_key is None or _leximin_less(key, best_key):
            best_key, best_vecs = key, vecs
    sets = _realize(best_vecs, members)
    return {a.app_id: s for a, s in zip(apps, sets)}


def _leximin_less(a: Tuple[float, ...], b: Tuple[float, ...]) -> bool:
    for x, y in zip(a, b):
        if x < y * (1 - 1e-12):
            return True
        if x > y * (1 + 1e-12):
            return False
    return False
