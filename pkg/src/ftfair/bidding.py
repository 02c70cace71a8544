"""App-side agent: turns a resource offer into a table of rho estimates."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .apps import INF, AppRuntime, AppSpec, rho, rho_many
from .cluster import (
    EMPTY,
    ClusterSpec,
    GpuId,
    SlowdownProfile,
    SpanLevel,
    consolidated_pick,
    slot_signature,
    spread_pick,
)

DEFAULT_CANDIDATE_CAP = 256


@dataclass(frozen=True)
class Offer:
    round_id: int
    gpus: frozenset
    probe_deadline: int = 0


@dataclass(frozen=True)
class ValuationRow:
    allocation: frozenset
    rho: float

    @property
    def count(self) -> int:
        return len(self.allocation)


@dataclass(frozen=True)
class BidTable:
    app_id: str
    rows: Tuple[ValuationRow, ...]

    def __post_init__(self):
        empties = sum(1 for r in self.rows if not r.allocation)
        if empties != 1:
            raise ValueError(f"bid table for {self.app_id} needs exactly one empty row, has {empties}")

    @property
    def empty_row(self) -> ValuationRow:
        return next(r for r in self.rows if not r.allocation)

    def rho_of(self, allocation: frozenset) -> float:
        sig = slot_signature(allocation)
        for r in self.rows:
            if slot_signature(r.allocation) == sig:
                return r.rho
        raise KeyError("allocation not in bid table")


class ReportedProfile:
    """Slowdown as an app reports it, possibly skewed; execution never sees this."""

    def __init__(self, true_profile: SlowdownProfile, lie_x: float = 0.0):
        if lie_x < 0:
            raise ValueError("lie percentage must be >= 0")
        self.true_profile = true_profile
        self.lie_x = lie_x
        self.name = true_profile.name

    def factor(self, level: SpanLevel) -> float:
        base = self.true_profile.factor(level)
        scale = 1.0 + self.lie_x / 100.0
        # no clamp at 1: this is a report, not a physical slowdown
        return base * scale if level >= SpanLevel.RACK else base / scale


def lie_slowdown(profile: SlowdownProfile, x: float) -> ReportedProfile:
    """Over-report spread placements and under-report dense ones by ``x`` percent."""
    return ReportedProfile(profile, x)


# ---------------------------------------------------------------------------
# Candidate enumeration
# ---------------------------------------------------------------------------


def _slot_groups(gpus) -> List[List[GpuId]]:
    groups = {}
    for g in sorted(gpus):
        groups.setdefault(g.slot_key, []).append(g)
    return [groups[k] for k in sorted(groups)]


def _n_vectors(sizes: Sequence[int], limit: int) -> int:
    """Number of non-zero per-slot count vectors with total <= limit."""
    ways = [1] + [0] * limit
    for size in sizes:
        nxt = [0] * (limit + 1)
        for total, w in enumerate(ways):
            if w:
                for c in range(min(size, limit - total) + 1):
                    nxt[total + c] += w
        ways = nxt
    return sum(ways) - 1


def _count_vectors(sizes: Sequence[int], limit: int) -> Iterator[Tuple[int, ...]]:
    def rec(i, left):
        if i == len(sizes):
            yield ()
            return
        for c in range(min(sizes[i], left) + 1):
            for rest in rec(i + 1, left - c):
                yield (c,) + rest
    for vec in rec(0, limit):
        if sum(vec):
            yield vec


def enumerate_candidates(offer: Offer, app: AppSpec, cap: int = DEFAULT_CANDIDATE_CAP,
                         held: frozenset = EMPTY) -> List[frozenset]:
    """Distinct-placement subsets of the offer the app could usefully take.

    Subsets are deduplicated by per-slot counts; GPUs inside a slot are
    interchangeable.  Above ``cap`` signatures only the densest and most spread
    subset of each power-of-two size is kept.
    """
    if cap < 2:
        raise ValueError("candidate cap must be >= 2")
    gpus = frozenset(offer.gpus)
    if not gpus:
        return []
    limit = min(len(gpus), app.app_demand_max - len(held))
    if limit <= 0:
        return []
    groups = _slot_groups(gpus)
    sizes = [len(g) for g in groups]
    if _n_vectors(sizes, limit) <= cap:
        out = [frozenset(itertools.chain.from_iterable(grp[:c] for grp, c in zip(groups, vec)))
               for vec in _count_vectors(sizes, limit)]
    else:
        counts, k = [], 1
        while k < limit:
            counts.append(k)
            k *= 2
        counts.append(limit)
        seen, out = set(), []
        for k in counts:
            for pick in (consolidated_pick(gpus, k, anchor=held), spread_pick(gpus, k)):
                sig = slot_signature(pick)
                if sig not in seen:
                    seen.add(sig)
                    out.append(pick)
    return sorted(out, key=lambda s: (len(s), slot_signature(s)))


# ---------------------------------------------------------------------------
# Bids
# ---------------------------------------------------------------------------


def current_rho(app: AppSpec, rt: AppRuntime, now: float, cluster: ClusterSpec,
                profile=None) -> float:
    return rho(app, rt, rt.allocation, now, cluster, profile)


def prepare_bid(app: AppSpec, rt: AppRuntime, offer: Offer, now: float, cluster: ClusterSpec,
                cap: int = DEFAULT_CANDIDATE_CAP, profile=None) -> BidTable:
    """Valuation table: rho with each candidate added to the GPUs already held."""
    held = frozenset(rt.allocation)
    cands = enumerate_candidates(offer, app, cap, held)
    values = rho_many(app, rt, [held] + [held | c for c in cands], now, cluster, profile)
    rows = [ValuationRow(EMPTY, values[0])]
    rows += [ValuationRow(c, v) for c, v in zip(cands, values[1:])]
    return BidTable(app.app_id, tuple(rows))


def perturb_bid(table: BidTable, theta: float, rng: np.random.Generator) -> BidTable:
    """Multiply every row's rho by (1 + e), e ~ U[-theta, theta] per row."""
    if not 0 <= theta < 1:
        raise ValueError("theta must lie in [0, 1)")
    if theta == 0:
        return table
    errs = rng.uniform(-theta, theta, size=len(table.rows))
    rows = tuple(ValuationRow(r.allocation, r.rho * (1.0 + e)) for r, e in zip(table.rows, errs))
    return BidTable(table.app_id, rows)


@dataclass
class Agent:
    """Bids on behalf of one app, optionally with noise or a strategic lie."""

    app: AppSpec
    runtime: AppRuntime
    lie_x: float = 0.0
    theta: float = 0.0
    rng: Optional[np.random.Generator] = None

    @property
    def app_id(self) -> str:
        return self.app.app_id

    @property
    def reported_profile(self):
        if self.lie_x:
            return lie_slowdown(self.app.profile, self.lie_x)
        return self.app.profile

    def current_rho(self, now: float, cluster: ClusterSpec) -> float:
        # The lie lives in bids only; the filtering probe reports the true profile.
        value = current_rho(self.app, self.runtime, now, cluster)
        if self.theta and math.isfinite(value):
            value *= 1.0 + self.rng.uniform(-self.theta, self.theta)
        return value

    def prepare_bid(self, offer: Offer, now: float, cluster: ClusterSpec,
                    cap: int = DEFAULT_CANDIDATE_CAP) -> BidTable:
        table = prepare_bid(self.app, self.runtime, offer, now, cluster, cap, self.reported_profile)
        if self.theta:
            table = perturb_bid(table, self.theta, self.rng)
        return table
