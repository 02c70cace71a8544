"""GPU cluster topology, ownership bookkeeping and placement quality.

The cluster is a four-level hierarchy: racks hold machines, machines hold
slots (e.g. a PCIe switch), and slots hold GPUs.  An allocation's slowdown
is determined only by the widest boundary its GPUs cross.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple


class GpuId(NamedTuple):
    rack: int
    machine: int
    slot: int
    gpu: int

    @property
    def slot_key(self) -> Tuple[int, int, int]:
        return (self.rack, self.machine, self.slot)

    @property
    def machine_key(self) -> Tuple[int, int]:
        return (self.rack, self.machine)


# An allocation vector is an immutable set of GPU ids.
GpuSet = frozenset

EMPTY: frozenset = frozenset()


class SpanLevel(enum.IntEnum):
    SLOT = 0
    MACHINE = 1
    RACK = 2
    CROSS_RACK = 3


@dataclass(frozen=True)
class ClusterSpec:
    """Nested GPU counts: ``racks[r][m][s]`` is the GPU count of a slot."""

    racks: Tuple[Tuple[Tuple[int, ...], ...], ...]

    def __post_init__(self):
        racks = tuple(tuple(tuple(int(c) for c in machine) for machine in rack)
                      for rack in self.racks)
        object.__setattr__(self, "racks", racks)
        for rack in racks:
            if not rack:
                raise ValueError("rack without machines")
            for machine in rack:
                if not machine:
                    raise ValueError("machine without slots")
                if any(c < 1 for c in machine):
                    raise ValueError("slot GPU count must be >= 1")

    @classmethod
    def from_nested(cls, racks: Sequence) -> "ClusterSpec":
        return cls(tuple(tuple(tuple(m) for m in r) for r in racks))

    @classmethod
    def uniform(cls, racks: int, machines_per_rack: int, gpus_per_machine: int,
                slots_per_machine: int = 1) -> "ClusterSpec":
        if gpus_per_machine % slots_per_machine:
            raise ValueError("gpus_per_machine must divide evenly into slots")
        per_slot = gpus_per_machine // slots_per_machine
        machine = (per_slot,) * slots_per_machine
        return cls(((machine,) * machines_per_rack,) * racks)

    @property
    def total_gpus(self) -> int:
        return sum(sum(sum(m) for m in r) for r in self.racks)

    def all_gpus(self) -> Tuple[GpuId, ...]:
        return tuple(
            GpuId(r, m, s, g)
            for r, rack in enumerate(self.racks)
            for m, machine in enumerate(rack)
            for s, count in enumerate(machine)
            for g in range(count)
        )

    def contains(self, gid: GpuId) -> bool:
        r, m, s, g = gid
        try:
            return (min(r, m, s, g) >= 0 and g < self.racks[r][m][s])
        except IndexError:
            return False

    def machine_sizes(self) -> Dict[Tuple[int, int], int]:
        return {(r, m): sum(machine)
                for r, rack in enumerate(self.racks)
                for m, machine in enumerate(rack)}


@dataclass(frozen=True)
class SlowdownProfile:
    """Iteration-time multiplier per span level; slot is pinned to 1."""

    machine: float = 1.0
    rack: float = 1.0
    cross_rack: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        chain = (1.0, self.machine, self.rack, self.cross_rack)
        if any(b < a for a, b in zip(chain, chain[1:])):
            raise ValueError(f"slowdown factors must be >= 1 and non-decreasing: {chain}")

    @property
    def slot(self) -> float:
        return 1.0

    def factor(self, level: SpanLevel) -> float:
        return (1.0, self.machine, self.rack, self.cross_rack)[int(level)]

    @classmethod
    def from_factors(cls, factors: Sequence[float], name: str = "custom") -> "SlowdownProfile":
        slot, machine, rack, cross = (float(x) for x in factors)
        if slot != 1.0:
            raise ValueError("slot factor must be exactly 1.0")
        return cls(machine, rack, cross, name)

    def factors(self) -> Tuple[float, float, float, float]:
        return (1.0, self.machine, self.rack, self.cross_rack)


COMPUTE = SlowdownProfile(1.0, 1.0, 1.0, name="compute")
NETWORK = SlowdownProfile(1.2, 2.0, 2.5, name="network")
DEFAULT_PROFILES: Dict[str, SlowdownProfile] = {"compute": COMPUTE, "network": NETWORK}


def span_level(gpus: Iterable[GpuId]) -> SpanLevel:
    gpus = list(gpus)
    if not gpus:
        raise ValueError("empty allocation")
    first = gpus[0]
    if all(g.slot_key == first.slot_key for g in gpus):
        return SpanLevel.SLOT
    if all(g.machine_key == first.machine_key for g in gpus):
        return SpanLevel.MACHINE
    if all(g.rack == first.rack for g in gpus):
        return SpanLevel.RACK
    return SpanLevel.CROSS_RACK


def slowdown(profile: SlowdownProfile, gpus: Iterable[GpuId]) -> float:
    return profile.factor(span_level(gpus))


def placement_score(profile: SlowdownProfile, gpus: Iterable[GpuId]) -> float:
    return 1.0 / slowdown(profile, gpus)


# ---------------------------------------------------------------------------
# Ownership
# ---------------------------------------------------------------------------


@dataclass
class OwnershipState:
    """Per-GPU owner and lease expiry.  Free GPUs have no entry."""

    cluster: ClusterSpec
    owners: Dict[GpuId, Tuple[str, float]] = field(default_factory=dict)

    def assign(self, gpus: Iterable[GpuId], app_id: str, expiry: float, now: float) -> None:
        if expiry < now:
            raise ValueError("lease expiry before assignment time")
        for g in gpus:
            if not self.cluster.contains(g):
                raise KeyError(f"{g} is not part of the cluster")
            held = self.owners.get(g)
            if held is not None and held[0] != app_id and held[1] > now:
                raise ValueError(f"{g} already leased to {held[0]} until {held[1]}")
            self.owners[g] = (app_id, expiry)

    def release(self, gpus: Iterable[GpuId]) -> None:
        for g in gpus:
            self.owners.pop(g, None)

    def owner(self, gid: GpuId, now: float) -> Optional[str]:
        held = self.owners.get(gid)
        if held is None or held[1] <= now:
            return None
        return held[0]

    def held_by(self, app_id: str, now: float) -> frozenset:
        return frozenset(g for g, (a, exp) in self.owners.items() if a == app_id and exp > now)


def free_gpus(state: OwnershipState, now: float) -> Tuple[GpuId, ...]:
    """GPUs with no owner or whose lease has expired (expiry is inclusive)."""
    return tuple(g for g in state.cluster.all_gpus() if state.owner(g, now) is None)


# ---------------------------------------------------------------------------
# Placement helpers
# ---------------------------------------------------------------------------


def _group(gpus: Iterable[GpuId], level: SpanLevel) -> Dict[tuple, List[GpuId]]:
    out: Dict[tuple, List[GpuId]] = defaultdict(list)
    for g in sorted(gpus):
        if level == SpanLevel.SLOT:
            out[g.slot_key].append(g)
        elif level == SpanLevel.MACHINE:
            out[g.machine_key].append(g)
        elif level == SpanLevel.RACK:
            out[(g.rack,)].append(g)
        else:
            out[()].append(g)
    return out


def _fill_dense(gpus: Sequence[GpuId], k: int) -> List[GpuId]:
    """First k GPUs taking fuller machines, then fuller slots, first."""
    by_machine = _group(gpus, SpanLevel.MACHINE)
    machines = sorted(by_machine.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    picked: List[GpuId] = []
    for _, members in machines:
        slots = sorted(_group(members, SpanLevel.SLOT).items(), key=lambda kv: (-len(kv[1]), kv[0]))
        for _, slot_members in slots:
            for g in slot_members:
                if len(picked) == k:
                    return picked
                picked.append(g)
    return picked


def consolidated_pick(pool: Iterable[GpuId], k: int,
                      anchor: Iterable[GpuId] = ()) -> frozenset:
    """Choose ``k`` GPUs from ``pool`` with the narrowest span.

    Best-fit: among containers at the narrowest feasible level, prefer the one
    that keeps the span together with ``anchor`` (GPUs already held) narrow,
    then the one with the fewest spare GPUs.
    """
    pool = sorted(set(pool))
    if k <= 0:
        return EMPTY
    if k > len(pool):
        raise ValueError(f"cannot pick {k} GPUs from a pool of {len(pool)}")
    anchor = tuple(anchor)
    best = None
    for level in (SpanLevel.SLOT, SpanLevel.MACHINE, SpanLevel.RACK, SpanLevel.CROSS_RACK):
        for key, members in _group(pool, level).items():
            if len(members) < k:
                continue
            pick = _fill_dense(members, k)
            joint = span_level(list(anchor) + pick) if anchor else level
            rank = (joint, level, len(members), key)
            if best is None or rank < best[0]:
                best = (rank, pick)
        if best is not None and not anchor:
            break
    return frozenset(best[1])


def spread_pick(pool: Iterable[GpuId], k: int) -> frozenset:
    """Choose ``k`` GPUs round-robin across machines (most spread)."""
    if k <= 0:
        return EMPTY
    by_machine = [list(v) for _, v in sorted(_group(pool, SpanLevel.MACHINE).items())]
    if k > sum(len(v) for v in by_machine):
        raise ValueError("pool too small")
    picked: List[GpuId] = []
    depth = 0
    while len(picked) < k:
        for members in by_machine:
            if depth < len(members) and len(picked) < k:
                picked.append(members[depth])
        depth += 1
    return frozenset(picked)


def best_score_pick(pool: Iterable[GpuId], k: int, profile: SlowdownProfile) -> frozenset:
    """Lexicographically smallest k-subset among those with maximal placement score."""
    pool = sorted(set(pool))
    if k <= 0:
        return EMPTY
    if k > len(pool):
        raise ValueError("pool too small")
    feasible = []
    for level in SpanLevel:
        groups = [m for m in _group(pool, level).values() if len(m) >= k]
        if groups:
            feasible.append((level, groups))
    best_factor = min(profile.factor(level) for level, _ in feasible)
    # Factors are non-decreasing, so the widest level at the best factor admits
    # the most sets; its first group in id order yields the lexicographic minimum.
    level, groups = max((lv, gs) for lv, gs in feasible if profile.factor(lv) == best_factor)
    first = min(groups, key=lambda m: m[0])
    return frozenset(first[:k])


def slot_signature(gpus: Iterable[GpuId]) -> Tuple[Tuple[Tuple[int, int, int], int], ...]:
    """Per-slot GPU counts, the placement-relevant content of a GPU set."""
    counts: Dict[Tuple[int, int, int], int] = defaultdict(int)
    for g in gpus:
        counts[g.slot_key] += 1
    return tuple(sorted(counts.items()))


# ---------------------------------------------------------------------------
# Count-level placement (fast path for estimates)
# ---------------------------------------------------------------------------


def slot_counts(gpus: Iterable[GpuId]) -> Dict[Tuple[int, int, int], int]:
    counts: Dict[Tuple[int, int, int], int] = defaultdict(int)
    for g in gpus:
        counts[g.slot_key] += 1
    return dict(counts)


def _container(slot_key: Tuple[int, int, int], level: SpanLevel) -> tuple:
    return (slot_key, slot_key[:2], slot_key[:1], ())[int(level)]


def consolidated_counts(pool: Dict[Tuple[int, int, int], int], k: int) -> Dict[Tuple[int, int, int], int]:
    """Per-slot counts that ``consolidated_pick`` (no anchor) would take from ``pool``."""
    if k <= 0:
        return {}
    if k > sum(pool.values()):
        raise ValueError(f"cannot pick {k} GPUs from a pool of {sum(pool.values())}")
    for level in SpanLevel:
        sizes: Dict[tuple, int] = defaultdict(int)
        for s, c in pool.items():
            if c:
                sizes[_container(s, level)] += c
        fits = [(n, key) for key, n in sizes.items() if n >= k]
        if fits:
            break
    _, key = min(fits)
    members = {s: c for s, c in pool.items() if c and _container(s, level) == key}
    machines: Dict[tuple, int] = defaultdict(int)
    for s, c in members.items():
        machines[s[:2]] += c
    taken: Dict[Tuple[int, int, int], int] = {}
    left = k
    for m in sorted(machines, key=lambda m: (-machines[m], m)):
        slots = sorted((s for s in members if s[:2] == m), key=lambda s: (-members[s], s))
        for s in slots:
            t = min(left, members[s])
            if t:
                taken[s] = t
                left -= t
            if not left:
                return taken
    return taken


def span_of_counts(counts: Dict[Tuple[int, int, int], int]) -> SpanLevel:
    keys = [s for s, c in counts.items() if c]
    if not keys:
        raise ValueError("empty allocation")
    for level in SpanLevel:
        if len({_container(s, level) for s in keys}) == 1:
            return level
    return SpanLevel.CROSS_RACK
