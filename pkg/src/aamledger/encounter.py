"""In-flight conflict classification and priority-ordered maneuvers.

Vehicles are ranked by a total order: tier first (declared class, or tier 1
when off-OVC), then the approval hash ascending.  Each vehicle only ever
reacts to vehicles ranked above it, so the avoidance relation is acyclic and
every encounter has exactly one vehicle that holds course.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .geometry4d import OperatingVolumeContract, Point4D, PriorityClass, contains

TIER_BY_CLASS = {
    PriorityClass.PublicService: 4,
    PriorityClass.Commercial: 3,
    PriorityClass.LowPriorityNonExclusive: 2,
}
NON_ADHERING_TIER = 1


class ConflictCategory(enum.Enum):
    MixedPriority = "mixed_priority"
    OutOfOvc = "out_of_ovc"
    NonExclusiveOverlap = "non_exclusive_overlap"


class Maneuver(enum.Enum):
    HoldCourse = "hold_course"
    Deviate = "deviate"


@dataclass(frozen=True)
class VehicleState:
    vehicle_id: str
    position: Point4D
    velocity: tuple[float, float, float]
    ovc_id: Optional[str] = None
    approval_hash: Optional[bytes] = None
    priority_class: Optional[PriorityClass] = None
    adhering: bool = False

    @classmethod
    def observe(cls, vehicle_id: str, position: Point4D, velocity,
                ovc: Optional[OperatingVolumeContract]) -> "VehicleState":
        """State with adherence derived from the vehicle's own OVC."""
        if ovc is None:
            return cls(vehicle_id, position, tuple(velocity))
        return cls(vehicle_id, position, tuple(velocity), ovc.ovc_id, ovc.approval_hash,
                   ovc.priority_class, contains(ovc, position))

    @property
    def pos(self) -> np.ndarray:
        return np.array(self.position.xyz)

    @property
    def vel(self) -> np.ndarray:
        return np.array(self.velocity, dtype=float)


@functools.total_ordering
@dataclass(frozen=True)
class EffectivePriority:
    """``a < b`` means ``a`` ranks below ``b``."""
    tier: int
    tiebreak_hash: int

    def _key(self):
        return (self.tier, -self.tiebreak_hash)

    def __lt__(self, other: "EffectivePriority") -> bool:
        return self._key() < other._key()

    def __eq__(self, other) -> bool:
        return isinstance(other, EffectivePriority) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


def effective_priority(v: VehicleState) -> EffectivePriority:
    if v.adhering and v.priority_class is not None:
        tier = TIER_BY_CLASS[v.priority_class]
    else:
        tier = NON_ADHERING_TIER
    if v.approval_hash is not None:
        h = int.from_bytes(v.approval_hash, "big")
    else:
        h = int.from_bytes(hashlib.sha256(v.vehicle_id.encode()).digest(), "big")
    return EffectivePriority(tier, h)


@dataclass(frozen=True)
class Encounter:
    vehicles: tuple[VehicleState, ...]
    detected_at: float
    predicted_separation: float

    def __post_init__(self):
        if len(self.vehicles) < 2:
            raise ValueError("an encounter needs at least two vehicles")
        if len({v.vehicle_id for v in self.vehicles}) != len(self.vehicles):
            raise ValueError("duplicate vehicle in encounter")

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(v.vehicle_id for v in self.vehicles)


def classify_conflict(e: Encounter) -> ConflictCategory:
    if any(not v.adhering for v in e.vehicles):
        return ConflictCategory.OutOfOvc
    tiers = {effective_priority(v).tier for v in e.vehicles}
    if len(tiers) > 1:
        return ConflictCategory.MixedPriority
    return ConflictCategory.NonExclusiveOverlap


def ranked(vehicles: Iterable[VehicleState]) -> list[VehicleState]:
    """Highest effective priority first."""
    return sorted(vehicles, key=effective_priority, reverse=True)


def assign_maneuvers(e: Encounter) -> dict[str, Maneuver]:
    order = ranked(e.vehicles)
    return {v.vehicle_id: Maneuver.HoldCourse if i == 0 else Maneuver.Deviate
            for i, v in enumerate(order)}


def must_avoid(e: Encounter) -> dict[str, set[str]]:
    """vehicle_id -> ids of the higher-ranked vehicles it has to avoid."""
    prio = {v.vehicle_id: effective_priority(v) for v in e.vehicles}
    return {a: {b for b in prio if prio[a] < prio[b]} for a in prio}


# -- kinematics -------------------------------------------------------------------

def closest_approach(dp: np.ndarray, dv: np.ndarray, horizon: float) -> tuple[float, float]:
    """Time in [0, horizon] and distance of closest approach for relative motion."""
    vv = float(dv @ dv)
    tau = 0.0 if vv == 0.0 else min(max(-float(dp @ dv) / vv, 0.0), horizon)
    return tau, float(np.linalg.norm(dp + dv * tau))


def pairwise_miss(pos: np.ndarray, vel: np.ndarray, horizon: float) -> np.ndarray:
    """Matrix of closest-approach distances over [0, horizon] for every pair."""
    dp = pos[:, None, :] - pos[None, :, :]
    dv = vel[:, None, :] - vel[None, :, :]
    vv = np.einsum("ijk,ijk->ij", dv, dv)
    pv = np.einsum("ijk,ijk->ij", dp, dv)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(vv > 0, -pv / vv, 0.0)
    tau = np.clip(tau, 0.0, horizon)
    return np.linalg.norm(dp + dv * tau[..., None], axis=-1)


def _clears(p: np.ndarray, v: np.ndarray, threats: Sequence[tuple[np.ndarray, np.ndarray]],
            sep_min: float, horizon: float) -> bool:
    return all(closest_approach(p - tp, v - tv, horizon)[1] > sep_min for tp, tv in threats)


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the horizontal part; positive angles turn right (clockwise from above)."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]])


@dataclass(frozen=True)
class ManeuverLimits:
    max_turn: float = math.pi
    scan_step: float = math.radians(1.0)
    speed_factors: tuple[float, ...] = (1.0, 0.6, 0.3)
    climb_rate: float = 5.0
    bisect_tol: float = 1e-9


def _misses(p: np.ndarray, cands: np.ndarray, threats: Sequence[tuple[np.ndarray, np.ndarray]],
            horizon: float) -> np.ndarray:
    """Closest approach of every candidate velocity (rows) to every threat (columns)."""
    tp = np.array([t[0] for t in threats])
    tv = np.array([t[1] for t in threats])
    dp = (p - tp)[None, :, :]
    dv = cands[:, None, :] - tv[None, :, :]
    vv = np.einsum("mtk,mtk->mt", dv, dv)
    pv = np.einsum("mtk,mtk->mt", np.broadcast_to(dp, dv.shape), dv)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(vv > 0, -pv / vv, 0.0)
    tau = np.clip(tau, 0.0, horizon)
    return np.linalg.norm(dp + dv * tau[..., None], axis=-1)


def deviation_maneuver(v: VehicleState, higher: Sequence[VehicleState], sep_min: float,
                       horizon: float = 60.0, limits: ManeuverLimits = ManeuverLimits()
                       ) -> tuple[float, float, float]:
    """Smallest heading change (right first) that clears every higher vehicle.

    Speed factors are tried in order, each with a full heading scan; the
    clearing angle is refined by bisection.  When nothing clears, the vehicle
    stops horizontally and climbs or descends away from the nearest threat.
    """
    p, vel = v.pos, v.vel
    threats = [(h.pos, h.vel) for h in higher]
    if not threats or _clears(p, vel, threats, sep_min, horizon):
        return tuple(float(c) for c in vel)

    n_steps = int(math.ceil(limits.max_turn / limits.scan_step - 1e-9))
    mags = np.minimum(np.arange(1, n_steps + 1) * limits.scan_step, limits.max_turn)
    signed = np.repeat(mags, 2) * np.tile([1.0, -1.0], n_steps)
    c, s_ = np.cos(signed), np.sin(signed)
    for factor in limits.speed_factors:
        base = vel * np.array([factor, factor, 1.0])
        if np.hypot(base[0], base[1]) == 0.0:
            continue
        cands = np.column_stack([c * base[0] + s_ * base[1], -s_ * base[0] + c * base[1],
                                 np.full_like(signed, base[2])])
        ok = np.all(_misses(p, cands, threats, horizon) > sep_min, axis=1)
        if not ok.any():
            continue
        i = int(np.argmax(ok))
        sign = 1.0 if signed[i] > 0 else -1.0
        hi = abs(float(signed[i]))
        lo = hi - limits.scan_step if i >= 2 else 0.0
        lo = max(lo, 0.0)
        while hi - lo > limits.bisect_tol:
            mid = (lo + hi) / 2
            if _clears(p, _rotate(base, sign * mid), threats, sep_min, horizon):
                hi = mid
            else:
                lo = mid
        return tuple(float(x) for x in _rotate(base, sign * hi))

    nearest = min(threats, key=lambda tv: float(np.linalg.norm(tv[0] - p)))
    dz = p[2] - nearest[0][2]
    climb = limits.climb_rate if dz >= 0 else -limits.climb_rate
    return (0.0, 0.0, float(climb))


# -- closed loop -----------------------------------------------------------------

def detect_encounters(states: Sequence[VehicleState], sep_min: float, horizon: float,
                      at: float) -> list[Encounter]:
    """Group vehicles whose predicted closest approach falls below ``sep_min``."""
    n = len(states)
    if n < 2:
        return []
    pos = np.array([s.position.xyz for s in states])
    vel = np.array([s.velocity for s in states], dtype=float)
    miss = pairwise_miss(pos, vel, horizon)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    close = np.argwhere(np.triu(miss < sep_min, k=1))
    for i, j in close:
        parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i, j in close:
        groups.setdefault(find(i), [])
    for i in range(n):
        if find(i) in groups:
            groups[find(i)].append(i)
    out = []
    for members in sorted(groups.values()):
        sub = miss[np.ix_(members, members)]
        sep = float(np.min(sub[np.triu_indices(len(members), k=1)]))
        out.append(Encounter(tuple(states[i] for i in members), at, sep))
    return out


@dataclass
class ResolutionStep:
    velocities: dict[str, tuple[float, float, float]]
    encounters: list[Encounter]
    deviating: set[str]


def resolve_step(states: Sequence[VehicleState], sep_min: float, horizon: float, at: float,
                 limits: ManeuverLimits = ManeuverLimits(),
                 resume_margin: float = 1.1) -> ResolutionStep:
    """One control step over vehicles whose ``velocity`` is their intended velocity.

    Vehicles are processed from the highest rank down.  A vehicle keeps its
    intent when that clears every higher vehicle's already fixed velocity by
    ``resume_margin * sep_min``; otherwise it deviates from those vehicles.
    """
    encounters = detect_encounters(states, sep_min, horizon, at)
    fixed: list[VehicleState] = []
    out: dict[str, tuple[float, float, float]] = {}
    deviating: set[str] = set()
    for v in ranked(states):
        threats = [(h.pos, h.vel) for h in fixed]
        if _clears(v.pos, v.vel, threats, sep_min * resume_margin, horizon):
            vel = v.velocity
        else:
            vel = deviation_maneuver(v, fixed, sep_min * resume_margin, horizon, limits)
            deviating.add(v.vehicle_id)
        out[v.vehicle_id] = tuple(float(c) for c in vel)
        fixed.append(VehicleState(v.vehicle_id, v.position, out[v.vehicle_id], v.ovc_id,
                                  v.approval_hash, v.priority_class, v.adhering))
    return ResolutionStep(out, encounters, deviating)


@dataclass
class GoalAgent:
    """Flies straight at ``goal`` at ``speed`` and lands within ``arrive_radius``."""
    vehicle_id: str
    start: tuple[float, float, float]
    goal: tuple[float, float, float]
    speed: float
    priority_class: Optional[PriorityClass] = PriorityClass.Commercial
    adhering: bool = True
    approval_hash: Optional[bytes] = None
    arrive_radius: float = 1.0

    def intent(self, t: float, position: np.ndarray) -> np.ndarray:
        d = np.asarray(self.goal) - position
        dist = float(np.linalg.norm(d))
        if dist <= self.arrive_radius:
            return np.zeros(3)
        return d / dist * min(self.speed, dist)


@dataclass
class ClosedLoopResult:
    cleared_at: Optional[float]
    min_separation: float
    recurrences: dict[frozenset, int]
    encounters_seen: int
    holders_ok: bool
    acyclic_ok: bool
    steps: int

    @property
    def max_recurrence(self) -> int:
        """Re-detections of one vehicle group after its first episode."""
        return max((n - 1 for n in self.recurrences.values()), default=0)


def run_closed_loop(agents: Sequence[GoalAgent], sep_min: float, horizon: float = 60.0,
                    dt: float = 0.1, max_time: float = 120.0,
                    limits: ManeuverLimits = ManeuverLimits(),
                    check: Optional[Callable[[Encounter], tuple[bool, bool]]] = None,
                    clear_hold: float = 1.0) -> ClosedLoopResult:
    """Step point-mass agents under :func:`resolve_step` until clear or ``max_time``.

    Cleared means no pair is below ``sep_min`` and no encounter is predicted
    on the agents' intents.  ``check`` inspects each detected encounter and
    returns (unique holder, acyclic) flags.  An encounter episode ends once
    its group has gone undetected for ``clear_hold`` seconds; detecting the
    same group again afterwards counts as a recurrence.
    """
    pos = {a.vehicle_id: np.array(a.start, dtype=float) for a in agents}
    landed: set[str] = set()
    last_seen: dict[frozenset, float] = {}
    recurrences: dict[frozenset, int] = {}
    min_sep = math.inf
    holders_ok = acyclic_ok = True
    seen = 0
    steps = int(round(max_time / dt))
    for k in range(steps + 1):
        t = k * dt
        states = []
        for a in agents:
            if a.vehicle_id in landed:
                continue
            intent = a.intent(t, pos[a.vehicle_id])
            if not intent.any():
                landed.add(a.vehicle_id)
                continue
            states.append(VehicleState(a.vehicle_id, Point4D(t, *pos[a.vehicle_id]), tuple(intent),
                                       None, a.approval_hash, a.priority_class, a.adhering))
        if len(states) >= 2:
            P = np.array([s.position.xyz for s in states])
            d = np.linalg.norm(P[:, None] - P[None], axis=-1)
            cur = float(np.min(d[np.triu_indices(len(states), 1)]))
            min_sep = min(min_sep, cur)
        else:
            cur = math.inf
        step = resolve_step(states, sep_min, horizon, t, limits)
        for e in step.encounters:
            prev = last_seen.get(e.ids)
            if prev is None or t - prev > clear_hold + 1e-9:
                recurrences[e.ids] = recurrences.get(e.ids, 0) + 1
            last_seen[e.ids] = t
        seen += len(step.encounters)
        if check is not None:
            for e in step.encounters:
                h, a = check(e)
                holders_ok &= h
                acyclic_ok &= a
        if cur >= sep_min and not step.encounters and _clear_to_goal(states, agents, sep_min):
            return ClosedLoopResult(t, min_sep, recurrences, seen, holders_ok, acyclic_ok, k)
        for vid, vel in step.velocities.items():
            pos[vid] = pos[vid] + np.asarray(vel) * dt
    return ClosedLoopResult(None, min_sep, recurrences, seen, holders_ok, acyclic_ok, steps)


def _clear_to_goal(states: Sequence[VehicleState], agents: Sequence[GoalAgent], sep_min: float) -> bool:
    """No conflict on straight intents all the way to the farthest arrival."""
    if len(states) < 2:
        return True
    by_id = {a.vehicle_id: a for a in agents}
    reach = max(float(np.linalg.norm(np.asarray(by_id[s.vehicle_id].goal) - s.pos)) / by_id[s.vehicle_id].speed
                for s in states)
    pos = np.array([s.position.xyz for s in states])
    vel = np.array([s.velocity for s in states], dtype=float)
    miss = pairwise_miss(pos, vel, reach)
    return not np.any(np.triu(miss < sep_min, k=1))
