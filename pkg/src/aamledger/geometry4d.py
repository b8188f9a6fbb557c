"""4D operating volumes: time-stamped axis-aligned boxes in a local ENU frame.

Membership is closed (boundaries count as inside) while conflicts require a
positive 4D measure, so volumes that only touch at an instant or a face never
conflict.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .encoding import register
from .grid import snap

Vec3 = tuple[float, float, float]


@register
class PriorityClass(enum.Enum):
    PublicService = "public_service"
    Commercial = "commercial"
    LowPriorityNonExclusive = "low_priority_non_exclusive"


@register
@dataclass(frozen=True)
class Point4D:
    t: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("t", "x", "y", "z"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"Point4D.{name} must be finite")
            object.__setattr__(self, name, v)
        if self.t < 0:
            raise ValueError("Point4D.t must be >= 0")

    @property
    def xyz(self) -> Vec3:
        return (self.x, self.y, self.z)


def _vec3(v) -> Vec3:
    out = tuple(float(c) for c in v)
    if len(out) != 3 or not all(math.isfinite(c) for c in out):
        raise ValueError(f"expected a finite 3-vector, got {v!r}")
    return out


@register
@dataclass(frozen=True)
class VolumeSegment:
    t_start: float
    t_end: float
    box_min: Vec3
    box_max: Vec3

    def __post_init__(self):
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "box_min", _vec3(self.box_min))
        object.__setattr__(self, "box_max", _vec3(self.box_max))
        if not self.t_start < self.t_end:
            raise ValueError("segment needs t_start < t_end")
        if not all(lo < hi for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError("segment box_min must be strictly below box_max")

    def contains(self, p: Point4D) -> bool:
        if not self.t_start <= p.t <= self.t_end:
            return False
        return all(lo <= c <= hi for lo, c, hi in zip(self.box_min, p.xyz, self.box_max))


@register
@dataclass(frozen=True)
class OperatingVolumeContract:
    ovc_id: str
    operator_id: str
    segments: tuple[VolumeSegment, ...]
    exclusive: bool
    priority_class: PriorityClass
    capacity_limit: int
    deposit: int
    approval_hash: Optional[bytes] = None
    # exclusive OVCs nested inside a non-exclusive volume; entry is forbidden while active
    exclusive_refs: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "exclusive_refs", tuple(self.exclusive_refs))
        if not self.segments:
            raise ValueError("OVC needs at least one segment")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.t_start > b.t_start:
                raise ValueError("segments must be sorted by t_start")
            if b.t_start < a.t_end:
                raise ValueError("segment time intervals overlap")
        if self.exclusive == (self.priority_class is PriorityClass.LowPriorityNonExclusive):
            raise ValueError("exclusive is false exactly for LowPriorityNonExclusive")
        if not self.exclusive and self.capacity_limit < 1:
            raise ValueError("non-exclusive OVC needs capacity_limit >= 1")
        if isinstance(self.deposit, bool) or not isinstance(self.deposit, int) or self.deposit <= 0:
            raise ValueError("deposit must be a positive integer")
        if self.approval_hash is not None and len(self.approval_hash) != 32:
            raise ValueError("approval_hash must be 32 bytes")

    @property
    def t_start(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def segment_at(self, t: float) -> Optional[VolumeSegment]:
        for s in self.segments:
            if s.t_start <= t <= s.t_end:
                return s
        return None


@register
@dataclass(frozen=True)
class ConflictWitness:
    ovc_a: str
    ovc_b: str
    witness: Point4D


def contains(ovc: OperatingVolumeContract, p: Point4D) -> bool:
    return any(s.contains(p) for s in ovc.segments)


def _midpoint(lo: float, hi: float) -> float:
    m = (lo + hi) / 2
    g = snap(m)
    # grid-aligned witnesses keep conflict demonstrations encodable
    return g if lo <= g <= hi else m


def _segment_overlap(sa: VolumeSegment, sb: VolumeSegment):
    """Intersection bounds when the two segments share positive 4D measure."""
    t0, t1 = max(sa.t_start, sb.t_start), min(sa.t_end, sb.t_end)
    if not t0 < t1:
        return None
    lo = tuple(max(a, b) for a, b in zip(sa.box_min, sb.box_min))
    hi = tuple(min(a, b) for a, b in zip(sa.box_max, sb.box_max))
    if not all(l < h for l, h in zip(lo, hi)):
        return None
    return (t0, t1), lo, hi


def find_conflict(a: OperatingVolumeContract, b: OperatingVolumeContract) -> Optional[ConflictWitness]:
    """Witness of a positive-measure overlap between two exclusive OVCs.

    Non-exclusive OVCs never conflict; their overlap is a capacity question.
    The witness is the centroid of the first overlapping segment pair,
    scanning ``a``'s segments in order.
    """
    if a.ovc_id == b.ovc_id:
        raise ValueError("find_conflict needs two distinct OVCs")
    if not (a.exclusive and b.exclusive):
        return None
    if a.t_end <= b.t_start or b.t_end <= a.t_start:
        return None
    for sa in a.segments:
        for sb in b.segments:
            ov = _segment_overlap(sa, sb)
            if ov is None:
                continue
            (t0, t1), lo, hi = ov
            w = Point4D(_midpoint(t0, t1), *(_midpoint(l, h) for l, h in zip(lo, hi)))
            return ConflictWitness(a.ovc_id, b.ovc_id, w)
    return None


def _boxes_overlap(sa: VolumeSegment, sb: VolumeSegment) -> bool:
    return all(
        max(l1, l2) < min(h1, h2)
        for l1, l2, h1, h2 in zip(sa.box_min, sb.box_min, sa.box_max, sb.box_max)
    )


def capacity_profile(target: OperatingVolumeContract,
                     others: Iterable[OperatingVolumeContract]) -> tuple[int, Optional[float]]:
    """Peak simultaneous occupancy of ``target``'s volume and an instant attaining it.

    Every other non-exclusive OVC is present during the open time intervals in
    which one of its boxes overlaps one of target's boxes.  Occupancy is
    constant between consecutive interval endpoints, so evaluating it at each
    elementary interval's midpoint gives the exact maximum.
    """
    if target.exclusive:
        raise ValueError("capacity_count applies to non-exclusive OVCs only")
    presence: list[list[tuple[float, float]]] = []
    for other in others:
        if other.exclusive or other.ovc_id == target.ovc_id:
            continue
        spans = []
        for st in target.segments:
            for so in other.segments:
                t0, t1 = max(st.t_start, so.t_start), min(st.t_end, so.t_end)
                if t0 < t1 and _boxes_overlap(st, so):
                    spans.append((t0, t1))
        if spans:
            presence.append(spans)
    if not presence:
        return 1, None
    cuts = sorted({t for spans in presence for span in spans for t in span})
    best, best_t = 1, None
    for lo, hi in zip(cuts, cuts[1:]):
        mid = (lo + hi) / 2
        n = 1 + sum(any(t0 < mid < t1 for t0, t1 in spans) for spans in presence)
        if n > best:
            best, best_t = n, mid
    return best, best_t


def capacity_count(target: OperatingVolumeContract, others: Sequence[OperatingVolumeContract]) -> int:
    return capacity_profile(target, others)[0]


def buffer(ovc: OperatingVolumeContract, margin: float) -> OperatingVolumeContract:
    if margin < 0:
        raise ValueError("buffer margin must be non-negative")
    if margin == 0:
        return ovc
    segs = tuple(
        VolumeSegment(s.t_start, s.t_end,
                      tuple(c - margin for c in s.box_min),
                      tuple(c + margin for c in s.box_max))
        for s in ovc.segments
    )
    return replace(ovc, segments=segs)
