"""Fixed 1e-6 grid shared by every consensus-relevant real value.

A value is on the grid when it is the double nearest to ``n / 1e6`` for some
integer ``n``.  Decimal literals with at most six fractional digits parse to
exactly these doubles, so scenario files written by hand stay on the grid.
"""

from __future__ import annotations

import math

SCALE = 1_000_000
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class GridViolation(ValueError):
    """A real value is not representable on the 1e-6 grid."""


def to_micro(value: float) -> int:
    """Return the integer micro-unit count for an on-grid value."""
    if not math.isfinite(value):
        raise GridViolation(f"non-finite value {value!r}")
    n = round(value * SCALE)
    if n / SCALE != value:
        raise GridViolation(f"{value!r} is not on the 1e-6 grid")
    if not INT64_MIN <= n <= INT64_MAX:
        raise GridViolation(f"{value!r} overflows 64-bit micro units")
    return n


def from_micro(n: int) -> float:
    return n / SCALE


def on_grid(value: float) -> bool:
    try:
        to_micro(value)
    except GridViolation:
        return False
    return True


def snap(value: float) -> float:
    """Nearest on-grid value."""
    return round(value * SCALE) / SCALE
