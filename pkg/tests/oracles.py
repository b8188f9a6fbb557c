"""Independent reference computations used by the tests.

None of these import the code under test beyond plain data types; they are
brute-force or textbook versions of the quantities the package computes.
"""

from __future__ import annotations

import itertools
import json
from collections import Counter
from graphlib import CycleError, TopologicalSorter

import numpy as np

C = 299_792_458.0


# -- geometry --------------------------------------------------------------

def _seg_arrays(ovc):
    lo = np.array([[s.t_start, *s.box_min] for s in ovc.segments])
    hi = np.array([[s.t_end, *s.box_max] for s in ovc.segments])
    return lo, hi


def inside(ovc, pts: np.ndarray) -> np.ndarray:
    """Closed membership of (t, x, y, z) rows, vectorised."""
    lo, hi = _seg_arrays(ovc)
    p = pts[:, None, :]
    return np.any(np.all((p >= lo) & (p <= hi), axis=2), axis=1)


def grid_overlap(a, b, step_t: float = 1.0, step_xyz: float = 1.0) -> bool:
    """Sample cell centres of a uniform 4D grid over the joint bounding box.

    A centre inside both volumes implies a positive-measure overlap only
    when volume boundaries sit on the grid, which the callers arrange.
    """
    la, ha = _seg_arrays(a)
    lb, hb = _seg_arrays(b)
    lo = np.maximum(la.min(axis=0), lb.min(axis=0))
    hi = np.minimum(ha.max(axis=0), hb.max(axis=0))
    if np.any(lo >= hi):
        return False
    steps = np.array([step_t, step_xyz, step_xyz, step_xyz])
    axes = [np.arange(l + s / 2, h, s) for l, h, s in zip(lo, hi, steps)]
    if any(len(ax) == 0 for ax in axes):
        return False
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 4)
    return bool(np.any(inside(a, pts) & inside(b, pts)))


def cell_overlap(a, b) -> bool:
    """Exact overlap test by sampling every elementary cell of the arrangement.

    The boundary coordinates of both volumes cut each axis into intervals;
    membership is constant on each product cell, so testing one interior
    point per cell decides whether the intersection has positive measure.
    """
    la, ha = _seg_arrays(a)
    lb, hb = _seg_arrays(b)
    axes = []
    for d in range(4):
        cuts = np.unique(np.concatenate([la[:, d], ha[:, d], lb[:, d], hb[:, d]]))
        axes.append((cuts[:-1] + cuts[1:]) / 2)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 4)
    return bool(np.any(inside(a, pts) & inside(b, pts)))


def sampled_capacity(target, others, dt: float = 0.1) -> int:
    """Max occupancy of ``target`` sampled every ``dt`` seconds.

    Another volume counts at time t when one of its boxes active at t shares
    interior with one of target's boxes active at t.
    """
    ts = np.arange(target.t_start + dt / 2, target.t_end, dt)
    best = 1
    for t in ts:
        n = 1
        for o in others:
            if o.ovc_id == target.ovc_id or o.exclusive:
                continue
            hit = False
            for st in target.segments:
                if not st.t_start < t < st.t_end:
                    continue
                for so in o.segments:
                    if not so.t_start < t < so.t_end:
                        continue
                    if all(max(a, b) < min(c, d) for a, b, c, d in
                           zip(st.box_min, so.box_min, st.box_max, so.box_max)):
                        hit = True
            n += hit
        best = max(best, n)
    return best


# -- compliance ------------------------------------------------------------

def dense_compliance(track, ovc, intervals, dt: float = 0.01) -> float:
    """Fraction of sampled flight time inside the OVC or an accepted interval."""
    t = np.array([p.t for p in track])
    xyz = np.array([p.xyz for p in track])
    if len(t) < 2 or t[-1] <= t[0]:
        return 1.0 if len(t) and inside(ovc, np.array([[t[0], *xyz[0]]]))[0] else 0.0
    ts = np.arange(t[0] + dt / 2, t[-1], dt)
    pos = np.column_stack([np.interp(ts, t, xyz[:, k]) for k in range(3)])
    ok = inside(ovc, np.column_stack([ts, pos]))
    for t0, t1 in intervals:
        ok |= (ts >= t0) & (ts <= t1)
    return float(ok.mean())


# -- voting ----------------------------------------------------------------

def prevalent(values) -> float:
    """Mode of 1e-4 quantised values, ties to the smaller value."""
    counts = Counter(round(v * 10_000) for v in values)
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top) / 10_000


# -- encounters ------------------------------------------------------------

def closest_approach(p1, v1, p2, v2, horizon: float = float("inf")) -> float:
    dp = np.asarray(p2, float) - np.asarray(p1, float)
    dv = np.asarray(v2, float) - np.asarray(v1, float)
    vv = float(dv @ dv)
    t = 0.0 if vv == 0 else min(max(-float(dp @ dv) / vv, 0.0), horizon)
    return float(np.linalg.norm(dp + t * dv))


def is_acyclic(edges) -> bool:
    ts = TopologicalSorter()
    for a, b in edges:
        ts.add(a, b)
    try:
        tuple(ts.static_order())
    except CycleError:
        return False
    return True


def min_pairwise(positions: dict) -> float:
    best = float("inf")
    for a, b in itertools.combinations(sorted(positions), 2):
        best = min(best, float(np.linalg.norm(np.subtract(positions[a], positions[b]))))
    return best


# -- multilateration -------------------------------------------------------

def toa_residuals(params, stations, arrivals) -> np.ndarray:
    x, y, z, t0 = params
    d = np.linalg.norm(np.asarray(stations) - np.array([x, y, z]), axis=1)
    return np.asarray(arrivals) - t0 - d / C


def fd_jacobian(fun, x0, h=None) -> np.ndarray:
    x0 = np.asarray(x0, float)
    f0 = np.asarray(fun(x0))
    jac = np.zeros((f0.size, x0.size))
    for k in range(x0.size):
        hk = h[k] if h is not None else 1e-6 * max(1.0, abs(x0[k]))
        e = np.zeros_like(x0)
        e[k] = hk
        jac[:, k] = (np.asarray(fun(x0 + e)) - np.asarray(fun(x0 - e))) / (2 * hk)
    return jac


# -- tokens ----------------------------------------------------------------

def fold_journal(lines) -> dict[str, int]:
    """Account balances from journal lines; escrows and the supply sink dropped."""
    bal: dict[str, int] = {}
    for line in lines:
        rec = json.loads(line)
        bal[rec["from"]] = bal.get(rec["from"], 0) - rec["amount"]
        bal[rec["to"]] = bal.get(rec["to"], 0) + rec["amount"]
    return {k: v for k, v in bal.items() if not k.startswith(("esc-", "@"))}


def gdop(stations, pos) -> float:
    """Geometric dilution of precision of a TOA fix (range units)."""
    diff = np.asarray(pos, float) - np.asarray(stations, float)
    u = diff / np.linalg.norm(diff, axis=1)[:, None]
    H = np.column_stack([u, np.ones(len(u))])
    try:
        tr = float(np.trace(np.linalg.inv(H.T @ H)))
    except np.linalg.LinAlgError:
        return float("inf")
    return float(np.sqrt(tr)) if tr >= 0 else float("inf")
