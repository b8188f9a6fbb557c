"""Time-of-arrival multilateration from synchronized passive stations.

Unknowns are the emitter position and emission time.  Internally the emission
time is carried as a range bias ``b = c * (t_emit - t_ref)`` with ``t_ref``
the earliest arrival, so every unknown is in meters and the normal equations
stay well scaled.  Residuals are reported in seconds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoding import F64, register
from .geometry4d import OperatingVolumeContract, Point4D, contains

C = 299_792_458.0


class MlatError(Exception):
    pass


class DegenerateGeometry(MlatError):
    pass


class AmbiguousFix(DegenerateGeometry):
    """Exactly determined system with two physically valid roots."""


class NoConvergence(MlatError):
    pass


class InsufficientStations(MlatError):
    pass


@register
class FixMode(enum.Enum):
    Full3D = "full3d"
    AltitudeAssisted = "altitude_assisted"


class AltitudeVerdict(enum.Enum):
    Consistent = "consistent"
    Spoofed = "spoofed"
    Undecidable = "undecidable"


@register
@dataclass(frozen=True)
class Broadcast:
    vehicle_id: str
    reported_altitude: Optional[float] = field(default=None, metadata=F64)
    ovc_id: Optional[str] = None
    approval_hash: Optional[bytes] = None


@register
@dataclass(frozen=True)
class Station:
    station_id: str
    position: tuple[float, float, float]


@register
@dataclass(frozen=True)
class StationObservation:
    station_id: str
    station_pos: tuple[float, float, float] = field(metadata=F64)
    arrival_time: float = field(metadata=F64)
    broadcast: Broadcast = Broadcast("")

    def __post_init__(self):
        object.__setattr__(self, "station_pos", tuple(float(c) for c in self.station_pos))
        if not math.isfinite(self.arrival_time):
            raise ValueError("arrival_time must be finite")


@register
@dataclass(frozen=True)
class PositionFix:
    vehicle_id: str
    emit_time: float = field(metadata=F64)
    position: tuple[float, float, float] = field(metadata=F64)
    residual_rms: float = field(metadata=F64)
    mode: FixMode = FixMode.Full3D
    station_count: int = 0

    def __post_init__(self):
        need = 4 if self.mode is FixMode.Full3D else 3
        if self.station_count < need:
            raise ValueError(f"{self.mode.name} fix needs >= {need} stations")

    def as_point(self) -> Point4D:
        return Point4D(max(self.emit_time, 0.0), *self.position)


def synthesize_observations(true_pos, emit_time: float, stations: Sequence[Station],
                            noise_sigma: float = 0.0, rng_seed: int = 0,
                            broadcast: Optional[Broadcast] = None) -> list[StationObservation]:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    positions = [tuple(s.position) for s in stations]
    if len(set(positions)) != len(positions):
        raise ValueError("station positions must be pairwise distinct")
    rng = np.random.default_rng(rng_seed)
    eps = rng.normal(0.0, noise_sigma, size=len(stations)) if noise_sigma > 0 else np.zeros(len(stations))
    p = np.asarray(true_pos, dtype=float)
    bc = broadcast or Broadcast("")
    return [
        StationObservation(s.station_id, s.position,
                           emit_time + float(np.linalg.norm(p - np.asarray(s.position))) / C + float(e), bc)
        for s, e in zip(stations, eps)
    ]


# -- objective ------------------------------------------------------------------

def toa_residuals(params: np.ndarray, stations: np.ndarray, arrivals: np.ndarray) -> np.ndarray:
    """Seconds: arrival_i - t_emit - |p - s_i| / c, with params = (x, y, z, t_emit)."""
    d = np.linalg.norm(params[:3] - stations, axis=1)
    return arrivals - params[3] - d / C


def toa_jacobian(params: np.ndarray, stations: np.ndarray) -> np.ndarray:
    diff = params[:3] - stations
    d = np.linalg.norm(diff, axis=1)
    J = np.empty((len(stations), 4))
    J[:, :3] = -diff / (d[:, None] * C)
    J[:, 3] = -1.0
    return J


def _unpack(obs: Sequence[StationObservation]):
    S = np.array([o.station_pos for o in obs], dtype=float)
    A = np.array([o.arrival_time for o in obs], dtype=float)
    if len({tuple(r) for r in S}) != len(S):
        raise DegenerateGeometry("duplicate station positions")
    return S, A


def _span_ratio(points: np.ndarray) -> float:
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0


@dataclass
class _Solution:
    x: np.ndarray        # free unknowns in meters
    cost: float
    jtj: np.ndarray


def _levenberg_marquardt(fun, x0: np.ndarray, step_tol: float, max_iter: int) -> _Solution:
    """Damped Gauss-Newton; damping grows on rejected steps and shrinks on accepted ones."""
    x = x0.astype(float).copy()
    r, J = fun(x)
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(max_iter):
        JtJ = J.T @ J
        g = J.T @ r
        D = np.diag(np.maximum(np.diag(JtJ), 1e-12))
        while True:
            try:
                step = np.linalg.solve(JtJ + lam * D, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                if lam > 1e16:
                    raise NoConvergence("singular damped system")
                continue
            r_new, J_new = fun(x + step)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                x, r, J, cost = x + step, r_new, J_new, cost_new
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
            if lam > 1e16:
                return _Solution(x, cost, J.T @ J)
        if np.linalg.norm(step) < step_tol:
            return _Solution(x, cost, J.T @ J)
    raise NoConvergence(f"no convergence in {max_iter} iterations")


def _check_conditioning(jtj: np.ndarray, limit: float) -> None:
    scale = np.sqrt(np.maximum(np.diag(jtj), 1e-300))
    normed = jtj / np.outer(scale, scale)
    if np.linalg.cond(normed) > limit:
        raise DegenerateGeometry("normal equations ill-conditioned at the solution")


def _linear_start(S: np.ndarray, R: np.ndarray, z: Optional[float]) -> Optional[np.ndarray]:
    """Differenced squared-range equations, linear in position and range bias.

    Needs one more station than unknowns; exact for noise-free arrivals.
    """
    dS = S[1:] - S[0]
    dR = R[1:] - R[0]
    rhs = R[1:] ** 2 - R[0] ** 2 - (S[1:] ** 2).sum(axis=1) + (S[0] ** 2).sum()
    if z is None:
        M = np.column_stack([-2 * dS, 2 * dR])
    else:
        M = np.column_stack([-2 * dS[:, :2], 2 * dR])
        rhs = rhs + 2 * z * dS[:, 2]
    if len(M) < M.shape[1]:
        return None
    sol, _, rank, _ = np.linalg.lstsq(M, rhs, rcond=None)
    if rank < M.shape[1] or not np.all(np.isfinite(sol)):
        return None
    return sol


def _bancroft(S: np.ndarray, R: np.ndarray, offset: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Closed-form roots (position..., bias) of ||p - s_i||^2 + offset_i = (R_i - bias)^2.

    ``S`` holds the free station coordinates; ``offset`` adds the squared
    pinned-axis distance in the altitude-assisted case.  With more stations
    than unknowns the linear part is solved in the least-squares sense.  Only
    roots with the emission preceding every arrival are returned.
    """
    off = np.zeros(len(S)) if offset is None else offset
    mink = np.append(np.ones(S.shape[1]), -1.0)
    B = np.column_stack([S, R])
    alpha = 0.5 * ((B * B * mink).sum(axis=1) + off)
    Binv = np.linalg.pinv(B)
    p = mink * (Binv @ np.ones(len(S)))
    q = mink * (Binv @ alpha)
    a = 0.5 * float((p * p * mink).sum())
    b = float((p * q * mink).sum()) - 1.0
    c = 0.5 * float((q * q * mink).sum())
    if abs(a) < 1e-300:
        lams = [-c / b] if b else []
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            disc = 0.0 if disc > -1e-9 * b * b else None
        lams = [] if disc is None else [(-b + sg * math.sqrt(disc)) / (2 * a) for sg in (1.0, -1.0)]
    roots = []
    for lam in lams:
        u = lam * p + q
        ranges = np.sqrt(((S - u[:-1]) ** 2).sum(axis=1) + off)
        if np.all(np.isfinite(u)) and np.all(R - u[-1] - ranges > -1e-6 * (1 + np.abs(R))):
            roots.append(u)
    return roots


def _refuse_ambiguous(roots: list[np.ndarray], S: np.ndarray, factor: float) -> None:
    """Two valid roots inside station coverage cannot be told apart."""
    centroid = S.mean(axis=0)
    reach = factor * float(np.max(np.linalg.norm(S - centroid, axis=1)))
    near = [u for u in roots if np.linalg.norm(u[:-1] - centroid) <= reach]
    if len(near) == 2 and np.linalg.norm(near[0][:-1] - near[1][:-1]) > 1e-3:
        raise AmbiguousFix("exactly determined arrivals fit two positions inside station coverage")


def _starts(S: np.ndarray, R: np.ndarray, z: Optional[float] = None) -> list[np.ndarray]:
    centroid = S.mean(axis=0)
    spread = float(np.max(np.linalg.norm(S - centroid, axis=1)))
    if z is None:
        # mirror basins of near-planar station sets
        starts = [np.append(c, -spread) for c in
                  (centroid, centroid + [0, 0, spread], centroid - [0, 0, spread])]
    else:
        starts = [np.append(centroid[:2], -spread)]
    lin = _linear_start(S, R, z)
    if lin is not None:
        starts.append(lin)
    return starts


def solve_full3d(obs: Sequence[StationObservation], *, step_tol: float = 1e-9, max_iter: int = 100,
                 planarity_tol: float = 1e-6, cond_limit: float = 1e12,
                 coverage_factor: float = 2.0) -> PositionFix:
    """Least-squares (x, y, z, t_emit) from >= 4 synchronized arrivals.

    Four arrivals determine the unknowns exactly and generally admit two
    roots.  When both lie within ``coverage_factor`` times the station
    spread of the station centroid the fix is refused with AmbiguousFix.
    """
    if len(obs) < 4:
        raise InsufficientStations(f"full 3D fix needs >= 4 stations, got {len(obs)}")
    S, A = _unpack(obs)
    if _span_ratio(S) < planarity_tol:
        raise DegenerateGeometry("stations are coplanar or collinear")
    t_ref = float(A.min())
    R = (A - t_ref) * C

    def fun(u):
        diff = u[:3] - S
        d = np.linalg.norm(diff, axis=1)
        J = np.empty((len(S), 4))
        J[:, :3] = -diff / d[:, None]
        J[:, 3] = -1.0
        return R - u[3] - d, J

    roots = _bancroft(S, R)
    if len(S) == 4:
        _refuse_ambiguous(roots, S, coverage_factor)
    best = _best_of(fun, _starts(S, R) + roots, step_tol, max_iter, S.mean(axis=0))
    _check_conditioning(best.jtj, cond_limit)
    u = best.x
    t_emit = t_ref + u[3] / C
    params = np.array([*u[:3], t_emit])
    rms = float(np.sqrt(np.mean(toa_residuals(params, S, A) ** 2)))
    return PositionFix(obs[0].broadcast.vehicle_id, t_emit, tuple(float(c) for c in u[:3]), rms,
                       FixMode.Full3D, len(obs))


def solve_altitude_assisted(obs: Sequence[StationObservation], reported_altitude: float, *,
                            step_tol: float = 1e-9, max_iter: int = 100,
                            planarity_tol: float = 1e-6, cond_limit: float = 1e12,
                            coverage_factor: float = 2.0) -> PositionFix:
    """Least-squares (x, y, t_emit) with z pinned to the reported altitude.

    Three arrivals are exactly determined and are refused with AmbiguousFix
    on the same terms as four arrivals in :func:`solve_full3d`.
    """
    if len(obs) < 3:
        raise InsufficientStations(f"altitude-assisted fix needs >= 3 stations, got {len(obs)}")
    if not math.isfinite(reported_altitude):
        raise ValueError("reported altitude must be finite")
    S, A = _unpack(obs)
    if _span_ratio(S[:, :2]) < planarity_tol:
        raise DegenerateGeometry("stations are collinear in the horizontal plane")
    t_ref = float(A.min())
    R = (A - t_ref) * C
    z = float(reported_altitude)

    def fun(u):
        diff = np.column_stack([u[0] - S[:, 0], u[1] - S[:, 1], z - S[:, 2]])
        d = np.linalg.norm(diff, axis=1)
        J = np.empty((len(S), 3))
        J[:, :2] = -diff[:, :2] / d[:, None]
        J[:, 2] = -1.0
        return R - u[2] - d, J

    roots = _bancroft(S[:, :2], R, (z - S[:, 2]) ** 2)
    if len(S) == 3:
        _refuse_ambiguous(roots, S[:, :2], coverage_factor)
    best = _best_of(fun, _starts(S, R, z) + roots, step_tol, max_iter, S[:, :2].mean(axis=0))
    _check_conditioning(best.jtj, cond_limit)
    u = best.x
    t_emit = t_ref + u[2] / C
    params = np.array([u[0], u[1], z, t_emit])
    rms = float(np.sqrt(np.mean(toa_residuals(params, S, A) ** 2)))
    return PositionFix(obs[0].broadcast.vehicle_id, t_emit, (float(u[0]), float(u[1]), z), rms,
                       FixMode.AltitudeAssisted, len(obs))


def _best_of(fun, starts, step_tol, max_iter, anchor: np.ndarray) -> _Solution:
    sols, err = [], None
    for x0 in starts:
        try:
            sol = _levenberg_marquardt(fun, x0, step_tol, max_iter)
        except NoConvergence as exc:
            err = exc
            continue
        sols.append(sol)
    if not sols:
        raise err
    # Four stations admit two exact roots; among equal-cost roots keep the
    # one nearest the stations, the far root is the mirror artefact.
    floor = min(s.cost for s in sols)
    tied = [s for s in sols if s.cost <= floor + 1e-6 * (1.0 + floor)]
    return min(tied, key=lambda s: float(np.linalg.norm(s.x[:anchor.size] - anchor)))


def verify_altitude(obs: Sequence[StationObservation], altitude_gate: float = 100.0,
                    residual_ratio_gate: float = 3.0) -> AltitudeVerdict:
    """Compare a free 3D fix against the fix pinned to the broadcast altitude."""
    if len(obs) < 4:
        return AltitudeVerdict.Undecidable
    reported = obs[0].broadcast.reported_altitude
    if reported is None:
        return AltitudeVerdict.Undecidable
    try:
        full = solve_full3d(obs)
        pinned = solve_altitude_assisted(obs, reported)
    except MlatError:
        return AltitudeVerdict.Undecidable
    off = abs(full.position[2] - reported) > altitude_gate
    inflated = pinned.residual_rms > residual_ratio_gate * full.residual_rms
    return AltitudeVerdict.Spoofed if off and inflated else AltitudeVerdict.Consistent


@dataclass(frozen=True)
class Attestation:
    fixes: tuple[PositionFix, ...]
    inside: tuple[bool, ...]

    @property
    def all_inside(self) -> bool:
        return all(self.inside)


def attest_track(fixes: Sequence[PositionFix], ovc: OperatingVolumeContract) -> Attestation:
    times = [f.emit_time for f in fixes]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("fixes must be time-ordered")
    return Attestation(tuple(fixes), tuple(contains(ovc, f.as_point()) for f in fixes))
