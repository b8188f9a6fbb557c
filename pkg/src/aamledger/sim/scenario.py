"""Scenario files: YAML with a fixed schema, checked on load.

Geometry and times must sit on the 1e-6 grid; network and noise parameters
are free reals.  Unknown keys are rejected so typos fail loudly.  Example::

    seed: 7
    end_time: 300
    consensus: {mode: pow, block_interval: 1.0, confirmation_depth: 6}
    nodes:
      - {id: n1, balance: 1000}
      - {id: n2, balance: 1000, behavior: [endorse_without_check]}
    operators: [{id: op1, balance: 1000}]
    stations:
      - {id: s1, position: [0, 0, 10]}
    vehicles:
      - id: v1
        operator: op1
        priority_class: commercial
        submit_time: 0
        deposit: 100
        planned: [[40, 0, 0, 100], [100, 3000, 0, 100]]

See the README for every key and its default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..geometry4d import OperatingVolumeContract, PriorityClass, VolumeSegment
from ..grid import GridViolation, snap, to_micro

BEHAVIORS = frozenset({"endorse_without_check", "false_vote"})
REPORT_MODES = frozenset({"truthful", "fabricated", "none"})
CLASS_NAMES = {
    "public_service": PriorityClass.PublicService,
    "commercial": PriorityClass.Commercial,
    "low_priority": PriorityClass.LowPriorityNonExclusive,
    "low_priority_non_exclusive": PriorityClass.LowPriorityNonExclusive,
}


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    pass


class ValidationError(ScenarioError):
    pass


# -- config types ------------------------------------------------------------------

@dataclass(frozen=True)
class ConsensusParams:
    mode: str = "pow"
    block_interval: float = 1.0
    difficulty_target: int = 2**252
    hash_time: Optional[float] = None   # seconds per attempt; default from block_interval
    confirmation_depth: int = 6
    committee_size: int = 3
    committee_min: int = 3
    vote_committee_size: int = 4
    committee_timeout: int = 10         # slots per PoS endorsement round
    batch_size: int = 16


@dataclass(frozen=True)
class EconomicsParams:
    min_deposit: int = 1
    fee_bps: int = 1000
    eval_fee_bps: int = 500
    challenge_fee: int = 2
    ovc_timeout: Optional[float] = None     # default 100 block intervals


@dataclass(frozen=True)
class ReportingParams:
    challenge_period: Optional[float] = None   # default 50 block intervals
    committee_window: Optional[float] = None   # default 50 block intervals
    report_interval: float = 1.0
    track_tolerance: float = 50.0
    min_flagged: int = 3
    corroboration_radius: Optional[float] = None


@dataclass(frozen=True)
class AirspaceParams:
    sep_min: float = 50.0
    horizon: float = 60.0
    vmax: float = 100.0
    dt: float = 0.1
    retrigger_bound: int = 3        # re-detections allowed per vehicle group after its first episode
    resolve_time_bound: float = 120.0   # longest an encounter episode may stay open


@dataclass(frozen=True)
class MlatParams:
    broadcast_interval: float = 1.0
    noise_sigma: float = 1e-8
    altitude_gate: float = 100.0
    residual_ratio_gate: float = 3.0


@dataclass(frozen=True)
class LinkParams:
    a: str
    b: str
    latency: float
    jitter: float
    drop_prob: float


@dataclass(frozen=True)
class NetworkParams:
    latency: float = 0.05
    jitter: float = 0.02
    drop_prob: float = 0.0
    links: tuple[LinkParams, ...] = ()


@dataclass(frozen=True)
class NodeSpec:
    id: str
    stake: int = 1
    balance: int = 1000
    behavior: frozenset[str] = frozenset()

    @property
    def honest(self) -> bool:
        return not self.behavior


@dataclass(frozen=True)
class StationSpec:
    id: str
    position: tuple[float, float, float]


@dataclass(frozen=True)
class OperatorSpec:
    id: str
    balance: int = 1000


Waypoint = tuple[float, float, float, float]


@dataclass(frozen=True)
class VehicleSpec:
    id: str
    operator: str
    priority_class: PriorityClass
    submit_time: float
    deposit: int
    planned: tuple[Waypoint, ...]
    actual: tuple[Waypoint, ...]
    ovc: OperatingVolumeContract
    report: str = "truthful"
    playoff: bool = True
    fly: bool = True


@dataclass(frozen=True)
class FaultSpec:
    node: str
    crash: float
    recover: Optional[float] = None


@dataclass(frozen=True)
class SpoofSpec:
    vehicle: str
    offset: float
    start: float
    end: float


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    end_time: float
    consensus: ConsensusParams
    economics: EconomicsParams
    reporting: ReportingParams
    airspace: AirspaceParams
    mlat: MlatParams
    network: NetworkParams
    nodes: tuple[NodeSpec, ...]
    stations: tuple[StationSpec, ...]
    operators: tuple[OperatorSpec, ...]
    vehicles: tuple[VehicleSpec, ...]
    faults: tuple[FaultSpec, ...] = ()
    spoofs: tuple[SpoofSpec, ...] = ()

    # resolved defaults that scale with the block interval
    @property
    def ovc_timeout(self) -> float:
        return self.economics.ovc_timeout or 100 * self.consensus.block_interval

    @property
    def challenge_period(self) -> float:
        return self.reporting.challenge_period or 50 * self.consensus.block_interval

    @property
    def committee_window(self) -> float:
        return self.reporting.committee_window or 50 * self.consensus.block_interval

    @property
    def corroboration_radius(self) -> float:
        return self.reporting.corroboration_radius or 3 * self.airspace.sep_min

    @property
    def hash_time(self) -> float:
        """Seconds per hash attempt: a lone miner expects a block in half an interval."""
        if self.consensus.hash_time is not None:
            return self.consensus.hash_time
        expected = 2**256 / self.consensus.difficulty_target
        return 0.5 * self.consensus.block_interval / expected

    def with_seed(self, seed: int) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, seed=seed)


# -- YAML with line numbers --------------------------------------------------------

class _Map(dict):
    line: int = 0
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader: _Loader, node: yaml.MappingNode) -> _Map:
    m = _Map()
    m.line = node.start_mark.line + 1
    m.key_lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in m:
            raise ParseError(f"line {k_node.start_mark.line + 1}: duplicate key {key!r}")
        m[key] = loader.construct_object(v_node, deep=True)
        m.key_lines[key] = k_node.start_mark.line + 1
    return m


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


class _Reader:
    """Typed field access on one mapping with path/line diagnostics."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ParseError(f"{path or 'scenario'}: expected a mapping")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def where(self, key: Optional[str] = None) -> str:
        name = f"{self.path}.{key}" if self.path and key else (key or self.path or "scenario")
        lines = getattr(self.data, "key_lines", {})
        line = lines.get(key) if key else getattr(self.data, "line", None)
        return f"line {line}: {name}" if line else name

    def has(self, key: str) -> bool:
        return key in self.data and self.data[key] is not None

    def raw(self, key: str, default: Any = ...) -> Any:
        self.used.add(key)
        if key not in self.data or self.data[key] is None:
            if default is ...:
                raise ValidationError(f"{self.where()}: missing required field {key!r}")
            return default
        return self.data[key]

    def num(self, key: str, default: Any = ..., *, grid: bool = False, positive: bool = False,
            non_negative: bool = False) -> Any:
        v = self.raw(key, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParseError(f"{self.where(key)}: expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ValidationError(f"{self.where(key)}: must be finite")
        if positive and v <= 0:
            raise ValidationError(f"{self.where(key)}: must be positive")
        if non_negative and v < 0:
            raise ValidationError(f"{self.where(key)}: must be non-negative")
        if grid:
            _on_grid(v, self.where(key))
        return v

    def int_(self, key: str, default: Any = ..., *, minimum: Optional[int] = None) -> Any:
        v = self.raw(key, default)
        if isinstance(v, str):
            v = _parse_int_expr(v, self.where(key))
        if isinstance(v, bool) or not isinstance(v, int):
            raise ParseError(f"{self.where(key)}: expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise ValidationError(f"{self.where(key)}: must be >= {minimum}")
        return v

    def str_(self, key: str, default: Any = ...) -> Any:
        v = self.raw(key, default)
        if not isinstance(v, str):
            raise ParseError(f"{self.where(key)}: expected a string, got {v!r}")
        return v

    def bool_(self, key: str, default: Any = ...) -> bool:
        v = self.raw(key, default)
        if not isinstance(v, bool):
            raise ParseError(f"{self.where(key)}: expected true/false, got {v!r}")
        return v

    def list_(self, key: str, default: Any = ...) -> list:
        v = self.raw(key, default)
        if not isinstance(v, list):
            raise ParseError(f"{self.where(key)}: expected a list")
        return v

    def sub(self, key: str) -> "_Reader":
        return _Reader(self.raw(key, _Map()), f"{self.path}.{key}" if self.path else key)

    def finish(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ValidationError(f"{self.where()}: unknown keys {extra}")


def _parse_int_expr(s: str, where: str) -> int:
    """Accept plain integers and powers written ``2**252`` or ``2^252``."""
    t = s.replace(" ", "").replace("^", "**")
    try:
        if "**" in t:
            base, exp = t.split("**")
            return int(base) ** int(exp)
        return int(t)
    except ValueError:
        raise ParseError(f"{where}: cannot read integer {s!r}") from None


def _on_grid(v: float, where: str) -> None:
    try:
        to_micro(v)
    except GridViolation as exc:
        raise GridViolation(f"{where}: {exc}") from None


def _vec(value: Any, n: int, where: str, grid: bool = True) -> tuple[float, ...]:
    if not isinstance(value, list) or len(value) != n:
        raise ParseError(f"{where}: expected a list of {n} numbers")
    out = []
    for c in value:
        if isinstance(c, bool) or not isinstance(c, (int, float)):
            raise ParseError(f"{where}: expected numbers, got {c!r}")
        c = float(c)
        if not math.isfinite(c):
            raise ValidationError(f"{where}: values must be finite")
        if grid:
            _on_grid(c, where)
        out.append(c)
    return tuple(out)


def _waypoints(value: Any, where: str) -> tuple[Waypoint, ...]:
    if not isinstance(value, list) or not value:
        raise ParseError(f"{where}: expected a non-empty list of [t, x, y, z]")
    pts = tuple(_vec(w, 4, where) for w in value)
    ts = [p[0] for p in pts]
    if ts[0] < 0 or any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValidationError(f"{where}: waypoint times must be >= 0 and strictly increasing")
    return pts


def ovc_from_path(ovc_id: str, operator: str, pclass: PriorityClass, path: tuple[Waypoint, ...],
                  margin: float, deposit: int, capacity_limit: int = 1) -> OperatingVolumeContract:
    """One box per leg: the leg's bounding box inflated by ``margin``."""
    segs = []
    legs = list(zip(path, path[1:])) or [(path[0], (path[0][0] + 1.0, *path[0][1:]))]
    for a, b in legs:
        lo = tuple(snap(min(a[i], b[i]) - margin) for i in (1, 2, 3))
        hi = tuple(snap(max(a[i], b[i]) + margin) for i in (1, 2, 3))
        segs.append(VolumeSegment(a[0], b[0], lo, hi))
    exclusive = pclass is not PriorityClass.LowPriorityNonExclusive
    return OperatingVolumeContract(ovc_id, operator, tuple(segs), exclusive, pclass,
                                   capacity_limit, deposit)


# -- top level ---------------------------------------------------------------------

def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    return parse_scenario(text, str(path))


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioConfig:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = f"line {mark.line + 1}: " if mark else ""
        raise ParseError(f"{source}: {line}{exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ParseError(f"{source}: {exc}") from None
    if data is None:
        raise ParseError(f"{source}: empty scenario")
    try:
        return _build(_Reader(data, ""))
    except ScenarioError as exc:
        raise type(exc)(f"{source}: {exc}") from None
    except GridViolation as exc:
        raise GridViolation(f"{source}: {exc}") from None


def _build(r: _Reader) -> ScenarioConfig:
    seed = r.int_("seed", 0, minimum=0)
    end_time = r.num("end_time", grid=True, positive=True)

    c = r.sub("consensus")
    mode = c.str_("mode", "pow").lower()
    if mode not in ("pow", "pos"):
        raise ValidationError(f"{c.where('mode')}: expected pow or pos")
    consensus = ConsensusParams(
        mode=mode,
        block_interval=c.num("block_interval", 1.0, grid=True, positive=True),
        difficulty_target=c.int_("difficulty_target", 2**252, minimum=1),
        hash_time=c.num("hash_time", None, positive=True),
        confirmation_depth=c.int_("confirmation_depth", 6, minimum=1),
        committee_size=c.int_("committee_size", 3, minimum=1),
        committee_min=c.int_("committee_min", 3),
        vote_committee_size=c.int_("vote_committee_size", 4, minimum=1),
        committee_timeout=c.int_("committee_timeout", 10, minimum=1),
        batch_size=c.int_("batch_size", 16, minimum=1),
    )
    if consensus.committee_min < 3:
        raise ValidationError(f"{c.where('committee_min')}: must be >= 3")
    if consensus.difficulty_target > 2**256:
        raise ValidationError(f"{c.where('difficulty_target')}: must be <= 2**256")
    c.finish()

    e = r.sub("economics")
    economics = EconomicsParams(
        min_deposit=e.int_("min_deposit", 1, minimum=1),
        fee_bps=e.int_("fee_bps", 1000, minimum=0),
        eval_fee_bps=e.int_("eval_fee_bps", 500, minimum=0),
        challenge_fee=e.int_("challenge_fee", 2, minimum=0),
        ovc_timeout=e.num("ovc_timeout", None, grid=True, positive=True),
    )
    if economics.fee_bps > 10_000 or economics.eval_fee_bps > 10_000:
        raise ValidationError(f"{e.where()}: fee fractions are basis points in [0, 10000]")
    e.finish()

    rp = r.sub("reporting")
    reporting = ReportingParams(
        challenge_period=rp.num("challenge_period", None, grid=True, positive=True),
        committee_window=rp.num("committee_window", None, grid=True, positive=True),
        report_interval=rp.num("report_interval", 1.0, grid=True, positive=True),
        track_tolerance=rp.num("track_tolerance", 50.0, positive=True),
        min_flagged=rp.int_("min_flagged", 3, minimum=1),
        corroboration_radius=rp.num("corroboration_radius", None, positive=True),
    )
    rp.finish()

    a = r.sub("airspace")
    airspace = AirspaceParams(
        sep_min=a.num("sep_min", 50.0, grid=True, positive=True),
        horizon=a.num("horizon", 60.0, grid=True, positive=True),
        vmax=a.num("vmax", 100.0, positive=True),
        dt=a.num("dt", 0.1, grid=True, positive=True),
        retrigger_bound=a.int_("retrigger_bound", 3, minimum=0),
        resolve_time_bound=a.num("resolve_time_bound", 120.0, grid=True, positive=True),
    )
    a.finish()

    m = r.sub("mlat")
    mlat = MlatParams(
        broadcast_interval=m.num("broadcast_interval", 1.0, grid=True, positive=True),
        noise_sigma=m.num("noise_sigma", 1e-8, non_negative=True),
        altitude_gate=m.num("altitude_gate", 100.0, positive=True),
        residual_ratio_gate=m.num("residual_ratio_gate", 3.0, positive=True),
    )
    m.finish()

    n = r.sub("network")
    links = []
    for i, item in enumerate(n.list_("links", [])):
        lr = _Reader(item, f"network.links[{i}]")
        links.append(LinkParams(lr.str_("a"), lr.str_("b"),
                                lr.num("latency", positive=True),
                                lr.num("jitter", 0.0, non_negative=True),
                                _prob(lr, "drop_prob")))
        lr.finish()
    network = NetworkParams(
        latency=n.num("latency", 0.05, positive=True),
        jitter=n.num("jitter", 0.02, non_negative=True),
        drop_prob=_prob(n, "drop_prob"),
        links=tuple(links),
    )
    n.finish()

    nodes = []
    for i, item in enumerate(r.list_("nodes")):
        nr = _Reader(item, f"nodes[{i}]")
        behavior = nr.list_("behavior", [])
        bad = [b for b in behavior if b not in BEHAVIORS]
        if bad:
            raise ValidationError(f"{nr.where('behavior')}: unknown behaviors {bad}")
        nodes.append(NodeSpec(nr.str_("id"), nr.int_("stake", 1, minimum=0),
                              nr.int_("balance", 1000, minimum=0), frozenset(behavior)))
        nr.finish()
    if not nodes:
        raise ValidationError("nodes: at least one validator node is required")

    stations = []
    for i, item in enumerate(r.list_("stations", [])):
        sr = _Reader(item, f"stations[{i}]")
        stations.append(StationSpec(sr.str_("id"), _vec(sr.raw("position"), 3, sr.where("position"))))
        sr.finish()
    if len({s.position for s in stations}) != len(stations):
        raise ValidationError("stations: positions must be pairwise distinct")

    operators = []
    for i, item in enumerate(r.list_("operators", [])):
        orr = _Reader(item, f"operators[{i}]")
        operators.append(OperatorSpec(orr.str_("id"), orr.int_("balance", 1000, minimum=0)))
        orr.finish()

    vehicles = [_vehicle(_Reader(item, f"vehicles[{i}]"))
                for i, item in enumerate(r.list_("vehicles", []))]

    faults = []
    for i, item in enumerate(r.list_("faults", [])):
        fr = _Reader(item, f"faults[{i}]")
        f = FaultSpec(fr.str_("node"), fr.num("crash", grid=True, non_negative=True),
                      fr.num("recover", None, grid=True, non_negative=True))
        if f.recover is not None and f.recover <= f.crash:
            raise ValidationError(f"{fr.where('recover')}: recovery must follow the crash")
        if f.crash > end_time or (f.recover is not None and f.recover > end_time):
            raise ValidationError(f"{fr.where()}: TimeOutOfRange (beyond end_time {end_time})")
        faults.append(f)
        fr.finish()

    spoofs = []
    for i, item in enumerate(r.list_("spoofs", [])):
        pr = _Reader(item, f"spoofs[{i}]")
        s = SpoofSpec(pr.str_("vehicle"), pr.num("offset", grid=True),
                      pr.num("start", grid=True, non_negative=True), pr.num("end", grid=True))
        if s.end <= s.start:
            raise ValidationError(f"{pr.where()}: spoof interval must have end > start")
        spoofs.append(s)
        pr.finish()
    r.finish()

    cfg = ScenarioConfig(seed, end_time, consensus, economics, reporting, airspace, mlat, network,
                         tuple(nodes), tuple(stations), tuple(operators), tuple(vehicles),
                         tuple(faults), tuple(spoofs))
    _check_references(cfg)
    return cfg


def _prob(r: _Reader, key: str) -> float:
    v = r.num(key, 0.0, non_negative=True)
    if v >= 1.0:
        raise ValidationError(f"{r.where(key)}: probability must be < 1")
    return v


def _vehicle(r: _Reader) -> VehicleSpec:
    vid = r.str_("id")
    cls_name = r.str_("priority_class", "commercial")
    if cls_name not in CLASS_NAMES:
        raise ValidationError(f"{r.where('priority_class')}: expected one of {sorted(CLASS_NAMES)}")
    pclass = CLASS_NAMES[cls_name]
    operator = r.str_("operator")
    deposit = r.int_("deposit", 100, minimum=1)
    capacity = r.int_("capacity_limit", 1, minimum=1)
    planned = _waypoints(r.raw("planned"), r.where("planned"))
    actual = _waypoints(r.raw("actual"), r.where("actual")) if r.has("actual") else planned
    if not r.has("actual"):
        r.used.add("actual")
    margin = r.num("buffer", 30.0, grid=True, non_negative=True)
    ovc_id = r.str_("ovc_id", f"ovc-{vid}")
    if r.has("ovc"):
        segs = []
        for j, s in enumerate(r.list_("ovc")):
            sr = _Reader(s, f"{r.path}.ovc[{j}]")
            t0, t1 = _vec(sr.raw("t"), 2, sr.where("t"))
            lo = _vec(sr.raw("min"), 3, sr.where("min"))
            hi = _vec(sr.raw("max"), 3, sr.where("max"))
            sr.finish()
            try:
                segs.append(VolumeSegment(t0, t1, lo, hi))
            except ValueError as exc:
                raise ValidationError(f"{sr.where()}: {exc}") from None
        try:
            ovc = OperatingVolumeContract(ovc_id, operator, tuple(segs),
                                          pclass is not PriorityClass.LowPriorityNonExclusive,
                                          pclass, capacity, deposit)
        except ValueError as exc:
            raise ValidationError(f"{r.where('ovc')}: {exc}") from None
    else:
        ovc = ovc_from_path(ovc_id, operator, pclass, planned, margin, deposit, capacity)
    report = r.str_("report", "truthful")
    if report not in REPORT_MODES:
        raise ValidationError(f"{r.where('report')}: expected one of {sorted(REPORT_MODES)}")
    spec = VehicleSpec(
        id=vid, operator=operator, priority_class=pclass,
        submit_time=r.num("submit_time", 0.0, grid=True, non_negative=True),
        deposit=deposit, planned=planned, actual=actual, ovc=ovc, report=report,
        playoff=r.bool_("playoff", True), fly=r.bool_("fly", True),
    )
    r.finish()
    return spec


def _check_references(cfg: ScenarioConfig) -> None:
    ids = [n.id for n in cfg.nodes] + [o.id for o in cfg.operators]
    reserved = {"authority", "station_pool"}
    if len(set(ids)) != len(ids):
        raise ValidationError("node and operator ids must be unique")
    for i in ids:
        if i in reserved or i.startswith(("esc-", "@")):
            raise ValidationError(f"id {i!r} is reserved")
    if len({s.id for s in cfg.stations}) != len(cfg.stations):
        raise ValidationError("station ids must be unique")
    node_ids = {n.id for n in cfg.nodes}
    operator_ids = {o.id for o in cfg.operators}
    vids = [v.id for v in cfg.vehicles]
    if len(set(vids)) != len(vids):
        raise ValidationError("vehicle ids must be unique")
    ovc_ids = [v.ovc.ovc_id for v in cfg.vehicles]
    if len(set(ovc_ids)) != len(ovc_ids):
        raise ValidationError("ovc ids must be unique")
    for v in cfg.vehicles:
        if v.operator not in operator_ids:
            raise ValidationError(f"vehicle {v.id}: unknown operator {v.operator!r}")
        if v.deposit < cfg.economics.min_deposit:
            raise ValidationError(f"vehicle {v.id}: deposit below minimum {cfg.economics.min_deposit}")
    for f in cfg.faults:
        if f.node not in node_ids:
            raise ValidationError(f"fault: UnknownNode {f.node!r}")
    for s in cfg.spoofs:
        if s.vehicle not in set(vids):
            raise ValidationError(f"spoof: unknown vehicle {s.vehicle!r}")
    for link in cfg.network.links:
        if link.a not in node_ids or link.b not in node_ids:
            raise ValidationError(f"network link {link.a}-{link.b}: unknown node")
    if sum(n.stake for n in cfg.nodes) <= 0:
        raise ValidationError("nodes: total stake must be positive")
