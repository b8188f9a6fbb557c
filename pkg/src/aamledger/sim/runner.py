"""Scenario runner: the discrete-event loop binding nodes, vehicles, stations, and settlement.

Settlement state (``OvcBook``/``ReportBook`` on one ``Ledger``) is a pure
function of the finalized chain: it changes only when an honest node first
finalizes a block, plus deadline timers that every node could compute from
finalized data.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..chain import Block, Thread, export_blocks, select_endorsers, sha256
from ..encoding import canonical_encode
from ..encounter import ManeuverLimits, VehicleState, resolve_step
from ..geometry4d import Point4D, contains, find_conflict
from ..grid import snap
from ..mlat import (
    AltitudeVerdict,
    Broadcast,
    MlatError,
    PositionFix,
    Station,
    solve_altitude_assisted,
    solve_full3d,
    synthesize_observations,
    verify_altitude,
)
from ..ovc_protocol import (
    ConflictDemoRecord,
    EndorsementRecord,
    OvcBook,
    OvcSubmissionRecord,
    ProtocolError,
    SubmissionStatus,
)
from ..reporting import (
    ChallengeRecord,
    ChallengeStatus,
    EvaluationRecord,
    FlightReport,
    Justification,
    JustificationReason,
    ReportBook,
    ReportError,
    ReportRecord,
    ReportStatus,
    VoteRecord,
    track_position,
)
from ..token_ledger import Ledger, LedgerError, Role, replay_journal
from .engine import EventKind, EventQueue, Message, Network
from .node import ValidatorNode
from .scenario import ScenarioConfig, ValidationError, VehicleSpec

STATION_POOL = "station_pool"
ENCOUNTER_HOLD = 1.0

EXIT_OK = 0
EXIT_SCENARIO = 1
EXIT_CODES = {
    "conflict_freedom": 11,
    "conservation": 12,
    "separation": 13,
    "chain_agreement": 14,
    "finality": 15,
    "encounter_liveness": 16,
}


class UnknownNode(ValidationError):
    pass


class TimeOutOfRange(ValidationError):
    pass


@dataclass
class VehicleRun:
    spec: VehicleSpec
    state: str = "scheduled"     # scheduled | flying | landed | grounded | idle
    pos: Optional[np.ndarray] = None
    flown: list[tuple[float, float, float, float]] = field(default_factory=list)
    deviations: list[list[float]] = field(default_factory=list)
    departed_at: Optional[float] = None
    landed_at: Optional[float] = None
    fixes: int = 0
    spoof_flags: int = 0


@dataclass
class RunReport:
    seed: int
    stopped_at: float
    ovc_outcomes: dict[str, str]
    encounters: list[dict]
    reports: dict[str, dict]
    challenges: dict[str, dict]
    balances: dict[str, int]
    chain_heads: dict[str, dict[str, list]]
    min_separation: Optional[float]
    availability: list[tuple[float, str, str]]
    vehicles: dict[str, dict]
    checks: dict[str, bool]
    events: list[dict]
    journal: list[str]
    chain_export: bytes
    counters: dict[str, int]

    @property
    def exit_code(self) -> int:
        for name, code in EXIT_CODES.items():
            if not self.checks.get(name, True):
                return code
        return EXIT_OK

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK

    def summary(self) -> dict:
        """Everything except the bulky logs, in a fixed key order."""
        return {
            "seed": self.seed,
            "stopped_at": self.stopped_at,
            "exit_code": self.exit_code,
            "checks": self.checks,
            "counters": self.counters,
            "min_separation": self.min_separation,
            "ovc_outcomes": self.ovc_outcomes,
            "reports": self.reports,
            "challenges": self.challenges,
            "encounters": self.encounters,
            "vehicles": self.vehicles,
            "balances": self.balances,
            "chain_heads": self.chain_heads,
            "availability": [list(a) for a in self.availability],
        }


def _jsonable(v: Any) -> Any:
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if hasattr(v, "name") and hasattr(v, "value"):
        return v.name
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.B = cfg.consensus.block_interval
        self.queue = EventQueue()
        self.network = Network(cfg.network, np.random.default_rng([cfg.seed, 1]))
        self.now = 0.0
        self.events: list[dict] = []
        self.beacon = sha256(b"aamledger/beacon", str(cfg.seed).encode())
        self.settle_delay = (cfg.consensus.confirmation_depth + 3) * self.B

        self.ledger = Ledger()
        led = self.ledger
        led.open_account(STATION_POOL, Role.StationPool)
        for n in cfg.nodes:
            led.open_account(n.id, Role.ValidatorNode)
            if n.balance:
                led.authority_mint(led.authority_id, n.id, n.balance)
        for o in cfg.operators:
            led.open_account(o.id, Role.Operator)
            if o.balance:
                led.authority_mint(led.authority_id, o.id, o.balance)
        self.ovcs = OvcBook(led, cfg.economics.min_deposit, cfg.economics.fee_bps)
        self.reports = ReportBook(led, self.ovcs, committee_min=cfg.consensus.committee_min,
                                  challenge_period=cfg.challenge_period,
                                  committee_window=cfg.committee_window,
                                  challenge_fee=cfg.economics.challenge_fee,
                                  eval_fee_bps=cfg.economics.eval_fee_bps,
                                  station_pool=STATION_POOL)

        self.nodes: dict[str, ValidatorNode] = {n.id: ValidatorNode(n, self) for n in cfg.nodes}
        self.stakes = {n.id: n.stake for n in cfg.nodes if n.stake > 0}
        self.staked = sorted(self.stakes)
        self.stations = [Station(s.id, s.position) for s in cfg.stations]
        self.vehicles = {v.id: VehicleRun(v) for v in cfg.vehicles}
        self.vehicle_of_ovc = {v.ovc.ovc_id: v.id for v in cfg.vehicles}
        self.ovc_of_vehicle = {v.id: v.ovc.ovc_id for v in cfg.vehicles}
        self.attest: dict[str, list[PositionFix]] = {}

        self.finalized_seen: set[bytes] = set()
        self.report_records: dict[str, ReportRecord] = {}
        self.votes: dict[str, list[VoteRecord]] = {}
        self.evals: dict[str, list[EvaluationRecord]] = {}
        self.playoff_deposits: dict[str, int] = {}
        self.awaiting_reports: set[str] = set()
        self.availability: list[tuple[float, str, str]] = []
        self.min_sep: Optional[float] = None
        self.active_encounters: dict[tuple, list[float]] = {}
        self.encounter_log: list[dict] = []
        self.encounters_seen: dict[tuple, int] = {}
        self._work = 0
        self._in_flight = 0     # messages queued for delivery (a resync may be under way)
        self._step_k: Optional[int] = None
        self._step_base = 0.0
        self._bcast_k = 0
        self._bcast_running = False
        self.limits = ManeuverLimits()
        self._schedule_initial()

    # -- logging and transport ----------------------------------------------
    def log(self, kind: str, **data) -> None:
        self.events.append({"seq": len(self.events), "t": self.now, "kind": kind,
                            "data": {k: _jsonable(data[k]) for k in sorted(data)}})

    def stamp(self) -> float:
        """Current time on the consensus grid, for record timestamps."""
        return snap(self.now)

    def send(self, src: str, dst: str, kind: str, body: Any) -> None:
        lat = self.network.sample(src, dst)
        if lat is None:
            return
        node = self.nodes[dst]
        self._in_flight += 1
        self.queue.push(self.now + lat, EventKind.MessageDelivery, dst, Message(src, kind, body, node.epoch))

    def broadcast(self, src: str, kind: str, body: Any) -> None:
        for nid in self.nodes:
            if nid != src:
                self.send(src, nid, kind, body)

    def node_timer(self, delay: float, node_id: str, payload: Any) -> None:
        self.queue.push(self.now + delay, EventKind.NodeTimer, node_id, payload)

    def _timer(self, at: float, target: str, payload: Any, *, work: bool = True,
               kind: EventKind = EventKind.NodeTimer) -> None:
        if work:
            self._work += 1
        self.queue.push(at, kind, target, (work,) + tuple(payload))

    # -- shared deterministic choices ---------------------------------------
    def record_beacon(self, sub: OvcSubmissionRecord) -> bytes:
        return sha256(self.beacon, canonical_encode(sub))

    def slot_leader(self, thread: Thread, slot: int) -> str:
        return select_endorsers(f"slot/{int(thread)}/{slot}", self.stakes, 1, self.beacon)[0]

    def node_rank(self, node_id: str, report_id: str) -> int:
        order = sorted(self.nodes, key=lambda n: sha256(report_id.encode(), n.encode()))
        return order.index(node_id)

    def evaluators(self, report_id: str) -> list[str]:
        if self.cfg.consensus.mode == "pow":
            return list(self.nodes)
        k = min(self.cfg.consensus.vote_committee_size, len(self.staked))
        return select_endorsers(f"{report_id}#eval", self.stakes, k, self.beacon)

    def voters(self, ch: ChallengeRecord) -> list[str]:
        if self.cfg.consensus.mode == "pow":
            return [n for n in self.nodes if n != ch.challenger]
        stakes = {n: s for n, s in self.stakes.items() if n != ch.challenger}
        k = min(self.cfg.consensus.vote_committee_size, len(stakes))
        return select_endorsers(ch.challenge_id, stakes, k, self.beacon) if k else []

    def is_evaluator(self, node_id: str, rec: ReportRecord) -> bool:
        return node_id in self.evaluators(rec.report.report_id)

    def is_voter(self, node_id: str, ch: ChallengeRecord) -> bool:
        return node_id in self.voters(ch)

    def report_deposit(self, report_id: str) -> Optional[int]:
        entry = self.reports.reports.get(report_id)
        if entry is None or entry.status is not ReportStatus.InPeriod:
            return None
        return self.reports.remaining(report_id)

    # -- scheduling ---------------------------------------------------------
    def _schedule_initial(self) -> None:
        self.queue.push(0.0, EventKind.NodeTimer, "@slot", 0)
        for v in self.cfg.vehicles:
            self._timer(v.submit_time, "@operator", ("submit", v.id))
            if v.fly:
                self._timer(v.actual[0][0], "@vehicles", ("depart", v.id), kind=EventKind.VehicleStep)
            else:
                self.vehicles[v.id].state = "idle"
        for f in self.cfg.faults:
            self.inject_fault(f.node, f.crash, f.recover)

    def inject_fault(self, node_id: str, at_time: float, recover_time: Optional[float] = None) -> None:
        if node_id not in self.nodes:
            raise UnknownNode(f"UnknownNode {node_id!r}")
        end = self.cfg.end_time
        if not 0 <= at_time <= end or (recover_time is not None and not at_time < recover_time <= end):
            raise TimeOutOfRange(f"TimeOutOfRange fault times for {node_id}")
        self._timer(at_time, node_id, ("crash",), kind=EventKind.Fault)
        if recover_time is not None:
            self._timer(recover_time, node_id, ("recover",), kind=EventKind.Fault)

    # -- main loop ----------------------------------------------------------
    def run(self) -> RunReport:
        end = self.cfg.end_time
        while self.queue:
            t = self.queue.peek_time()
            if t > end:
                break
            ev = self.queue.pop()
            self.now = ev.fire_time
            if ev.kind is EventKind.MessageDelivery:
                self._in_flight -= 1
                node = self.nodes[ev.target]
                msg: Message = ev.payload
                if node.alive and msg.epoch == node.epoch:
                    node.on_message(msg.src, msg.kind, msg.body)
            elif ev.kind is EventKind.NodeTimer and ev.target == "@slot":
                if self._slot(ev.payload):
                    break
            elif ev.kind is EventKind.NodeTimer and ev.target in self.nodes:
                self.nodes[ev.target].on_timer(ev.payload)
            else:
                work, *payload = ev.payload
                if work:
                    self._work -= 1
                self._dispatch(ev.kind, ev.target, payload)
        return self._report()

    def _slot(self, k: int) -> bool:
        if self._quiescent():
            self.log("quiescent")
            return True
        for node in self.nodes.values():
            if node.alive:
                node.on_slot(k)
        self.queue.push(snap((k + 1) * self.B), EventKind.NodeTimer, "@slot", k + 1)
        return False

    def _quiescent(self) -> bool:
        if self._work or self._in_flight or self.awaiting_reports:
            return False
        if any(v.state == "flying" for v in self.vehicles.values()):
            return False
        if any(s.status is SubmissionStatus.Pending for s in self.ovcs.submissions.values()):
            return False
        for node in self.nodes.values():
            if node.honest and node.alive and any(node._needs_heartbeat(t) for t in Thread):
                return False
        return True

    def _dispatch(self, kind: EventKind, target: str, payload: list) -> None:
        if kind is EventKind.Fault:
            node = self.nodes[target]
            if payload[0] == "crash" and node.alive:
                node.crash()
                self.availability.append((self.now, target, "down"))
                self.log("node_crash", node=target)
            elif payload[0] == "recover" and not node.alive:
                node.recover()
                self.availability.append((self.now, target, "up"))
                self.log("node_recover", node=target)
            return
        if kind is EventKind.VehicleStep:
            if payload[0] == "depart":
                self._depart(payload[1])
            else:
                self._step()
            return
        if kind is EventKind.Broadcast:
            self._broadcasts()
            return
        action = payload[0]
        handler = {
            "submit": self._submit,
            "report": self._file_report,
            "expire": self._expire,
            "accept": self._accept,
            "settle": self._settle,
            "playoff": self._playoff,
            "evaluate": self._evaluate,
        }[action]
        handler(*payload[1:])

    # -- submissions --------------------------------------------------------
    def _submit(self, vid: str) -> None:
        spec = self.vehicles[vid].spec
        try:
            sub = self.ovcs.submit_ovc(spec.ovc, spec.deposit, self.now)
        except (ProtocolError, LedgerError) as exc:
            self.log("submission_rejected", ovc_id=spec.ovc.ovc_id, reason=type(exc).__name__)
            return
        self.log("ovc_submitted", ovc_id=spec.ovc.ovc_id, operator=spec.operator, escrow=sub.escrow,
                 exclusive=spec.ovc.exclusive)
        self.broadcast(spec.operator, "record", (Thread.UnverifiedOvc, sub.record()))
        self._timer(self.now + self.cfg.ovc_timeout, "@authority", ("expire", spec.ovc.ovc_id), work=False)

    def _expire(self, ovc_id: str) -> None:
        if self.ovcs.expire(ovc_id, self.now):
            self.log("ovc_expired", ovc_id=ovc_id)

    # -- finalized-chain oracle ---------------------------------------------
    def on_finalized(self, node: ValidatorNode, blocks: list[Block]) -> None:
        if not node.honest:
            return
        for b in blocks:
            if b.block_id in self.finalized_seen:
                continue
            self.finalized_seen.add(b.block_id)
            for rec in b.records():
                self._apply(b, rec)

    def _apply(self, block: Block, rec) -> None:
        try:
            if isinstance(rec, EndorsementRecord):
                if self.ovcs.apply_endorsement(rec.ovc_id, block.block_id, rec.endorsers, self.now):
                    self.log("ovc_endorsed", ovc_id=rec.ovc_id, block=block.short(),
                             endorsers=list(rec.endorsers))
            elif isinstance(rec, ConflictDemoRecord):
                if self.ovcs.apply_conflict_demo(rec, self.now):
                    self.log("ovc_demonstrated", ovc_id=rec.target, against=rec.against,
                             demonstrator=rec.demonstrator)
            elif isinstance(rec, ReportRecord):
                self._apply_report(rec)
            elif isinstance(rec, ChallengeRecord):
                ch = self.reports.open_challenge(rec.report_id, rec.challenger, rec.deposit, self.now,
                                                 challenge_id=rec.challenge_id)
                self.log("challenge_opened", challenge_id=ch.challenge_id, report_id=rec.report_id,
                         challenger=rec.challenger, deposit=rec.deposit)
                self._timer(ch.window_end + self.settle_delay, "@authority", ("settle", ch.challenge_id))
            elif isinstance(rec, VoteRecord):
                self.votes.setdefault(rec.challenge_id, []).append(rec)
            elif isinstance(rec, EvaluationRecord):
                self.evals.setdefault(rec.report_id, []).append(rec)
        except (ReportError, ProtocolError, LedgerError, KeyError) as exc:
            self.log("record_rejected", record=type(rec).__name__, reason=type(exc).__name__,
                     detail=str(exc))

    def _apply_report(self, rec: ReportRecord) -> None:
        rid = rec.report.report_id
        self.awaiting_reports.discard(rid)
        if rec.replaces:
            entry = self.reports.playoff_resubmit(rec.replaces, rec.report, self.now,
                                                  self.playoff_deposits[rid])
        else:
            entry = self.reports.submit_report(rec.report, self.now)
        self.report_records[rid] = rec
        self.log("report_submitted", report_id=rid, ovc_id=rec.report.ovc_id, playoff=bool(rec.replaces),
                 escrow=entry.escrow)
        self._timer(entry.period_end + self.settle_delay, "@authority", ("accept", rid))

    def _accept(self, rid: str) -> None:
        entry = self.reports.reports[rid]
        if self.reports.accept_unchallenged(rid, self.now):
            self.log("report_accepted", report_id=rid, challenged=False)
            self._timer(self.now + self.settle_delay, "@authority", ("evaluate", rid))

    def _settle(self, cid: str) -> None:
        ch = self.reports.challenges[cid]
        allowed = None
        if self.cfg.consensus.mode == "pos":
            rec = ChallengeRecord(cid, ch.report_id, ch.challenger, 0, ch.opened_at)
            allowed = set(self.voters(rec))
        votes = [(v.voter, v.verdict) for v in self.votes.get(cid, [])
                 if v.created_at <= ch.window_end and (allowed is None or v.voter in allowed)]
        status = self.reports.settle_challenge(cid, votes, self.now)
        self.log("challenge_settled", challenge_id=cid, status=status.name,
                 payouts=dict(sorted(ch.payouts.items())), votes=[[a, b.name] for a, b in ch.votes])
        entry = self.reports.reports[ch.report_id]
        if entry.status is ReportStatus.Accepted:
            self._timer(self.now + self.settle_delay, "@authority", ("evaluate", ch.report_id))
        elif entry.status is ReportStatus.Refused:
            vid = self.vehicle_of_ovc[entry.report.ovc_id]
            if self.vehicles[vid].spec.playoff and entry.report.ovc_id not in self.reports.playoff_used:
                deposit = self.ledger.escrows[ch.challenge_escrow].amount
                self._timer(self.now + self.B, "@operator", ("playoff", ch.report_id, deposit))

    def _evaluate(self, rid: str) -> None:
        entry = self.reports.reports[rid]
        if entry.status is not ReportStatus.Accepted:
            return
        allowed = set(self.evaluators(rid))
        seen: dict[str, int] = {}
        for e in self.evals.get(rid, []):
            if e.evaluator in allowed and e.evaluator not in seen:
                seen[e.evaluator] = e.measure_bp
        if seen:
            ev = self.reports.evaluate_and_rebate(rid, sorted(seen.items()))
            measure = ev.prevalent
        else:
            self.reports.lapse_evaluation(rid)
            measure = 0
        self.log("report_settled", report_id=rid, measure_bp=measure, rebate=entry.rebate,
                 evaluators=sorted(seen))

    # -- operators ----------------------------------------------------------
    def _file_report(self, vid: str) -> None:
        run = self.vehicles[vid]
        spec = run.spec
        sub = self.ovcs.submissions.get(spec.ovc.ovc_id)
        if sub is None or spec.report == "none":
            return
        if spec.report == "fabricated":
            report = FlightReport(f"rep-{vid}", spec.ovc.ovc_id, self._planned_track(run), (), sub.escrow)
        else:
            track, justs = self._flown_track(run)
            report = FlightReport(f"rep-{vid}", spec.ovc.ovc_id, track, justs, sub.escrow)
        rec = ReportRecord(report, spec.operator, self.stamp())
        self.awaiting_reports.add(report.report_id)
        self.log("report_filed", report_id=report.report_id, vehicle=vid, mode=spec.report)
        self.broadcast(spec.operator, "record", (Thread.Report, rec))

    def _playoff(self, rid: str, deposit: int) -> None:
        orig = self.reports.reports[rid]
        vid = self.vehicle_of_ovc[orig.report.ovc_id]
        run = self.vehicles[vid]
        track, justs = self._flown_track(run)
        new_id = f"{rid}-playoff"
        report = FlightReport(new_id, orig.report.ovc_id, track, justs, "")
        self.playoff_deposits[new_id] = deposit
        self.awaiting_reports.add(new_id)
        self.log("playoff_filed", report_id=new_id, replaces=rid, deposit=deposit)
        self.broadcast(orig.issuer, "record", (Thread.Report, ReportRecord(report, orig.issuer, self.stamp(), rid)))

    def _sample_times(self, t0: float, t1: float) -> list[float]:
        step = self.cfg.reporting.report_interval
        n = int(math.floor((t1 - t0) / step + 1e-9))
        times = [snap(t0 + i * step) for i in range(n + 1)]
        if times[-1] < t1:
            times.append(snap(t1))
        return times

    def _flown_track(self, run: VehicleRun) -> tuple[tuple[Point4D, ...], tuple[Justification, ...]]:
        pts = [Point4D(t, x, y, z) for t, x, y, z in run.flown]
        times = self._sample_times(pts[0].t, pts[-1].t)
        track = tuple(Point4D(t, *(snap(c) for c in track_position(pts, t))) for t in times)
        justs = []
        lo, hi = track[0].t, track[-1].t
        for a, b in run.deviations:
            # the track resolves positions only at its samples; cover the leg the return ends on
            b = next((t for t in times if t >= b), hi)
            a, b = snap(max(a, lo)), snap(min(b, hi))
            if b > a and (not justs or a > justs[-1].t_end):
                justs.append(Justification(a, b, JustificationReason.PriorityGiveWay))
        return track, tuple(justs)

    def _planned_track(self, run: VehicleRun) -> tuple[Point4D, ...]:
        planned = [Point4D(*w) for w in run.spec.planned]
        t0 = run.flown[0][0] if run.flown else planned[0].t
        t1 = run.flown[-1][0] if run.flown else planned[-1].t
        return tuple(Point4D(t, *(snap(c) for c in track_position(planned, t)))
                     for t in self._sample_times(t0, t1))

    # -- vehicles -----------------------------------------------------------
    def _depart(self, vid: str) -> None:
        run = self.vehicles[vid]
        sub = self.ovcs.submissions.get(run.spec.ovc.ovc_id)
        if sub is None or sub.status is not SubmissionStatus.Endorsed:
            run.state = "grounded"
            self.log("vehicle_grounded", vehicle=vid,
                     ovc_status=sub.status.name if sub else "NotSubmitted")
            return
        t0, x, y, z = run.spec.actual[0]
        run.state = "flying"
        run.pos = np.array([x, y, z], dtype=float)
        run.departed_at = self.now
        run.flown.append((self.now, x, y, z))
        self.log("vehicle_departed", vehicle=vid, ovc_id=sub.ovc_id)
        if self._step_k is None:
            self._step_base, self._step_k = self.now, 0
            self._timer(snap(self.now + self.cfg.airspace.dt), "@vehicles", ("step",),
                        kind=EventKind.VehicleStep, work=False)
        if not self._bcast_running and self.stations:
            self._bcast_running = True
            self._timer(self.now, "@mlat", ("bcast",), kind=EventKind.Broadcast, work=False)

    def _intent(self, run: VehicleRun, t: float, dt: float) -> np.ndarray:
        wps = run.spec.actual
        pts = [Point4D(*w) for w in wps]
        goal = np.array(track_position(pts, min(t + dt, wps[-1][0])))
        v = (goal - run.pos) / dt
        speed = float(np.linalg.norm(v))
        vmax = self.cfg.airspace.vmax
        if speed > vmax:
            v *= vmax / speed
        return v

    def _step(self) -> None:
        dt = self.cfg.airspace.dt
        t_prev = self.now
        flying = [r for r in self.vehicles.values() if r.state == "flying"]
        if not flying:
            self._step_k = None
            return
        ap = self.cfg.airspace
        states = []
        for r in flying:
            sub = self.ovcs.submissions[r.spec.ovc.ovc_id]
            states.append(VehicleState.observe(r.spec.id, Point4D(t_prev, *r.pos), self._intent(r, t_prev, dt),
                                               sub.ovc))
        res = resolve_step(states, ap.sep_min, ap.horizon, t_prev, self.limits)
        self._track_encounters(res.encounters)
        self._step_k += 1
        t = snap(self._step_base + self._step_k * dt)
        for r in flying:
            r.pos = r.pos + np.array(res.velocities[r.spec.id]) * (t - t_prev)
            r.flown.append((t, *(float(c) for c in r.pos)))
            returning = bool(r.deviations) and r.deviations[-1][1] >= t_prev - 1e-9 and \
                not contains(self.ovcs.submissions[r.spec.ovc.ovc_id].ovc, Point4D(t, *r.pos))
            if r.spec.id in res.deviating or returning:
                # a give-way lasts until the vehicle is back inside its volume
                if r.deviations and r.deviations[-1][1] >= t_prev - ENCOUNTER_HOLD - 1e-9:
                    r.deviations[-1][1] = t
                else:
                    r.deviations.append([t_prev, t])
        self._audit_separation([r for r in flying])
        for r in flying:
            end_t = r.spec.actual[-1][0]
            final = np.array(r.spec.actual[-1][1:])
            if t >= end_t and (np.linalg.norm(r.pos - final) <= 1.0 or t >= end_t + 120.0):
                self._land(r, t)
        self._timer(t, "@vehicles", ("step",), kind=EventKind.VehicleStep, work=False)

    def _land(self, run: VehicleRun, t: float) -> None:
        run.state = "landed"
        run.landed_at = t
        self.log("vehicle_landed", vehicle=run.spec.id, deviation_intervals=len(run.deviations))
        ovc = self.ovcs.submissions[run.spec.ovc.ovc_id].ovc
        if run.spec.report != "none":
            self._timer(snap(max(t, ovc.t_end) + self.B), "@operator", ("report", run.spec.id))

    def _audit_separation(self, flying: list[VehicleRun]) -> None:
        if len(flying) < 2:
            return
        P = np.array([r.pos for r in flying])
        d = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
        iu = np.triu_indices(len(flying), k=1)
        m = float(d[iu].min())
        if self.min_sep is None or m < self.min_sep:
            self.min_sep = m
        if m < self.cfg.airspace.sep_min:
            i = int(np.argmin(d[iu]))
            a, b = flying[iu[0][i]].spec.id, flying[iu[1][i]].spec.id
            self.log("separation_violation", vehicles=[a, b], distance=round(m, 6))

    def _track_encounters(self, encounters) -> None:
        """Episode bookkeeping; an episode closes after ``ENCOUNTER_HOLD`` s undetected."""
        current = {tuple(sorted(e.ids)): e for e in encounters}
        for key in sorted(current):
            if key not in self.active_encounters:
                n = self.encounters_seen.get(key, 0)
                self.encounters_seen[key] = n + 1
                self.active_encounters[key] = [self.now, self.now]
                self.log("encounter_detected", vehicles=list(key),
                         predicted_miss=round(current[key].predicted_separation, 6), recurrence=n)
            self.active_encounters[key][1] = self.now
        for key in sorted(self.active_encounters):
            start, last = self.active_encounters[key]
            if key not in current and self.now - last > ENCOUNTER_HOLD + 1e-9:
                del self.active_encounters[key]
                self.encounter_log.append({"vehicles": list(key), "detected": start, "resolved": last,
                                           "recurrence": self.encounters_seen[key] - 1})
                self.log("encounter_resolved", vehicles=list(key), duration=round(last - start, 6))

    # -- multilateration ----------------------------------------------------
    def _broadcasts(self) -> None:
        flying = [r for r in self.vehicles.values() if r.state == "flying"]
        if not flying:
            self._bcast_running = False
            return
        k = self._bcast_k
        self._bcast_k += 1
        mp = self.cfg.mlat
        for r in flying:
            vid = r.spec.id
            sub = self.ovcs.submissions[r.spec.ovc.ovc_id]
            reported = float(r.pos[2]) + self._spoof_offset(vid)
            seed = int.from_bytes(sha256(b"mlat", str(self.cfg.seed).encode(), vid.encode(),
                                         str(k).encode())[:8], "big")
            obs = synthesize_observations(r.pos, self.now, self.stations, mp.noise_sigma, seed,
                                          Broadcast(vid, reported, sub.ovc_id, sub.ovc.approval_hash))
            try:
                if len(obs) >= 4:
                    fix = solve_full3d(obs)
                    verdict = verify_altitude(obs, mp.altitude_gate, mp.residual_ratio_gate)
                else:
                    fix = solve_altitude_assisted(obs, reported)
                    verdict = AltitudeVerdict.Undecidable
            except MlatError as exc:
                self.log("mlat_failed", vehicle=vid, reason=type(exc).__name__)
                continue
            if fix.emit_time < 0:
                continue
            self.attest.setdefault(vid, []).append(fix)
            r.fixes += 1
            if verdict is AltitudeVerdict.Spoofed:
                r.spoof_flags += 1
                self.log("spoof_detected", vehicle=vid, reported_altitude=round(reported, 6),
                         fix_altitude=round(fix.position[2], 3))
        self._timer(snap(self.now + mp.broadcast_interval), "@mlat", ("bcast",), kind=EventKind.Broadcast,
                    work=False)

    def _spoof_offset(self, vid: str) -> float:
        return sum(s.offset for s in self.cfg.spoofs if s.vehicle == vid and s.start <= self.now <= s.end)

    # -- end of run ---------------------------------------------------------
    def honest_nodes(self) -> list[ValidatorNode]:
        return [n for n in self.nodes.values() if n.honest]

    def global_checks(self) -> dict[str, bool]:
        endorsed = sorted((o for o in self.ovcs.endorsed() if o.exclusive), key=lambda o: o.ovc_id)
        conflict_free = all(find_conflict(a, b) is None for a, b in itertools.combinations(endorsed, 2))
        balances, escrows = replay_journal(self.ledger.journal_lines())
        nonzero = {a: b for a, b in self.ledger.balances().items() if b}
        replay_ok = {a: b for a, b in balances.items() if b} == nonzero and \
            sum(escrows.values()) == self.ledger.held_total()
        conserved = self.ledger.conserved() and replay_ok
        separation = self.min_sep is None or self.min_sep >= self.cfg.airspace.sep_min
        agreement = True
        honest = self.honest_nodes()
        for thread in Thread:
            chains = sorted((tuple(b.block_id for b in n.state.finalized_chain(thread)) for n in honest), key=len)
            for shorter, longer in zip(chains, chains[1:]):
                if longer[:len(shorter)] != shorter:
                    agreement = False
        finality = all(n.state.finality_violations == 0 for n in honest)
        ap = self.cfg.airspace
        spans = [e["resolved"] - e["detected"] for e in self.encounter_log]
        spans += [self.now - start for start, _ in self.active_encounters.values()]
        liveness = (all(d <= ap.resolve_time_bound + 1e-9 for d in spans)
                    and all(n - 1 <= ap.retrigger_bound for n in self.encounters_seen.values()))
        return {"conflict_freedom": conflict_free, "conservation": conserved, "separation": separation,
                "chain_agreement": agreement, "finality": finality, "encounter_liveness": liveness}

    def chain_export(self) -> bytes:
        blocks: dict[bytes, Block] = {}
        for n in self.honest_nodes():
            blocks.update(n.state.blocks)
        ordered = sorted(blocks.values(), key=lambda b: (int(b.thread), b.height, b.block_id))
        cc = self.cfg.consensus
        header = json.dumps({"mode": cc.mode, "difficulty_target": str(cc.difficulty_target),
                             "confirmation_depth": cc.confirmation_depth}, sort_keys=True).encode()
        return export_blocks(ordered, header)

    def _report(self) -> RunReport:
        checks = self.global_checks()
        for name, ok in checks.items():
            if not ok:
                self.log("global_check_failed", check=name)
        outcomes = {oid: s.status.name for oid, s in sorted(self.ovcs.submissions.items())}
        reports = {}
        for rid, e in sorted(self.reports.reports.items()):
            reports[rid] = {"ovc_id": e.report.ovc_id, "status": e.status.name, "playoff": e.playoff,
                            "challenge": e.challenge, "rebate": e.rebate,
                            "measure_bp": e.evaluation.prevalent if e.evaluation else None}
        challenges = {cid: {"report_id": c.report_id, "challenger": c.challenger, "status": c.status.name,
                            "payouts": dict(sorted(c.payouts.items()))}
                      for cid, c in sorted(self.reports.challenges.items())}
        heads = {}
        for nid, n in self.nodes.items():
            heads[nid] = {}
            for t in Thread:
                h = n.state.head(t)
                fin = n.state.finalized.get(t)
                heads[nid][t.name] = [h.height if h else 0, h.short() if h else "",
                                      fin.height if fin else 0]
        vehicles = {vid: {"state": r.state, "departed_at": r.departed_at, "landed_at": r.landed_at,
                          "fixes": r.fixes, "spoof_flags": r.spoof_flags,
                          "deviation_intervals": [list(d) for d in r.deviations]}
                    for vid, r in self.vehicles.items()}
        counters = {
            "events": len(self.events),
            "messages_sent": self.network.sent,
            "messages_dropped": self.network.dropped,
            "blocks_finalized": len(self.finalized_seen),
            "blocks_produced": sum(n.stats.produced for n in self.nodes.values()),
            "blocks_rejected": sum(n.stats.rejected for n in self.nodes.values()),
            "fraud_detected": sum(n.stats.fraud_detected for n in self.nodes.values()),
            "encounters": sum(self.encounters_seen.values()),
            "max_recurrence": max((v - 1 for v in self.encounters_seen.values()), default=0),
            "finality_violations": sum(n.state.finality_violations for n in self.nodes.values()),
        }
        return RunReport(
            seed=self.cfg.seed, stopped_at=self.now, ovc_outcomes=outcomes,
            encounters=list(self.encounter_log), reports=reports, challenges=challenges,
            balances=dict(sorted(self.ledger.balances().items())), chain_heads=heads,
            min_separation=self.min_sep, availability=list(self.availability), vehicles=vehicles,
            checks=checks, events=self.events, journal=self.ledger.journal_lines(),
            chain_export=self.chain_export(), counters=counters,
        )


def run(config: ScenarioConfig) -> RunReport:
    return Simulation(config).run()
