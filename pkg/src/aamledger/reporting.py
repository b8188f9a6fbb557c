"""Post-flight reports, challenges, committee votes, and compliance rebates.

A report rides on the OVC escrow left after the validation fee.  During the
challenge period any other account may dispute it by escrowing the same
amount; a committee of at least ``committee_min`` voters settles the dispute.
Accepted reports are scored by evaluators, and the operator gets back
``floor(m * base)`` of the escrow where ``m`` is the prevalent measure.

Measures are carried as integer basis points (1e-4 steps) everywhere.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .encoding import register
from .geometry4d import OperatingVolumeContract, Point4D, contains
from .ovc_protocol import OvcBook, SubmissionStatus
from .token_ledger import EscrowPurpose, Ledger, Reason

BP = 10_000


class ReportError(Exception):
    pass


class OvcNotEndorsed(ReportError):
    pass


class DuplicateReport(ReportError):
    pass


class MalformedTrack(ReportError):
    pass


class FlightNotOver(ReportError):
    pass


class ChallengePeriodOver(ReportError):
    pass


class WrongDepositAmount(ReportError):
    pass


class SelfChallenge(ReportError):
    pass


class ChallengeAlreadyOpen(ReportError):
    pass


class AlreadySettled(ReportError):
    pass


class CommitteeWindowOpen(ReportError):
    pass


class NoEvaluations(ReportError):
    pass


class NotAccepted(ReportError):
    pass


class PlayoffAlreadyUsed(ReportError):
    pass


class OriginalNotRefused(ReportError):
    pass


@register
class JustificationReason(enum.Enum):
    EmergencyTermination = "emergency_termination"
    PriorityGiveWay = "priority_give_way"
    BlunderAvoidance = "blunder_avoidance"
    Other = "other"


@register
class Verdict(enum.Enum):
    UpholdReport = "uphold_report"
    UpholdChallenge = "uphold_challenge"


class ChallengeStatus(enum.Enum):
    Open = "open"
    LapsedNoQuorum = "lapsed_no_quorum"
    ChallengerWins = "challenger_wins"
    ReportWins = "report_wins"


class ReportStatus(enum.Enum):
    InPeriod = "in_period"
    Challenged = "challenged"
    Accepted = "accepted"
    Refused = "refused"
    Settled = "settled"


@register
@dataclass(frozen=True)
class Justification:
    t_start: float
    t_end: float
    reason: JustificationReason
    note: str = ""

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise MalformedTrack("justification needs t_start < t_end")


@register
@dataclass(frozen=True)
class FlightReport:
    report_id: str
    ovc_id: str
    track: tuple[Point4D, ...]
    justifications: tuple[Justification, ...] = ()
    deposit_escrow: str = ""

    def __post_init__(self):
        object.__setattr__(self, "track", tuple(self.track))
        object.__setattr__(self, "justifications", tuple(self.justifications))
        if not self.track:
            raise MalformedTrack("track is empty")
        ts = [p.t for p in self.track]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise MalformedTrack("track times must strictly increase")
        js = sorted(self.justifications, key=lambda j: j.t_start)
        for j in js:
            if j.t_start < ts[0] or j.t_end > ts[-1]:
                raise MalformedTrack("justification outside the flown interval")
        for a, b in zip(js, js[1:]):
            if b.t_start < a.t_end:
                raise MalformedTrack("justification intervals overlap")

    @property
    def duration(self) -> float:
        return self.track[-1].t - self.track[0].t


# -- chain records ---------------------------------------------------------------

@register
@dataclass(frozen=True)
class ReportRecord:
    report: FlightReport
    issuer: str
    created_at: float
    replaces: str = ""      # refused report this playoff revises


@register
@dataclass(frozen=True)
class ChallengeRecord:
    challenge_id: str
    report_id: str
    challenger: str
    deposit: int
    created_at: float


@register
@dataclass(frozen=True)
class VoteRecord:
    challenge_id: str
    voter: str
    verdict: Verdict
    created_at: float = 0.0


@register
@dataclass(frozen=True)
class EvaluationRecord:
    report_id: str
    evaluator: str
    measure_bp: int
    accepted: tuple[int, ...] = ()   # indices of accepted justifications
    created_at: float = 0.0


# -- compliance measure ----------------------------------------------------------

def _leg_inside(p0: Point4D, p1: Point4D, ovc: OperatingVolumeContract) -> list[tuple[float, float]]:
    """Sub-intervals of [p0.t, p1.t] where the interpolated point is inside ``ovc``."""
    out = []
    dt = p1.t - p0.t
    a, b = p0.xyz, p1.xyz
    for s in ovc.segments:
        lo, hi = max(p0.t, s.t_start), min(p1.t, s.t_end)
        if lo > hi:
            continue
        for c0, c1, bmin, bmax in zip(a, b, s.box_min, s.box_max):
            v = (c1 - c0) / dt
            if v == 0.0:
                if not bmin <= c0 <= bmax:
                    lo, hi = 1.0, 0.0
                    break
                continue
            ta = p0.t + (bmin - c0) / v
            tb = p0.t + (bmax - c0) / v
            if ta > tb:
                ta, tb = tb, ta
            lo, hi = max(lo, ta), min(hi, tb)
            if lo > hi:
                break
        if lo < hi:
            out.append((lo, hi))
    return out


def track_position(track: Sequence[Point4D], t: float) -> tuple[float, float, float]:
    """Linear interpolation along ``track``, clamped to its ends."""
    if t <= track[0].t:
        return track[0].xyz
    if t >= track[-1].t:
        return track[-1].xyz
    lo, hi = 0, len(track) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if track[mid].t <= t:
            lo = mid
        else:
            hi = mid
    a, b = track[lo], track[hi]
    w = (t - a.t) / (b.t - a.t)
    return tuple(ca + w * (cb - ca) for ca, cb in zip(a.xyz, b.xyz))


def union_length(intervals: Iterable[tuple[float, float]]) -> float:
    total, cur_lo, cur_hi = 0.0, None, None
    for lo, hi in sorted(intervals):
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def quantize(measure: float) -> int:
    """Nearest basis point, clamped to [0, 10000]."""
    return min(max(int(round(measure * BP)), 0), BP)


def compliance_bp(report: FlightReport, ovc: OperatingVolumeContract,
                  accepted: Sequence[Justification] = ()) -> int:
    """Covered flight time over total, in basis points.

    Covered means inside the OVC (linear interpolation between fixes) or
    inside an accepted justification interval.  A single-point track scores
    by that point alone.
    """
    track = report.track
    if len(track) == 1:
        p = track[0]
        ok = contains(ovc, p) or any(j.t_start <= p.t <= j.t_end for j in accepted)
        return BP if ok else 0
    spans = [iv for p0, p1 in zip(track, track[1:]) for iv in _leg_inside(p0, p1, ovc)]
    t0, t1 = track[0].t, track[-1].t
    spans += [(max(j.t_start, t0), min(j.t_end, t1)) for j in accepted]
    return quantize(union_length(spans) / (t1 - t0))


def compliance_measure(report: FlightReport, ovc: OperatingVolumeContract,
                       accepted: Sequence[Justification] = ()) -> float:
    return compliance_bp(report, ovc, accepted) / BP


# -- justification corroboration -------------------------------------------------

def corroborates(j: Justification, own: Sequence[Point4D], own_tier: int,
                 others: Iterable[tuple[int, Sequence[Point4D]]], radius: float,
                 time_slack: float = 0.0) -> bool:
    """Whether attested tracks support ``j``.

    PriorityGiveWay needs a vehicle of equal or higher tier within ``radius``
    during the interval (equal tiers are ranked by the hash tiebreak, which
    evaluators cannot see from tracks alone); BlunderAvoidance needs any
    vehicle there.  Other reasons cannot
    be checked from tracks and are never corroborated.
    """
    if j.reason is JustificationReason.PriorityGiveWay:
        eligible = [trk for tier, trk in others if tier >= own_tier]
    elif j.reason is JustificationReason.BlunderAvoidance:
        eligible = [trk for _, trk in others]
    else:
        return False
    mine = [p for p in own if j.t_start <= p.t <= j.t_end]
    for trk in eligible:
        for p in mine:
            for q in trk:
                if abs(q.t - p.t) <= time_slack and \
                        sum((a - b) ** 2 for a, b in zip(p.xyz, q.xyz)) <= radius * radius:
                    return True
    return False


# -- prevalent value ---------------------------------------------------------------

def prevalent_value(measures_bp: Iterable[int]) -> int:
    """Most frequent value; ties go to the smaller one."""
    counts = Counter(measures_bp)
    if not counts:
        raise NoEvaluations("no measures")
    return min(counts, key=lambda m: (-counts[m], m))


@dataclass(frozen=True)
class ComplianceEvaluation:
    report_id: str
    measures: tuple[tuple[str, int], ...]
    prevalent: int

    @classmethod
    def of(cls, report_id: str, measures: Sequence[tuple[str, int]]) -> "ComplianceEvaluation":
        ms = tuple(sorted(measures))
        return cls(report_id, ms, prevalent_value(m for _, m in ms))


# -- settlement ----------------------------------------------------------------

@dataclass
class Challenge:
    challenge_id: str
    report_id: str
    challenger: str
    challenge_escrow: str
    opened_at: float
    window_end: float
    votes: list[tuple[str, Verdict]] = field(default_factory=list)
    status: ChallengeStatus = ChallengeStatus.Open
    payouts: dict[str, int] = field(default_factory=dict)


@dataclass
class ReportEntry:
    report: FlightReport
    issuer: str
    submitted_at: float
    period_end: float
    escrow: str
    playoff: bool = False
    status: ReportStatus = ReportStatus.InPeriod
    challenge: Optional[str] = None
    evaluation: Optional[ComplianceEvaluation] = None
    rebate: int = 0


class ReportBook:
    """Authoritative report/challenge state and its token settlements."""

    def __init__(self, ledger: Ledger, ovcs: OvcBook, *, committee_min: int = 3,
                 challenge_period: float = 50.0, committee_window: float = 50.0,
                 challenge_fee: int = 0, eval_fee_bps: int = 500,
                 station_pool: Optional[str] = None):
        if committee_min < 3:
            raise ValueError("committee_min must be >= 3")
        self.ledger = ledger
        self.ovcs = ovcs
        self.committee_min = committee_min
        self.challenge_period = challenge_period
        self.committee_window = committee_window
        self.challenge_fee = challenge_fee
        self.eval_fee_bps = eval_fee_bps
        self.station_pool = station_pool
        self.reports: dict[str, ReportEntry] = {}
        self.challenges: dict[str, Challenge] = {}
        self.by_ovc: dict[str, list[str]] = {}
        self.playoff_used: set[str] = set()

    # -- reports ---------------------------------------------------------
    def submit_report(self, report: FlightReport, now: float) -> ReportEntry:
        sub = self.ovcs.submissions.get(report.ovc_id)
        if sub is None or sub.status is not SubmissionStatus.Endorsed:
            raise OvcNotEndorsed(report.ovc_id)
        if now < sub.ovc.t_end:
            raise FlightNotOver(f"{report.ovc_id} active until {sub.ovc.t_end}")
        if report.report_id in self.reports or self.by_ovc.get(report.ovc_id):
            raise DuplicateReport(report.ovc_id)
        if report.deposit_escrow != sub.escrow:
            raise MalformedTrack("report must reference the OVC escrow")
        return self._enter(report, sub.ovc.operator_id, now, sub.escrow, False)

    def _enter(self, report: FlightReport, issuer: str, now: float, escrow: str,
               playoff: bool) -> ReportEntry:
        entry = ReportEntry(report, issuer, now, now + self.challenge_period, escrow, playoff)
        self.reports[report.report_id] = entry
        self.by_ovc.setdefault(report.ovc_id, []).append(report.report_id)
        return entry

    def remaining(self, report_id: str) -> int:
        return self.ledger.escrows[self.reports[report_id].escrow].remaining

    def accept_unchallenged(self, report_id: str, now: float) -> bool:
        entry = self.reports[report_id]
        if entry.status is not ReportStatus.InPeriod or now < entry.period_end:
            return False
        entry.status = ReportStatus.Accepted
        return True

    # -- challenges ------------------------------------------------------
    def open_challenge(self, report_id: str, challenger: str, deposit: int, now: float,
                       challenge_id: Optional[str] = None) -> Challenge:
        entry = self.reports[report_id]
        if entry.status is ReportStatus.Challenged:
            raise ChallengeAlreadyOpen(report_id)
        if entry.status is not ReportStatus.InPeriod or now > entry.period_end:
            raise ChallengePeriodOver(report_id)
        if challenger == entry.issuer:
            raise SelfChallenge(challenger)
        need = self.remaining(report_id)
        if deposit != need:
            raise WrongDepositAmount(f"deposit {deposit}, report escrow holds {need}")
        esc = self.ledger.open_escrow(challenger, deposit, EscrowPurpose.ChallengeDeposit)
        cid = challenge_id or f"ch-{len(self.challenges) + 1:04d}"
        ch = Challenge(cid, report_id, challenger, esc.escrow_id, now, now + self.committee_window)
        self.challenges[cid] = ch
        entry.status = ReportStatus.Challenged
        entry.challenge = cid
        return ch

    def settle_challenge(self, challenge_id: str, votes: Sequence[tuple[str, Verdict]],
                         now: Optional[float] = None) -> ChallengeStatus:
        ch = self.challenges[challenge_id]
        if ch.status is not ChallengeStatus.Open:
            raise AlreadySettled(challenge_id)
        if now is not None and now < ch.window_end:
            raise CommitteeWindowOpen(challenge_id)
        entry = self.reports[ch.report_id]
        # one vote per voter, first wins; parties to the dispute do not vote
        seen: dict[str, Verdict] = {}
        for voter, verdict in votes:
            if voter not in seen and voter not in (ch.challenger, entry.issuer):
                seen[voter] = verdict
        ch.votes = sorted(seen.items())
        pro = sorted(v for v, d in seen.items() if d is Verdict.UpholdChallenge)
        con = sorted(v for v, d in seen.items() if d is Verdict.UpholdReport)
        led = self.ledger
        before = {a: led.balance(a) for a in led.accounts}

        if len(seen) < self.committee_min:
            ch.status = ChallengeStatus.LapsedNoQuorum
            led.release_escrow(ch.challenge_escrow, ch.challenger, Reason.Refund)
            entry.status = ReportStatus.Accepted
        elif len(pro) > len(con):
            ch.status = ChallengeStatus.ChallengerWins
            led.release_escrow(ch.challenge_escrow, ch.challenger, Reason.Refund)
            self._take_fee(entry.escrow)
            pot = led.escrows[entry.escrow].remaining
            led.split_from_escrow(entry.escrow, pot, [ch.challenger] + pro, Reason.ChallengePayout)
            led.release_escrow(entry.escrow)
            entry.status = ReportStatus.Refused
        else:
            ch.status = ChallengeStatus.ReportWins
            self._take_fee(ch.challenge_escrow)
            pot = led.escrows[ch.challenge_escrow].remaining
            led.split_from_escrow(ch.challenge_escrow, pot, con, Reason.VoterReward)
            led.release_escrow(ch.challenge_escrow)
            entry.status = ReportStatus.Accepted
        ch.payouts = {a: led.balance(a) - before.get(a, 0) for a in led.accounts
                      if led.balance(a) != before.get(a, 0)}
        return ch.status

    def _take_fee(self, escrow_id: str) -> None:
        fee = min(self.challenge_fee, self.ledger.escrows[escrow_id].remaining)
        if fee > 0 and self.station_pool is not None:
            self.ledger.pay_from_escrow(escrow_id, [(self.station_pool, fee)], Reason.StationFee)

    # -- evaluation ------------------------------------------------------
    def evaluation_fee(self, report_id: str) -> int:
        return self.remaining(report_id) * self.eval_fee_bps // BP

    def evaluate_and_rebate(self, report_id: str,
                            evaluations: Sequence[tuple[str, int]]) -> ComplianceEvaluation:
        """Pay matching evaluators, rebate ``floor(m * base)``, residual to the authority.

        ``base`` is the escrow remaining after the nominal evaluator fee, so an
        integer-split remainder of that fee ends with the authority.
        """
        entry = self.reports[report_id]
        if entry.status is ReportStatus.Settled:
            raise AlreadySettled(report_id)
        if entry.status is not ReportStatus.Accepted:
            raise NotAccepted(report_id)
        if not evaluations:
            raise NoEvaluations(report_id)
        ev = ComplianceEvaluation.of(report_id, evaluations)
        self._rebate(entry, ev.prevalent, [a for a, m in ev.measures if m == ev.prevalent])
        entry.evaluation = ev
        return ev

    def lapse_evaluation(self, report_id: str) -> None:
        """No evaluations arrived in time: the measure counts as zero."""
        entry = self.reports[report_id]
        if entry.status is not ReportStatus.Accepted:
            raise NotAccepted(report_id)
        self._rebate(entry, 0, [])

    def _rebate(self, entry: ReportEntry, m_bp: int, matchers: Sequence[str]) -> None:
        led = self.ledger
        fee = self.evaluation_fee(entry.report.report_id) if matchers else 0
        base = led.escrows[entry.escrow].remaining - fee
        if fee:
            led.split_from_escrow(entry.escrow, fee, sorted(matchers), Reason.ValidationFee)
        rebate = m_bp * base // BP
        if rebate:
            led.pay_from_escrow(entry.escrow, [(entry.issuer, rebate)], Reason.Rebate)
        led.release_escrow(entry.escrow)
        entry.rebate = rebate
        entry.status = ReportStatus.Settled

    # -- playoff ---------------------------------------------------------
    def playoff_resubmit(self, original_report_id: str, revised: FlightReport, now: float,
                         deposit: int) -> ReportEntry:
        orig = self.reports[original_report_id]
        if orig.report.ovc_id in self.playoff_used:
            raise PlayoffAlreadyUsed(orig.report.ovc_id)
        if orig.status is not ReportStatus.Refused:
            raise OriginalNotRefused(original_report_id)
        if revised.ovc_id != orig.report.ovc_id or revised.report_id in self.reports:
            raise DuplicateReport(revised.report_id)
        esc = self.ledger.open_escrow(orig.issuer, deposit, EscrowPurpose.ReportDeposit)
        self.playoff_used.add(orig.report.ovc_id)
        revised = replace(revised, deposit_escrow=esc.escrow_id)
        return self._enter(revised, orig.issuer, now, esc.escrow_id, True)
