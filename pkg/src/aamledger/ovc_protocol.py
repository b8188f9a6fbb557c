"""Pre-flight OVC lifecycle: submission, validation, endorsement, conflict demonstration.

Node-side pieces are pure functions over chain records.  :class:`OvcBook` is
the settlement side: it applies finalized outcomes to the token ledger.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence, Union

from .chain import GENESIS, Block, Thread, encode_payload, mine_block
from .encoding import UnrepresentableValue, canonical_encode, register
from .geometry4d import (
    ConflictWitness,
    OperatingVolumeContract,
    capacity_profile,
    contains,
    find_conflict,
)
from .grid import snap
from .token_ledger import EscrowPurpose, Ledger, Reason


class ProtocolError(Exception):
    pass


class DepositBelowMinimum(ProtocolError):
    pass


class MalformedOvc(ProtocolError):
    pass


class DuplicateOvc(ProtocolError):
    pass


class BogusWitness(ProtocolError):
    pass


class NotDesignatedEndorser(ProtocolError):
    pass


class StaleSubmission(ProtocolError):
    pass


class NotTerminal(ProtocolError):
    pass


class SubmissionStatus(enum.Enum):
    Pending = "pending"
    Endorsed = "endorsed"
    DemonstratedConflict = "demonstrated_conflict"
    Expired = "expired"


TERMINAL = frozenset({SubmissionStatus.Endorsed, SubmissionStatus.DemonstratedConflict,
                      SubmissionStatus.Expired})


# -- chain records ------------------------------------------------------------

@register
@dataclass(frozen=True)
class OvcSubmissionRecord:
    ovc: OperatingVolumeContract
    escrow_id: str
    submitted_at: float


@register
@dataclass(frozen=True)
class EndorsementRecord:
    ovc_id: str
    round: int
    endorsers: tuple[str, ...]


@register
@dataclass(frozen=True)
class CapacityWitness:
    """Occupancy of ``ovc_id``'s volume exceeds its limit at instant ``t``."""
    ovc_id: str
    t: float
    count: int


@register
@dataclass(frozen=True)
class ConflictDemoRecord:
    target: str          # OVC to demote
    against: str         # established OVC (or the target itself for capacity)
    witness: Union[ConflictWitness, CapacityWitness]
    demonstrator: str


@dataclass(frozen=True)
class Endorsement:
    ovc_id: str
    validator: str


# -- validation -----------------------------------------------------------------

def validate_submission(node: str, ovc: OperatingVolumeContract,
                        validated_set: Iterable[OperatingVolumeContract]
                        ) -> Union[Endorsement, ConflictWitness, CapacityWitness]:
    """Check ``ovc`` against already endorsed OVCs.

    Exclusive OVCs return the conflict against the lowest opposing ovc_id;
    non-exclusive ones pass while peak occupancy stays within their limit.
    """
    others = [o for o in validated_set if o.ovc_id != ovc.ovc_id]
    if ovc.exclusive:
        for other in sorted(others, key=lambda o: o.ovc_id):
            if not other.exclusive or other.t_end <= ovc.t_start or ovc.t_end <= other.t_start:
                continue
            w = find_conflict(ovc, other)
            if w is not None:
                return w
        return Endorsement(ovc.ovc_id, node)
    count, t = capacity_profile(ovc, others)
    if count > ovc.capacity_limit:
        return CapacityWitness(ovc.ovc_id, snap(t), count)
    return Endorsement(ovc.ovc_id, node)


def verify_witness(witness: ConflictWitness, ovc_a: OperatingVolumeContract,
                   ovc_b: OperatingVolumeContract) -> None:
    if {witness.ovc_a, witness.ovc_b} != {ovc_a.ovc_id, ovc_b.ovc_id}:
        raise BogusWitness("witness names different OVCs")
    if not (ovc_a.exclusive and ovc_b.exclusive):
        raise BogusWitness("non-exclusive OVCs cannot conflict")
    if not (contains(ovc_a, witness.witness) and contains(ovc_b, witness.witness)):
        raise BogusWitness("witness point is not inside both volumes")
    if find_conflict(ovc_a, ovc_b) is None:
        raise BogusWitness("volumes touch without positive-measure overlap")


def verify_capacity_witness(witness: CapacityWitness, ovc: OperatingVolumeContract,
                            validated_set: Iterable[OperatingVolumeContract]) -> None:
    if witness.ovc_id != ovc.ovc_id or ovc.exclusive:
        raise BogusWitness("capacity witness must name a non-exclusive OVC")
    count, _ = capacity_profile(ovc, validated_set)
    if count <= ovc.capacity_limit:
        raise BogusWitness(f"occupancy {count} within limit {ovc.capacity_limit}")


def demo_for(node: str, ovc: OperatingVolumeContract,
             result: Union[ConflictWitness, CapacityWitness]) -> ConflictDemoRecord:
    if isinstance(result, CapacityWitness):
        return ConflictDemoRecord(ovc.ovc_id, ovc.ovc_id, result, node)
    other = result.ovc_b if result.ovc_a == ovc.ovc_id else result.ovc_a
    return ConflictDemoRecord(ovc.ovc_id, other, result, node)


# -- block production -----------------------------------------------------------

def post_endorsement(node: str, records: Sequence[EndorsementRecord], parent: Optional[Block],
                     difficulty_target: int, seed: int = 0,
                     committee_of: Optional[Callable[[EndorsementRecord], Sequence[str]]] = None,
                     already_endorsed: Iterable[str] = ()) -> tuple[Block, int]:
    """Build the ValidatedOvc block carrying ``records``.

    With ``committee_of`` (PoS) every listed endorser must belong to the
    record's designated committee.
    """
    done = set(already_endorsed)
    for rec in records:
        if rec.ovc_id in done:
            raise StaleSubmission(rec.ovc_id)
        if committee_of is not None:
            committee = set(committee_of(rec))
            if not set(rec.endorsers) <= committee:
                raise NotDesignatedEndorser(f"{rec.ovc_id}: {sorted(set(rec.endorsers) - committee)}")
        elif rec.endorsers != (node,):
            raise NotDesignatedEndorser("PoW endorsements name their producer")
    return mine_block(parent or GENESIS, Thread.ValidatedOvc, encode_payload(records), node,
                      difficulty_target, seed)


def post_conflict_demonstration(node: str, records: Sequence[ConflictDemoRecord],
                                ovcs: dict[str, OperatingVolumeContract], parent: Optional[Block],
                                difficulty_target: int, seed: int = 0,
                                validated_set: Sequence[OperatingVolumeContract] = ()
                                ) -> tuple[Block, int]:
    for rec in records:
        check_demo(rec, ovcs, validated_set)
    return mine_block(parent or GENESIS, Thread.ConflictDemo, encode_payload(records), node,
                      difficulty_target, seed)


def check_demo(rec: ConflictDemoRecord, ovcs: dict[str, OperatingVolumeContract],
               validated_set: Sequence[OperatingVolumeContract] = ()) -> None:
    """Local re-check every receiving node runs before accepting a demonstration."""
    target = ovcs.get(rec.target)
    if target is None:
        raise BogusWitness(f"unknown OVC {rec.target}")
    if isinstance(rec.witness, CapacityWitness):
        verify_capacity_witness(rec.witness, target, validated_set)
        return
    against = ovcs.get(rec.against)
    if against is None:
        raise BogusWitness(f"unknown OVC {rec.against}")
    verify_witness(rec.witness, target, against)


# -- settlement -----------------------------------------------------------------

@dataclass
class OvcSubmission:
    ovc: OperatingVolumeContract
    escrow: str
    submitted_at: float
    status: SubmissionStatus = SubmissionStatus.Pending
    resolved_at: Optional[float] = None
    fee_paid: int = 0
    payees: tuple[str, ...] = ()
    settled: bool = False

    @property
    def ovc_id(self) -> str:
        return self.ovc.ovc_id

    def record(self) -> OvcSubmissionRecord:
        return OvcSubmissionRecord(self.ovc, self.escrow, self.submitted_at)


def validation_fee(deposit: int, fee_bps: int) -> int:
    return deposit * fee_bps // 10_000


class OvcBook:
    """Authoritative submission states and their token settlements."""

    def __init__(self, ledger: Ledger, min_deposit: int = 1, fee_bps: int = 1000):
        if min_deposit < 1:
            raise ValueError("minimum deposit must be positive")
        self.ledger = ledger
        self.min_deposit = min_deposit
        self.fee_bps = fee_bps
        self.submissions: dict[str, OvcSubmission] = {}

    def submit_ovc(self, ovc: OperatingVolumeContract, deposit: int, now: float = 0.0) -> OvcSubmission:
        if deposit < self.min_deposit:
            raise DepositBelowMinimum(f"deposit {deposit} < minimum {self.min_deposit}")
        if ovc.deposit != deposit:
            raise MalformedOvc("deposit argument differs from the OVC's declared deposit")
        if ovc.approval_hash is not None:
            raise MalformedOvc("submitted OVC already carries an approval hash")
        try:
            canonical_encode(ovc)
        except UnrepresentableValue as exc:
            raise MalformedOvc(str(exc)) from None
        if ovc.ovc_id in self.submissions:
            raise DuplicateOvc(ovc.ovc_id)
        esc = self.ledger.open_escrow(ovc.operator_id, deposit, EscrowPurpose.OvcDeposit)
        sub = OvcSubmission(ovc, esc.escrow_id, now)
        self.submissions[ovc.ovc_id] = sub
        return sub

    def get(self, ovc_id: str) -> OvcSubmission:
        return self.submissions[ovc_id]

    def fee_for(self, sub: OvcSubmission) -> int:
        return validation_fee(sub.ovc.deposit, self.fee_bps)

    def apply_endorsement(self, ovc_id: str, block_id: bytes, endorsers: Sequence[str],
                          now: float) -> bool:
        """Finalized endorsement; False when the submission already ended."""
        sub = self.submissions.get(ovc_id)
        if sub is None or sub.status is not SubmissionStatus.Pending:
            return False
        sub.ovc = replace(sub.ovc, approval_hash=block_id)
        sub.status = SubmissionStatus.Endorsed
        sub.resolved_at = now
        sub.payees = tuple(endorsers)
        self.settle_submission(sub)
        return True

    def apply_conflict_demo(self, rec: ConflictDemoRecord, now: float) -> bool:
        sub = self.submissions.get(rec.target)
        if sub is None or sub.status is not SubmissionStatus.Pending:
            return False
        sub.status = SubmissionStatus.DemonstratedConflict
        sub.resolved_at = now
        sub.payees = (rec.demonstrator,)
        self.settle_submission(sub)
        return True

    def expire(self, ovc_id: str, now: float) -> bool:
        sub = self.submissions[ovc_id]
        if sub.status is not SubmissionStatus.Pending:
            return False
        sub.status = SubmissionStatus.Expired
        sub.resolved_at = now
        self.settle_submission(sub)
        return True

    def settle_submission(self, sub: OvcSubmission) -> None:
        if sub.status not in TERMINAL:
            raise NotTerminal(sub.ovc_id)
        if sub.settled:
            return
        sub.settled = True
        fee = self.fee_for(sub)
        operator = sub.ovc.operator_id
        if sub.status is SubmissionStatus.Endorsed:
            # escrow keeps the rest for flight-report settlement
            txs = self.ledger.split_from_escrow(sub.escrow, fee, sub.payees, Reason.ValidationFee)
            sub.fee_paid = sum(t.amount for t in txs)
        elif sub.status is SubmissionStatus.DemonstratedConflict:
            if fee:
                self.ledger.pay_from_escrow(sub.escrow, [(sub.payees[0], fee)], Reason.ValidationFee)
            sub.fee_paid = fee
            self.ledger.release_escrow(sub.escrow, operator, Reason.Refund)
        else:
            self.ledger.release_escrow(sub.escrow, operator, Reason.Refund)

    def endorsed(self) -> list[OperatingVolumeContract]:
        return [s.ovc for s in self.submissions.values() if s.status is SubmissionStatus.Endorsed]
