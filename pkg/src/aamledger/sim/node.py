"""Validator node actor: chain replica, block production, validation, and duties.

A node talks to the rest of the simulation only through the ``Simulation``
facade (clock, transport, timers, public settlement state).  Honest nodes
validate every block before storing it; a node flagged
``endorse_without_check`` stores whatever it receives and endorses every
pending submission without looking for conflicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional

from ..chain import (
    GENESIS,
    Block,
    ChainError,
    ChainState,
    InvalidBlock,
    Thread,
    encode_payload,
    mine_block,
    select_endorsers,
    sha256,
)
from ..encoding import DecodeError, canonical_encode
from ..encounter import NON_ADHERING_TIER, TIER_BY_CLASS
from ..geometry4d import ConflictWitness, OperatingVolumeContract, Point4D
from ..ovc_protocol import (
    BogusWitness,
    CapacityWitness,
    ConflictDemoRecord,
    Endorsement,
    EndorsementRecord,
    OvcSubmissionRecord,
    check_demo,
    demo_for,
    validate_submission,
)
from ..reporting import (
    ChallengeRecord,
    EvaluationRecord,
    FlightReport,
    ReportRecord,
    Verdict,
    VoteRecord,
    compliance_bp,
    corroborates,
    track_position,
)

if TYPE_CHECKING:
    from .runner import Simulation
    from .scenario import NodeSpec

THREAD_RECORDS = {
    Thread.UnverifiedOvc: (OvcSubmissionRecord,),
    Thread.ValidatedOvc: (EndorsementRecord,),
    Thread.ConflictDemo: (ConflictDemoRecord,),
    Thread.Report: (ReportRecord, ChallengeRecord, VoteRecord, EvaluationRecord),
}
POS_TARGET = 2**256


class MissingDependency(ChainError):
    """Block references a submission this node has not seen yet."""


class FraudulentEndorsement(InvalidBlock):
    def __init__(self, rec: EndorsementRecord, ovc: OperatingVolumeContract, witness):
        super().__init__(f"endorsement of {rec.ovc_id} fails validation")
        self.rec = rec
        self.ovc = ovc
        self.witness = witness


def record_key(rec) -> tuple:
    """Identity of a record for de-duplication along a chain."""
    if isinstance(rec, OvcSubmissionRecord):
        return ("sub", rec.ovc.ovc_id)
    if isinstance(rec, EndorsementRecord):
        return ("end", rec.ovc_id)
    if isinstance(rec, ConflictDemoRecord):
        return ("demo", rec.target)
    if isinstance(rec, ReportRecord):
        return ("rep", rec.report.report_id)
    if isinstance(rec, ChallengeRecord):
        return ("ch", rec.challenge_id)
    if isinstance(rec, VoteRecord):
        return ("vote", rec.challenge_id, rec.voter)
    if isinstance(rec, EvaluationRecord):
        return ("eval", rec.report_id, rec.evaluator)
    raise TypeError(type(rec).__name__)


@dataclass
class BlockMeta:
    keys: frozenset
    endorsed: dict[str, Optional[OperatingVolumeContract]]
    nonempty: bool


@dataclass
class NodeStats:
    produced: int = 0
    rejected: int = 0
    fraud_detected: int = 0
    deferred: int = 0


class ValidatorNode:
    def __init__(self, spec: "NodeSpec", sim: "Simulation"):
        self.spec = spec
        self.id = spec.id
        self.sim = sim
        cfg = sim.cfg.consensus
        self.pow = cfg.mode == "pow"
        self.validating = "endorse_without_check" not in spec.behavior
        self.false_vote = "false_vote" in spec.behavior
        self.state = ChainState(cfg.confirmation_depth, cfg.difficulty_target if self.pow else None)
        self.meta: dict[bytes, BlockMeta] = {}
        self.mempool: dict[Thread, dict[tuple, Any]] = {t: {} for t in Thread}
        self.known_subs: dict[str, OvcSubmissionRecord] = {}
        self.final_subs: dict[str, OvcSubmissionRecord] = {}
        self.invalid: set[bytes] = set()
        self.orphans: dict[bytes, list[Block]] = {}
        self.deferred: dict[bytes, Block] = {}
        self.my_demos: set[str] = set()
        self.votes: dict[tuple[str, int], set[str]] = {}
        self.voted: set[tuple[str, int]] = set()
        self.seen_reports: dict[str, ReportRecord] = {}
        self.seen_challenges: set[str] = set()
        self.alive = True
        self.epoch = 0
        self.stats = NodeStats()

    @property
    def honest(self) -> bool:
        return self.spec.honest

    # -- lifecycle -------------------------------------------------------
    def crash(self) -> None:
        self.alive = False
        self.epoch += 1

    def recover(self) -> None:
        self.alive = True
        self.epoch += 1
        self.sim.broadcast(self.id, "sync", None)

    # -- messages ----------------------------------------------------------
    def on_message(self, src: str, kind: str, body: Any) -> None:
        if kind == "block":
            self.receive_block(body, src)
        elif kind == "blocks":
            for b in body:
                self.receive_block(b, src)
        elif kind == "get_block":
            blk = self.state.blocks.get(body)
            if blk is not None:
                self.sim.send(self.id, src, "block", blk)
        elif kind == "sync":
            blocks = sorted(self.state.blocks.values(), key=lambda b: (b.height, int(b.thread), b.block_id))
            if blocks:
                self.sim.send(self.id, src, "blocks", blocks)
        elif kind == "record":
            thread, rec = body
            self.mempool[thread].setdefault(_mempool_key(rec), rec)
        elif kind == "endorse_vote":
            ovc_id, rnd, voter = body
            self.votes.setdefault((ovc_id, rnd), set()).add(voter)
        else:  # pragma: no cover - defensive
            raise ValueError(f"unknown message kind {kind}")

    def gossip(self, thread: Thread, rec) -> None:
        self.mempool[thread].setdefault(_mempool_key(rec), rec)
        self.sim.broadcast(self.id, "record", (thread, rec))

    # -- block intake ----------------------------------------------------
    def receive_block(self, block: Block, src: Optional[str]) -> None:
        bid = block.block_id
        if bid in self.state.blocks or bid in self.invalid:
            return
        if block.parent in self.invalid:
            self.invalid.add(bid)
            return
        if block.parent != GENESIS and block.parent not in self.state.blocks:
            pending = self.orphans.setdefault(block.parent, [])
            if all(b.block_id != bid for b in pending):
                pending.append(block)
            if src is not None and src != self.id:
                self.sim.send(self.id, src, "get_block", block.parent)
            return
        try:
            newly = self.state.append(block, self._validate if self.validating else None)
        except MissingDependency:
            if bid not in self.deferred:
                self.stats.deferred += 1
            self.deferred[bid] = block
            return
        except FraudulentEndorsement as fraud:
            self.invalid.add(bid)
            self.stats.rejected += 1
            self.stats.fraud_detected += 1
            self.sim.log("fraud_detected", node=self.id, block=block.short(), producer=block.producer,
                         ovc_id=fraud.rec.ovc_id)
            if isinstance(fraud.witness, (ConflictWitness, CapacityWitness)):
                self._demonstrate(fraud.ovc, fraud.witness)
            return
        except (InvalidBlock, DecodeError, ChainError) as exc:
            self.invalid.add(bid)
            self.stats.rejected += 1
            self.sim.log("block_rejected", node=self.id, block=block.short(), producer=block.producer,
                         reason=str(exc))
            return
        self.deferred.pop(bid, None)
        self._stored(block, newly)

    def _stored(self, block: Block, newly: list[Block]) -> None:
        recs = block.records()
        parent_meta = self.meta.get(block.parent)
        keys = set(parent_meta.keys) if parent_meta else set()
        endorsed = dict(parent_meta.endorsed) if parent_meta else {}
        for r in recs:
            keys.add(record_key(r))
            if isinstance(r, EndorsementRecord):
                sub = self.known_subs.get(r.ovc_id)
                endorsed[r.ovc_id] = sub.ovc if sub else None
            elif isinstance(r, OvcSubmissionRecord):
                self.known_subs.setdefault(r.ovc.ovc_id, r)
        self.meta[block.block_id] = BlockMeta(frozenset(keys), endorsed, bool(recs))
        if block.thread is Thread.Report:
            self._report_duties(recs)
        if newly:
            for b in newly:
                if b.thread is Thread.UnverifiedOvc:
                    for r in b.records():
                        self.final_subs.setdefault(r.ovc.ovc_id, r)
            self.sim.on_finalized(self, newly)
        for child in self.orphans.pop(block.block_id, []):
            self.receive_block(child, None)
        if self.deferred:
            for b in list(self.deferred.values()):
                if b.block_id in self.deferred:
                    self.receive_block(b, None)

    # -- validation ------------------------------------------------------
    def _validate(self, block: Block, state: ChainState) -> None:
        try:
            recs = block.records()
        except DecodeError as exc:
            raise InvalidBlock(f"undecodable payload: {exc}") from None
        allowed = THREAD_RECORDS[block.thread]
        if any(not isinstance(r, allowed) for r in recs):
            raise InvalidBlock(f"record type not allowed on {block.thread.name}")
        parent = self.meta.get(block.parent)
        keys = set(parent.keys) if parent else set()
        for r in recs:
            k = record_key(r)
            if k in keys:
                raise InvalidBlock(f"duplicate record {k}")
            keys.add(k)
        if block.thread is Thread.ValidatedOvc:
            self._validate_endorsements(block, recs, parent)
        elif block.thread is Thread.ConflictDemo:
            for r in recs:
                self._check_demo(r)

    def _validate_endorsements(self, block: Block, recs, parent: Optional[BlockMeta]) -> None:
        endorsed = [o for o in (parent.endorsed.values() if parent else ()) if o is not None]
        for r in recs:
            sub = self.known_subs.get(r.ovc_id)
            if sub is None:
                raise MissingDependency(r.ovc_id)
            if self.pow:
                if r.endorsers != (block.producer,) or r.round != 0:
                    raise InvalidBlock("PoW endorsements name their producer, round 0")
            else:
                if r.round < 0:
                    raise InvalidBlock("negative committee round")
                committee = set(self.committee(sub, r.round))
                if not set(r.endorsers) <= committee or len(set(r.endorsers)) < self.quorum:
                    raise InvalidBlock(f"endorsers of {r.ovc_id} are not a committee quorum")
            result = validate_submission(block.producer, sub.ovc, endorsed)
            if not isinstance(result, Endorsement):
                raise FraudulentEndorsement(r, sub.ovc, result)
            endorsed.append(sub.ovc)

    def _check_demo(self, rec: ConflictDemoRecord) -> None:
        ovcs = {}
        for oid in (rec.target, rec.against):
            sub = self.known_subs.get(oid)
            if sub is None:
                raise MissingDependency(oid)
            ovcs[oid] = sub.ovc
        validated = [o for o in self._all_endorsed() if o.ovc_id != rec.target]
        try:
            check_demo(rec, ovcs, validated)
        except BogusWitness as exc:
            if isinstance(rec.witness, CapacityWitness):
                # occupancy may depend on endorsements not received yet
                raise MissingDependency(str(exc)) from None
            raise InvalidBlock(f"bogus witness: {exc}") from None

    def _all_endorsed(self) -> list[OperatingVolumeContract]:
        seen = {}
        for m in self.meta.values():
            for oid, ovc in m.endorsed.items():
                if ovc is not None:
                    seen[oid] = ovc
        return [seen[k] for k in sorted(seen)]

    # -- committees ------------------------------------------------------
    @property
    def quorum(self) -> int:
        return self.sim.cfg.consensus.committee_size // 2 + 1

    def committee(self, sub: OvcSubmissionRecord, rnd: int) -> list[str]:
        k = min(self.sim.cfg.consensus.committee_size, len(self.sim.staked))
        return select_endorsers(f"{sub.ovc.ovc_id}#{rnd}", self.sim.stakes, k, self.sim.record_beacon(sub))

    def endorsement_round(self, sub: OvcSubmissionRecord) -> int:
        span = self.sim.cfg.consensus.committee_timeout * self.sim.cfg.consensus.block_interval
        return max(0, math.floor((self.sim.now - sub.submitted_at) / span))

    # -- production --------------------------------------------------------
    def on_slot(self, slot: int) -> None:
        if not self.pow:
            self._pos_votes()
        for thread in Thread:
            if self.pow:
                self._pow_attempt(thread, slot)
            elif self.sim.slot_leader(thread, slot) == self.id:
                self._pos_produce(thread, slot)

    def _head_meta(self, thread: Thread) -> Optional[BlockMeta]:
        head = self.state.head(thread)
        return self.meta.get(head.block_id) if head else None

    def _needs_heartbeat(self, thread: Thread) -> bool:
        head = self.state.head(thread)
        if head is None:
            return False
        fin = self.state.finalized.get(thread)
        floor = fin.height if fin else 0
        for b in self.state.ancestors(head):
            if b.height <= floor:
                break
            if self.meta[b.block_id].nonempty:
                return True
        return False

    def _build(self, thread: Thread, slot: int) -> list:
        head = self._head_meta(thread)
        keys = head.keys if head else frozenset()
        limit = self.sim.cfg.consensus.batch_size
        if thread is Thread.ValidatedOvc:
            return self._endorsements(head, limit)
        out = []
        chosen = set()
        for rec in self._mempool_order(thread):
            k = record_key(rec)
            if k in keys or k in chosen:
                continue
            if thread is Thread.ConflictDemo and self.validating:
                if not self._demo_applies(rec):
                    continue
                try:
                    self._check_demo(rec)
                except (MissingDependency, InvalidBlock):
                    continue
            chosen.add(k)
            out.append(rec)
            if len(out) >= limit:
                break
        return out

    def _demo_applies(self, rec: ConflictDemoRecord) -> bool:
        # only demote against endorsements this node itself builds on
        vhead = self._head_meta(Thread.ValidatedOvc)
        endorsed = vhead.endorsed if vhead else {}
        if rec.target in endorsed:
            return False
        return isinstance(rec.witness, CapacityWitness) or rec.against in endorsed

    def _mempool_order(self, thread: Thread) -> list:
        recs = list(self.mempool[thread].values())
        if thread is Thread.UnverifiedOvc:
            recs.sort(key=lambda r: (r.submitted_at, r.ovc.ovc_id))
        elif thread is Thread.ConflictDemo:
            # own demonstrations first, so PoW miners collect their own fees
            recs.sort(key=lambda r: (r.demonstrator != self.id,))
        return recs

    def _workable(self, head: Optional[BlockMeta]) -> list[OvcSubmissionRecord]:
        """Finalized submissions not yet endorsed or demonstrated in this node's view."""
        keys = head.keys if head else frozenset()
        demo_head = self._head_meta(Thread.ConflictDemo)
        demo_keys = demo_head.keys if demo_head else frozenset()
        cutoff = (self.sim.cfg.consensus.confirmation_depth + 4) * self.sim.cfg.consensus.block_interval
        out = []
        for sub in sorted(self.final_subs.values(), key=lambda r: (r.submitted_at, r.ovc.ovc_id)):
            oid = sub.ovc.ovc_id
            if ("end", oid) in keys or ("demo", oid) in demo_keys or oid in self.my_demos:
                continue
            if self.sim.now > sub.submitted_at + self.sim.cfg.ovc_timeout - cutoff:
                continue
            out.append(sub)
        return out

    def _endorsements(self, head: Optional[BlockMeta], limit: int) -> list[EndorsementRecord]:
        endorsed = [o for o in (head.endorsed.values() if head else ()) if o is not None]
        out = []
        if self.pow:
            for sub in self._workable(head):
                if self.validating:
                    result = validate_submission(self.id, sub.ovc, endorsed)
                    if not isinstance(result, Endorsement):
                        self._demonstrate(sub.ovc, result)
                        continue
                out.append(EndorsementRecord(sub.ovc.ovc_id, 0, (self.id,)))
                endorsed.append(sub.ovc)
                if len(out) >= limit:
                    break
            return out
        keys = head.keys if head else frozenset()
        for (oid, rnd), voters in sorted(self.votes.items()):
            if ("end", oid) in keys or any(r.ovc_id == oid for r in out):
                continue
            sub = self.known_subs.get(oid)
            if sub is None or len(voters) < self.quorum:
                continue
            if self.validating and not isinstance(validate_submission(self.id, sub.ovc, endorsed),
                                                  Endorsement):
                continue
            out.append(EndorsementRecord(oid, rnd, tuple(sorted(voters))))
            endorsed.append(sub.ovc)
            if len(out) >= limit:
                break
        return out

    def _pos_votes(self) -> None:
        head = self._head_meta(Thread.ValidatedOvc)
        endorsed = [o for o in (head.endorsed.values() if head else ()) if o is not None]
        for sub in self._workable(head):
            rnd = self.endorsement_round(sub)
            key = (sub.ovc.ovc_id, rnd)
            if key in self.voted or self.id not in self.committee(sub, rnd):
                continue
            self.voted.add(key)
            if self.validating:
                result = validate_submission(self.id, sub.ovc, endorsed)
                if not isinstance(result, Endorsement):
                    self._demonstrate(sub.ovc, result)
                    continue
            self.votes.setdefault(key, set()).add(self.id)
            self.sim.broadcast(self.id, "endorse_vote", (sub.ovc.ovc_id, rnd, self.id))

    def _demonstrate(self, ovc: OperatingVolumeContract, witness) -> None:
        if ovc.ovc_id in self.my_demos:
            return
        self.my_demos.add(ovc.ovc_id)
        rec = demo_for(self.id, ovc, witness)
        self.sim.log("conflict_demo_created", node=self.id, target=rec.target, against=rec.against)
        self.gossip(Thread.ConflictDemo, rec)

    def _seed(self, thread: Thread, slot: int) -> int:
        return int.from_bytes(sha256(self.id.encode(), bytes([int(thread)]), slot.to_bytes(8, "big"))[:8], "big")

    def _pow_attempt(self, thread: Thread, slot: int) -> None:
        records = self._build(thread, slot)
        if not records and not self._needs_heartbeat(thread):
            return
        head = self.state.head(thread)
        block, attempts = mine_block(head or GENESIS, thread, encode_payload(records), self.id,
                                     self.sim.cfg.consensus.difficulty_target, self._seed(thread, slot))
        delay = attempts * self.sim.cfg.hash_time
        if delay >= self.sim.cfg.consensus.block_interval:
            return      # no solution within this slot
        self.sim.node_timer(delay, self.id, ("mined", block, self.epoch))

    def on_mined(self, block: Block, epoch: int) -> None:
        if not self.alive or epoch != self.epoch:
            return
        head = self.state.head(block.thread)
        if (head.block_id if head else GENESIS) != block.parent:
            return      # someone else extended the chain first
        self._publish(block)

    def _pos_produce(self, thread: Thread, slot: int) -> None:
        records = self._build(thread, slot)
        if not records and not self._needs_heartbeat(thread):
            return
        head = self.state.head(thread)
        block, _ = mine_block(head or GENESIS, thread, encode_payload(records), self.id, POS_TARGET,
                              self._seed(thread, slot))
        self._publish(block)

    def _publish(self, block: Block) -> None:
        self.receive_block(block, None)
        if block.block_id in self.state.blocks:
            self.stats.produced += 1
            self.sim.broadcast(self.id, "block", block)

    # -- post-flight duties ----------------------------------------------
    def _report_duties(self, recs) -> None:
        for r in recs:
            if isinstance(r, ReportRecord) and r.report.report_id not in self.seen_reports:
                self.seen_reports[r.report.report_id] = r
                rank = self.sim.node_rank(self.id, r.report.report_id)
                B = self.sim.cfg.consensus.block_interval
                self.sim.node_timer(B * (1 + rank), self.id, ("check_report", r, self.epoch))
                if self.sim.is_evaluator(self.id, r):
                    self.sim.node_timer(B, self.id, ("evaluate", r, self.epoch))
            elif isinstance(r, ChallengeRecord) and r.challenge_id not in self.seen_challenges:
                self.seen_challenges.add(r.challenge_id)
                if self.sim.is_voter(self.id, r):
                    self.sim.node_timer(self.sim.cfg.consensus.block_interval, self.id,
                                        ("vote", r, self.epoch))

    def on_timer(self, payload) -> None:
        kind = payload[0]
        if kind == "mined":
            self.on_mined(payload[1], payload[2])
            return
        if not self.alive or payload[-1] != self.epoch:
            return
        if kind == "check_report":
            self._maybe_challenge(payload[1])
        elif kind == "evaluate":
            self._evaluate(payload[1])
        elif kind == "vote":
            self._vote(payload[1])

    def report_deviates(self, report: FlightReport) -> bool:
        vid = self.sim.vehicle_of_ovc.get(report.ovc_id)
        fixes = self.sim.attest.get(vid, [])
        t0, t1 = report.track[0].t, report.track[-1].t
        tol = self.sim.cfg.reporting.track_tolerance
        flagged = 0
        for f in fixes:
            if not t0 <= f.emit_time <= t1:
                continue
            p = track_position(report.track, f.emit_time)
            if math.dist(p, f.position) > tol:
                flagged += 1
        return flagged >= self.sim.cfg.reporting.min_flagged

    def _maybe_challenge(self, rec: ReportRecord) -> None:
        if self.false_vote or not self.honest:
            return
        rid = rec.report.report_id
        cid = f"ch-{rid}"
        if any(isinstance(r, ChallengeRecord) and r.report_id == rid
               for r in self.mempool[Thread.Report].values()):
            return
        if cid in self.seen_challenges:
            return
        if self.sim.now > rec.created_at + self.sim.cfg.challenge_period:
            return
        if not self.report_deviates(rec.report):
            return
        deposit = self.sim.report_deposit(rid)
        if deposit is None:
            # report not settled into the book yet; look again next slot
            self.sim.node_timer(self.sim.cfg.consensus.block_interval, self.id,
                                ("check_report", rec, self.epoch))
            return
        self.gossip(Thread.Report, ChallengeRecord(cid, rid, self.id, deposit, self.sim.stamp()))
        self.sim.log("challenge_created", node=self.id, report_id=rid)

    def _vote(self, ch: ChallengeRecord) -> None:
        rep = self.seen_reports.get(ch.report_id)
        if rep is None:
            return
        deviates = self.report_deviates(rep.report)
        if self.false_vote:
            deviates = not deviates
        verdict = Verdict.UpholdChallenge if deviates else Verdict.UpholdReport
        self.gossip(Thread.Report, VoteRecord(ch.challenge_id, self.id, verdict, self.sim.stamp()))

    def _evaluate(self, rec: ReportRecord) -> None:
        report = rec.report
        sub = self.known_subs.get(report.ovc_id)
        if sub is None:
            return
        if self.false_vote:
            bp, accepted = 0, ()
        else:
            accepted = tuple(i for i, j in enumerate(report.justifications) if self._corroborated(report, j))
            bp = compliance_bp(report, sub.ovc, [report.justifications[i] for i in accepted])
        self.gossip(Thread.Report, EvaluationRecord(report.report_id, self.id, bp, accepted, self.sim.stamp()))

    def _corroborated(self, report: FlightReport, j) -> bool:
        sim = self.sim
        vid = sim.vehicle_of_ovc.get(report.ovc_id)
        own = [f.as_point() for f in sim.attest.get(vid, [])]
        others = []
        for other_vid, fixes in sorted(sim.attest.items()):
            if other_vid == vid:
                continue
            others.append((self._tier_of(other_vid), [f.as_point() for f in fixes]))
        slack = sim.cfg.mlat.broadcast_interval / 2
        return corroborates(j, own, self._tier_of(vid), others, sim.cfg.corroboration_radius, slack)

    def _tier_of(self, vid: Optional[str]) -> int:
        oid = self.sim.ovc_of_vehicle.get(vid)
        sub = self.known_subs.get(oid) if oid else None
        return TIER_BY_CLASS[sub.ovc.priority_class] if sub else NON_ADHERING_TIER


def _mempool_key(rec) -> tuple:
    # demonstrations and endorsements may exist in several versions; keep each
    return record_key(rec) + (canonical_encode(rec),)
