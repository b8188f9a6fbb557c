"""Offline re-verification of a chain export (and optionally its token journal)."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..chain import ChainError, ChainState, Thread, import_blocks
from ..encoding import DecodeError
from ..geometry4d import find_conflict
from ..ovc_protocol import (
    BogusWitness,
    ConflictDemoRecord,
    Endorsement,
    EndorsementRecord,
    OvcSubmissionRecord,
    check_demo,
    validate_submission,
)
from ..token_ledger import replay_journal
from .node import THREAD_RECORDS


@dataclass
class ReplayResult:
    blocks: int = 0
    finalized: dict[str, int] = field(default_factory=dict)
    endorsed: list[str] = field(default_factory=list)
    demonstrated: list[str] = field(default_factory=list)
    balances: Optional[dict[str, int]] = None
    problems: list[tuple[str, str]] = field(default_factory=list)   # (category, detail)

    @property
    def ok(self) -> bool:
        return not self.problems

    @property
    def exit_code(self) -> int:
        codes = {"conflict": 11, "conservation": 12, "chain": 14}
        return min((codes[c] for c, _ in self.problems), default=0)


def replay(chain_bytes: bytes, journal_lines: Optional[list[str]] = None) -> ReplayResult:
    res = ReplayResult()
    try:
        header, blocks = import_blocks(chain_bytes)
        meta = json.loads(header.decode() or "{}")
    except (ChainError, DecodeError, ValueError) as exc:
        res.problems.append(("chain", f"unreadable export: {exc}"))
        return res
    pow_mode = meta.get("mode", "pow") == "pow"
    target = int(meta["difficulty_target"]) if pow_mode and "difficulty_target" in meta else None
    state = ChainState(int(meta.get("confirmation_depth", 6)), target)
    subs: dict[str, OvcSubmissionRecord] = {}
    res.blocks = len(blocks)
    for b in sorted(blocks, key=lambda b: (int(b.thread), b.height, b.block_id)):
        try:
            recs = b.records()
            if any(not isinstance(r, THREAD_RECORDS[b.thread]) for r in recs):
                raise ChainError(f"record type not allowed on {b.thread.name}")
            state.append(b)
        except (ChainError, DecodeError) as exc:
            res.problems.append(("chain", f"block {b.short()}: {exc}"))
            continue
        for r in recs:
            if isinstance(r, OvcSubmissionRecord):
                subs.setdefault(r.ovc.ovc_id, r)
    for t in Thread:
        fin = state.finalized.get(t)
        res.finalized[t.name] = fin.height if fin else 0

    # endorsements along the finalized chain, each checked against its predecessors
    endorsed = []
    for b in state.finalized_chain(Thread.ValidatedOvc):
        for r in b.records():
            sub = subs.get(r.ovc_id)
            if sub is None:
                res.problems.append(("chain", f"endorsement of unknown submission {r.ovc_id}"))
                continue
            if not isinstance(validate_submission(b.producer, sub.ovc, endorsed), Endorsement):
                res.problems.append(("conflict", f"{r.ovc_id} endorsed despite a conflict"))
            endorsed.append(sub.ovc)
            res.endorsed.append(r.ovc_id)
    for b in state.finalized_chain(Thread.ConflictDemo):
        for r in b.records():
            try:
                check_demo(r, {k: v.ovc for k, v in subs.items()}, endorsed)
            except BogusWitness as exc:
                res.problems.append(("chain", f"demonstration against {r.target}: {exc}"))
                continue
            res.demonstrated.append(r.target)
    excl = [o for o in endorsed if o.exclusive]
    for a, b in itertools.combinations(excl, 2):
        if find_conflict(a, b) is not None:
            res.problems.append(("conflict", f"{a.ovc_id} overlaps {b.ovc_id}"))

    if journal_lines is not None:
        try:
            balances, _ = replay_journal(journal_lines)
            res.balances = dict(sorted(balances.items()))
        except (AssertionError, ValueError, KeyError) as exc:
            res.problems.append(("conservation", f"journal replay failed: {exc}"))
    return res


def replay_files(chain_path: str | Path, journal_path: Optional[str | Path] = None) -> ReplayResult:
    chain_path = Path(chain_path)
    if journal_path is None and (chain_path.parent / "journal.ndjson").exists():
        journal_path = chain_path.parent / "journal.ndjson"
    lines = Path(journal_path).read_text().splitlines() if journal_path else None
    return replay(chain_path.read_bytes(), lines)
