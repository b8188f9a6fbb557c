import itertools

import numpy as np
import pytest

from aamledger.chain import GENESIS, Thread
from aamledger.geometry4d import ConflictWitness, Point4D
from aamledger.ovc_protocol import (BogusWitness, CapacityWitness, ConflictDemoRecord,
                                    DepositBelowMinimum, DuplicateOvc, Endorsement,
                                    EndorsementRecord, NotDesignatedEndorser, NotTerminal, OvcBook,
                                    StaleSubmission, SubmissionStatus, check_demo, demo_for,
                                    post_conflict_demonstration, post_endorsement,
                                    validate_submission)
from aamledger.token_ledger import Ledger, Role
from conftest import make_ovc
from oracles import cell_overlap

BOX = (0, 10, (0, 0, 0), (100, 100, 100))


def book(balance=1000, **kw):
    led = Ledger()
    for name, role in [("op1", Role.Operator), ("op2", Role.Operator), ("n1", Role.ValidatorNode),
                       ("n2", Role.ValidatorNode), ("n3", Role.ValidatorNode)]:
        led.open_account(name, role)
    led.authority_mint("authority", "op1", balance)
    led.authority_mint("authority", "op2", balance)
    return led, OvcBook(led, **kw)


def test_submit_and_errors():
    led, b = book()
    sub = b.submit_ovc(make_ovc("a", [BOX], deposit=100), 100)
    assert sub.status is SubmissionStatus.Pending and led.balance("op1") == 900
    with pytest.raises(DuplicateOvc):
        b.submit_ovc(make_ovc("a", [BOX], deposit=100), 100)
    with pytest.raises(DepositBelowMinimum):
        b.submit_ovc(make_ovc("z", [BOX], deposit=100), 0)
    with pytest.raises(NotTerminal):
        b.settle_submission(sub)


def test_validate_empty_and_identical():
    a = make_ovc("a", [BOX])
    assert validate_submission("n1", a, []) == Endorsement("a", "n1")
    res = validate_submission("n1", make_ovc("b", [BOX]), [a])
    assert isinstance(res, ConflictWitness)


def test_first_conflict_by_ascending_id():
    target = make_ovc("t", [BOX])
    others = [make_ovc(i, [BOX]) for i in ("c", "a", "b")]
    res = validate_submission("n1", target, others)
    assert {res.ovc_a, res.ovc_b} == {"t", "a"}


def test_capacity_witness():
    low = [make_ovc(f"l{i}", [BOX], exclusive=False, capacity=2) for i in range(3)]
    assert isinstance(validate_submission("n1", low[1], low[:1]), Endorsement)
    res = validate_submission("n1", low[2], low[:2])
    assert isinstance(res, CapacityWitness) and res.count == 3
    check_demo(demo_for("n2", low[2], res), {o.ovc_id: o for o in low}, low[:2])
    with pytest.raises(BogusWitness):
        check_demo(demo_for("n2", low[2], res), {o.ovc_id: o for o in low}, low[:1])


def test_sequential_validation_is_pairwise_conflict_free():
    rng = np.random.default_rng(4)
    ovcs = []
    for i in range(50):
        lo = rng.integers(0, 400, 3).astype(float)
        t0 = float(rng.integers(0, 100))
        ovcs.append(make_ovc(f"o{i:02d}", [(t0, t0 + float(rng.integers(5, 40)), tuple(lo),
                                            tuple(lo + rng.integers(20, 150, 3)))]))
    endorsed = []
    for o in ovcs:
        if isinstance(validate_submission("n1", o, endorsed), Endorsement):
            endorsed.append(o)
    assert 5 < len(endorsed) < 50
    for a, b in itertools.combinations(endorsed, 2):
        assert not cell_overlap(a, b)


def test_pow_fee_goes_to_sole_validator():
    led, b = book()
    b.submit_ovc(make_ovc("a", [BOX], deposit=100), 100)
    assert b.apply_endorsement("a", b"\x01" * 32, ["n1"], 5.0)
    sub = b.get("a")
    assert sub.status is SubmissionStatus.Endorsed and sub.ovc.approval_hash == b"\x01" * 32
    assert led.balance("n1") == 10
    assert led.escrows[sub.escrow].remaining == 90
    assert not b.apply_endorsement("a", b"\x02" * 32, ["n2"], 6.0)


@pytest.mark.parametrize("deposit,share,left", [(90, 3, 81), (100, 3, 91)])
def test_pos_fee_split(deposit, share, left):
    led, b = book()
    b.submit_ovc(make_ovc("a", [BOX], deposit=deposit), deposit)
    b.apply_endorsement("a", b"\x01" * 32, ["n1", "n2", "n3"], 1.0)
    assert [led.balance(n) for n in ("n1", "n2", "n3")] == [share] * 3
    assert led.escrows[b.get("a").escrow].remaining == left
    assert led.conserved()


def test_demonstration_pays_demonstrator_and_refunds():
    led, b = book()
    a = make_ovc("a", [BOX], deposit=100)
    bad = make_ovc("b", [BOX], deposit=100, operator="op2")
    b.submit_ovc(a, 100)
    b.submit_ovc(bad, 100)
    w = validate_submission("n2", bad, [a])
    rec = demo_for("n2", bad, w)
    check_demo(rec, {"a": a, "b": bad})
    assert b.apply_conflict_demo(rec, 3.0)
    assert b.get("b").status is SubmissionStatus.DemonstratedConflict
    assert led.balance("n2") == 10 and led.balance("op2") == 990


def test_bogus_witness_rejected():
    a = make_ovc("a", [BOX])
    c = make_ovc("c", [(0, 10, (50, 50, 50), (150, 150, 150))])
    outside_c = ConflictWitness("c", "a", Point4D(5, 10, 10, 10))
    with pytest.raises(BogusWitness):
        check_demo(ConflictDemoRecord("c", "a", outside_c, "n1"), {"a": a, "c": c})
    touching = make_ovc("d", [(10, 20, (0, 0, 0), (100, 100, 100))])
    edge = ConflictWitness("d", "a", Point4D(10, 50, 50, 50))
    with pytest.raises(BogusWitness):
        check_demo(ConflictDemoRecord("d", "a", edge, "n1"), {"a": a, "d": touching})
    with pytest.raises(BogusWitness):
        post_conflict_demonstration("n1", [ConflictDemoRecord("c", "a", outside_c, "n1")],
                                    {"a": a, "c": c}, None, 2**256)


def test_expired_refunds_in_full():
    led, b = book()
    b.submit_ovc(make_ovc("a", [BOX], deposit=100), 100)
    assert b.expire("a", 100.0)
    assert led.balance("op1") == 1000 and b.get("a").status is SubmissionStatus.Expired


def test_post_endorsement_checks():
    rec = EndorsementRecord("a", 0, ("n1",))
    block, _ = post_endorsement("n1", [rec], None, 2**256)
    assert block.thread is Thread.ValidatedOvc and block.parent == GENESIS
    assert block.records() == (rec,)
    with pytest.raises(NotDesignatedEndorser):
        post_endorsement("n2", [rec], None, 2**256)
    with pytest.raises(NotDesignatedEndorser):
        post_endorsement("n1", [EndorsementRecord("a", 0, ("n1", "n4"))], None, 2**256,
                         committee_of=lambda r: ["n1", "n2", "n3"])
    with pytest.raises(StaleSubmission):
        post_endorsement("n1", [rec], None, 2**256, already_endorsed=["a"])
