import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aamledger.token_ledger import (EscrowAlreadyReleased, EscrowOverdraw, EscrowPurpose,
                                    EscrowStatus, InsufficientBalance, Ledger, NonPositiveAmount,
                                    NotAuthority, Reason, Role, replay_journal)
from oracles import fold_journal


def funded(**balances):
    led = Ledger()
    for name, amount in balances.items():
        led.open_account(name, Role.Operator)
        if amount:
            led.authority_mint("authority", name, amount)
    return led


def test_open_escrow():
    led = funded(op=100)
    esc = led.open_escrow("op", 40, EscrowPurpose.OvcDeposit)
    assert led.balance("op") == 60
    assert esc.remaining == 40 and esc.status is EscrowStatus.Held


def test_open_escrow_insufficient_leaves_state():
    led = funded(op=10)
    before = (led.balances(), len(led.journal))
    with pytest.raises(InsufficientBalance):
        led.open_escrow("op", 40, EscrowPurpose.OvcDeposit)
    assert (led.balances(), len(led.journal)) == before
    with pytest.raises(NonPositiveAmount):
        led.open_escrow("op", 0, EscrowPurpose.OvcDeposit)


def test_pay_from_escrow():
    led = funded(op=100, node1=0)
    esc = led.open_escrow("op", 40, EscrowPurpose.OvcDeposit)
    led.pay_from_escrow(esc.escrow_id, [("node1", 5)])
    assert esc.remaining == 35 and led.balance("node1") == 5
    with pytest.raises(EscrowOverdraw):
        led.pay_from_escrow(esc.escrow_id, [("node1", 20), ("node1", 16)])
    assert esc.remaining == 35


def test_three_way_split_keeps_remainder():
    led = funded(op=100, a=0, b=0, c=0)
    esc = led.open_escrow("op", 40, EscrowPurpose.OvcDeposit)
    led.split_from_escrow(esc.escrow_id, 40, ["a", "b", "c"], Reason.ValidationFee)
    assert [led.balance(x) for x in "abc"] == [40 // 3] * 3
    assert esc.remaining == 40 - 3 * (40 // 3) == 1
    led.release_escrow(esc.escrow_id)
    assert led.balance("authority") == 1
    with pytest.raises(EscrowAlreadyReleased):
        led.release_escrow(esc.escrow_id)
    with pytest.raises(EscrowAlreadyReleased):
        led.pay_from_escrow(esc.escrow_id, [("a", 1)])


def test_zero_release_has_no_transaction():
    led = funded(op=10, n=0)
    esc = led.open_escrow("op", 10, EscrowPurpose.OvcDeposit)
    led.pay_from_escrow(esc.escrow_id, [("n", 10)])
    n = len(led.journal)
    assert led.release_escrow(esc.escrow_id) is None
    assert esc.status is EscrowStatus.Released and len(led.journal) == n


def test_mint_burn():
    led = funded(op=0)
    led.authority_mint("authority", "op", 100)
    assert led.total_supply() == 100
    led.authority_burn("authority", "op", 30)
    with pytest.raises(InsufficientBalance):
        led.authority_burn("authority", "op", 100)
    with pytest.raises(NotAuthority):
        led.authority_mint("op", "op", 5)
    assert led.total_supply() == 70 and led.conserved()


ops = st.lists(st.tuples(st.sampled_from(["mint", "burn", "open", "pay", "release"]),
                         st.integers(0, 3), st.integers(-5, 120)), max_size=60)


@settings(max_examples=150, deadline=None)
@given(ops)
def test_random_sequences_conserve_and_replay(seq):
    names = ["a", "b", "c", "d"]
    led = funded(**{n: 0 for n in names})
    minted = burned = 0
    open_escrows = []
    for op, who, amount in seq:
        name = names[who]
        try:
            if op == "mint":
                led.authority_mint("authority", name, amount)
                minted += amount
            elif op == "burn":
                led.authority_burn("authority", name, amount)
                burned += amount
            elif op == "open":
                open_escrows.append(led.open_escrow(name, amount, EscrowPurpose.ReportDeposit))
            elif op == "pay" and open_escrows:
                esc = open_escrows[who % len(open_escrows)]
                led.pay_from_escrow(esc.escrow_id, [(name, amount)], Reason.VoterReward)
            elif op == "release" and open_escrows:
                esc = open_escrows.pop(who % len(open_escrows))
                led.release_escrow(esc.escrow_id, name)
        except (InsufficientBalance, NonPositiveAmount, EscrowOverdraw):
            pass
        assert led.total_supply() == minted - burned
        assert all(v >= 0 for v in led.balances().values())
    lines = led.journal_lines()
    accounts, escrows = replay_journal(lines)
    nonzero = {k: v for k, v in led.balances().items() if v}
    assert {k: v for k, v in accounts.items() if v} == nonzero
    assert {k: v for k, v in fold_journal(lines).items() if v} == nonzero
    held = {e.escrow_id: e.remaining for e in led.escrows.values() if e.remaining}
    assert {k: v for k, v in escrows.items() if v} == held
