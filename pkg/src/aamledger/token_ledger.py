"""Integer token accounts, escrows, and an append-only transfer journal.

Every mutation goes through :class:`Ledger`, which checks balances after each
transaction and records it in the journal.  Accounts start empty; scenario
funding is minted by the authority so the journal alone replays the state.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence


class LedgerError(Exception):
    pass


class InsufficientBalance(LedgerError):
    pass


class NonPositiveAmount(LedgerError):
    pass


class EscrowOverdraw(LedgerError):
    pass


class EscrowAlreadyReleased(LedgerError):
    pass


class NotAuthority(LedgerError):
    pass


class UnknownAccount(LedgerError):
    pass


class Role(enum.Enum):
    Operator = "operator"
    ValidatorNode = "validator_node"
    Authority = "authority"
    StationPool = "station_pool"


class EscrowPurpose(enum.Enum):
    OvcDeposit = "ovc_deposit"
    ReportDeposit = "report_deposit"
    ChallengeDeposit = "challenge_deposit"


class EscrowStatus(enum.Enum):
    Held = "held"
    Released = "released"


class Reason(enum.Enum):
    Deposit = "deposit"
    ValidationFee = "validation_fee"
    ChallengePayout = "challenge_payout"
    VoterReward = "voter_reward"
    Rebate = "rebate"
    Refund = "refund"
    AuthorityResidual = "authority_residual"
    StationFee = "station_fee"
    Mint = "mint"
    Burn = "burn"


MINT_SOURCE = "@supply"


@dataclass
class Account:
    account_id: str
    role: Role
    balance: int = 0


@dataclass
class Escrow:
    escrow_id: str
    source: str
    amount: int
    purpose: EscrowPurpose
    status: EscrowStatus = EscrowStatus.Held
    remaining: int = 0


@dataclass(frozen=True)
class TokenTransaction:
    tx_id: str
    src: str
    dst: str
    amount: int
    reason: Reason

    # journal line field order: seq, tx_id, reason, from, to, amount
    def to_record(self, seq: int) -> dict:
        return {"seq": seq, "tx_id": self.tx_id, "reason": self.reason.value,
                "from": self.src, "to": self.dst, "amount": self.amount}


def split_even(amount: int, k: int) -> tuple[int, int]:
    """Per-recipient share and the remainder left behind."""
    if k <= 0:
        return 0, amount
    return amount // k, amount % k


class Ledger:
    def __init__(self, authority_id: str = "authority"):
        self.authority_id = authority_id
        self.accounts: dict[str, Account] = {}
        self.escrows: dict[str, Escrow] = {}
        self.journal: list[TokenTransaction] = []
        self.minted = 0
        self.burned = 0
        self.initial_supply = 0
        self._next_escrow = 1
        self.open_account(authority_id, Role.Authority)

    # -- accounts -------------------------------------------------------
    def open_account(self, account_id: str, role: Role) -> Account:
        if account_id in self.accounts:
            raise LedgerError(f"account {account_id} exists")
        if account_id.startswith(("esc-", "@")):
            raise LedgerError(f"reserved account id {account_id}")
        acct = Account(account_id, role)
        self.accounts[account_id] = acct
        return acct

    def balance(self, account_id: str) -> int:
        return self._account(account_id).balance

    def _account(self, account_id: str) -> Account:
        try:
            return self.accounts[account_id]
        except KeyError:
            raise UnknownAccount(account_id) from None

    def _escrow(self, escrow_id: str) -> Escrow:
        try:
            return self.escrows[escrow_id]
        except KeyError:
            raise LedgerError(f"unknown escrow {escrow_id}") from None

    def _record(self, src: str, dst: str, amount: int, reason: Reason) -> TokenTransaction:
        tx = TokenTransaction(f"tx-{len(self.journal) + 1:06d}", src, dst, amount, reason)
        self.journal.append(tx)
        self._check_non_negative(src, dst)
        return tx

    def _check_non_negative(self, *ids: str) -> None:
        for i in ids:
            if i in self.accounts and self.accounts[i].balance < 0:
                raise AssertionError(f"negative balance on {i}")
            if i in self.escrows and self.escrows[i].remaining < 0:
                raise AssertionError(f"negative escrow {i}")

    @staticmethod
    def _positive(amount: int) -> None:
        if isinstance(amount, bool) or not isinstance(amount, int) or amount <= 0:
            raise NonPositiveAmount(f"amount must be a positive integer, got {amount!r}")

    # -- supply ---------------------------------------------------------
    def authority_mint(self, caller: str, to: str, amount: int) -> TokenTransaction:
        if caller != self.authority_id:
            raise NotAuthority(caller)
        self._positive(amount)
        acct = self._account(to)
        acct.balance += amount
        self.minted += amount
        return self._record(MINT_SOURCE, to, amount, Reason.Mint)

    def authority_burn(self, caller: str, frm: str, amount: int) -> TokenTransaction:
        if caller != self.authority_id:
            raise NotAuthority(caller)
        self._positive(amount)
        acct = self._account(frm)
        if acct.balance < amount:
            raise InsufficientBalance(f"{frm} holds {acct.balance}, burn {amount}")
        acct.balance -= amount
        self.burned += amount
        return self._record(frm, MINT_SOURCE, amount, Reason.Burn)

    # -- escrow ---------------------------------------------------------
    def open_escrow(self, source: str, amount: int, purpose: EscrowPurpose) -> Escrow:
        self._positive(amount)
        acct = self._account(source)
        if acct.balance < amount:
            raise InsufficientBalance(f"{source} holds {acct.balance}, needs {amount}")
        esc = Escrow(f"esc-{self._next_escrow:06d}", source, amount, purpose, remaining=amount)
        self._next_escrow += 1
        acct.balance -= amount
        self.escrows[esc.escrow_id] = esc
        self._record(source, esc.escrow_id, amount, Reason.Deposit)
        return esc

    def pay_from_escrow(self, escrow_id: str, recipients: Sequence[tuple[str, int]],
                        reason: Reason = Reason.ValidationFee) -> list[TokenTransaction]:
        esc = self._escrow(escrow_id)
        if esc.status is EscrowStatus.Released:
            raise EscrowAlreadyReleased(escrow_id)
        for account_id, amount in recipients:
            self._positive(amount)
            self._account(account_id)
        total = sum(a for _, a in recipients)
        if total > esc.remaining:
            raise EscrowOverdraw(f"{escrow_id} holds {esc.remaining}, asked {total}")
        txs = []
        for account_id, amount in recipients:
            esc.remaining -= amount
            self.accounts[account_id].balance += amount
            txs.append(self._record(escrow_id, account_id, amount, reason))
        return txs

    def split_from_escrow(self, escrow_id: str, amount: int, recipients: Sequence[str],
                          reason: Reason) -> list[TokenTransaction]:
        """Pay ``amount // k`` to each of k recipients; the remainder stays held."""
        share, _ = split_even(amount, len(recipients))
        if share == 0:
            return []
        return self.pay_from_escrow(escrow_id, [(r, share) for r in recipients], reason)

    def release_escrow(self, escrow_id: str, residual_to: Optional[str] = None,
                       reason: Reason = Reason.AuthorityResidual) -> Optional[TokenTransaction]:
        esc = self._escrow(escrow_id)
        if esc.status is EscrowStatus.Released:
            raise EscrowAlreadyReleased(escrow_id)
        dst = residual_to or self.authority_id
        self._account(dst)
        amount, esc.remaining = esc.remaining, 0
        esc.status = EscrowStatus.Released
        if amount == 0:
            return None
        self.accounts[dst].balance += amount
        return self._record(escrow_id, dst, amount, reason)

    def held_total(self) -> int:
        return sum(e.remaining for e in self.escrows.values() if e.status is EscrowStatus.Held)

    # -- audit ----------------------------------------------------------
    def total_supply(self) -> int:
        return sum(a.balance for a in self.accounts.values()) + self.held_total()

    def conserved(self) -> bool:
        return self.total_supply() == self.initial_supply + self.minted - self.burned

    def balances(self) -> dict[str, int]:
        return {k: self.accounts[k].balance for k in sorted(self.accounts)}

    def journal_lines(self) -> list[str]:
        return [json.dumps(tx.to_record(i + 1), separators=(",", ":"))
                for i, tx in enumerate(self.journal)]


def replay_journal(lines: Iterable[str]) -> tuple[dict[str, int], dict[str, int]]:
    """Rebuild account balances and escrow remainders from journal lines.

    Escrow ids carry the ``esc-`` prefix and the supply sink is ``@supply``;
    every other id is an account.  Raises ``AssertionError`` on a negative
    balance or a gap in the sequence numbers.
    """
    accounts: dict[str, int] = {}
    escrows: dict[str, int] = {}

    def bucket(name: str) -> Optional[dict]:
        if name == MINT_SOURCE:
            return None
        return escrows if name.startswith("esc-") else accounts

    for expected, line in enumerate(lines, start=1):
        rec = json.loads(line)
        if rec["seq"] != expected:
            raise AssertionError(f"journal gap at seq {expected}")
        amount = int(rec["amount"])
        src, dst = bucket(rec["from"]), bucket(rec["to"])
        if src is not None:
            src[rec["from"]] = src.get(rec["from"], 0) - amount
            if src[rec["from"]] < 0:
                raise AssertionError(f"replay drove {rec['from']} negative")
        if dst is not None:
            dst[rec["to"]] = dst.get(rec["to"], 0) + amount
    return accounts, escrows
