"""Hash-chained ledger threads with PoW mining and stake-weighted committees.

Block header (the canonical block encoding, hashed with SHA-256 for the id)::

    parent      32 bytes   (GENESIS = 32 zero bytes)
    thread      u8
    height      u64
    producer    u16 length + utf-8
    payload     u32 length + bytes
    nonce       u64

The nonce sits last so mining can reuse a hash state over the fixed prefix.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Optional

from .encoding import canonical_decode, canonical_encode

GENESIS = bytes(32)
HASH_SPACE = 2**256
MAX_NONCE = 2**64


class ChainError(Exception):
    pass


class UnknownParent(ChainError):
    pass


class InvalidBlock(ChainError):
    pass


class DuplicateBlock(ChainError):
    pass


class FewerAccountsThanK(ChainError):
    pass


class Thread(enum.IntEnum):
    UnverifiedOvc = 0
    ValidatedOvc = 1
    ConflictDemo = 2
    Report = 3


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def hash_int(h: bytes) -> int:
    return int.from_bytes(h, "big")


def _prefix(parent: bytes, thread: Thread, height: int, producer: str, payload: bytes) -> bytes:
    prod = producer.encode()
    return (parent + struct.pack(">BQH", int(thread), height, len(prod)) + prod
            + struct.pack(">I", len(payload)) + payload)


@dataclass(frozen=True)
class Block:
    parent: bytes
    thread: Thread
    height: int
    producer: str
    payload: bytes
    nonce: int
    block_id: bytes = field(default=b"", compare=False)

    def __post_init__(self):
        if len(self.parent) != 32:
            raise InvalidBlock("parent must be 32 bytes")
        if self.height < 1:
            raise InvalidBlock("height starts at 1")
        if not 0 <= self.nonce < MAX_NONCE:
            raise InvalidBlock("nonce out of u64 range")
        object.__setattr__(self, "thread", Thread(self.thread))
        object.__setattr__(self, "block_id", sha256(self.encode()))

    def encode(self) -> bytes:
        return (_prefix(self.parent, self.thread, self.height, self.producer, self.payload)
                + struct.pack(">Q", self.nonce))

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        try:
            parent = data[:32]
            thread, height, plen = struct.unpack(">BQH", data[32:43])
            pos = 43 + plen
            producer = data[43:pos].decode()
            (n,) = struct.unpack(">I", data[pos:pos + 4])
            payload = data[pos + 4:pos + 4 + n]
            (nonce,) = struct.unpack(">Q", data[pos + 4 + n:pos + 12 + n])
        except (struct.error, UnicodeDecodeError) as exc:
            raise InvalidBlock(f"malformed block encoding: {exc}") from None
        if pos + 12 + n != len(data) or len(payload) != n:
            raise InvalidBlock("malformed block encoding: length mismatch")
        return cls(parent, Thread(thread), height, producer, payload, nonce)

    @property
    def id_int(self) -> int:
        return hash_int(self.block_id)

    def records(self) -> tuple:
        return canonical_decode(self.payload) if self.payload else ()

    def short(self) -> str:
        return self.block_id.hex()[:12]


def meets_target(block_id: bytes, difficulty_target: int) -> bool:
    return hash_int(block_id) < difficulty_target


def mine_block(parent: Block | bytes, thread: Thread, payload: bytes, producer: str,
               difficulty_target: int, seed: int = 0) -> tuple[Block, int]:
    """Search nonces sequentially from ``seed``; return the block and attempt count."""
    if isinstance(parent, Block):
        parent_id, height = parent.block_id, parent.height + 1
    else:
        parent_id, height = parent, 1
    if difficulty_target <= 0:
        raise ValueError("difficulty target must be positive")
    base = hashlib.sha256(_prefix(parent_id, thread, height, producer, payload))
    pack = struct.Struct(">Q").pack
    nonce = seed % MAX_NONCE
    attempts = 0
    while True:
        attempts += 1
        h = base.copy()
        h.update(pack(nonce))
        if int.from_bytes(h.digest(), "big") < difficulty_target:
            return Block(parent_id, thread, height, producer, payload, nonce), attempts
        nonce = (nonce + 1) % MAX_NONCE
        if attempts >= MAX_NONCE:  # pragma: no cover - unreachable for sane targets
            raise ValueError("nonce space exhausted")


def select_endorsers(ovc_id: str, stake_table: Mapping[str, int], k: int,
                     randomness_beacon: bytes) -> list[str]:
    """Stake-weighted sampling of ``k`` distinct accounts without replacement.

    Draws come from SHA-256 in counter mode over ``beacon || ovc_id``; accounts
    are walked in sorted id order, so every node derives the same committee.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = sorted((a, s) for a, s in stake_table.items() if s > 0)
    if not pool:
        raise ValueError("total stake must be positive")
    if len(pool) < k:
        raise FewerAccountsThanK(f"{len(pool)} staked accounts, k={k}")
    seed = sha256(randomness_beacon, ovc_id.encode())
    chosen = []
    counter = 0
    while len(chosen) < k:
        total = sum(s for _, s in pool)
        r = hash_int(sha256(seed, counter.to_bytes(8, "big"))) % total
        counter += 1
        acc = 0
        for i, (account, stake) in enumerate(pool):
            acc += stake
            if r < acc:
                chosen.append(account)
                del pool[i]
                break
    return chosen


Validator = Callable[[Block, "ChainState"], None]


class ChainState:
    """All threads' block trees plus fork choice and finality, for one node.

    Head of a thread: greatest height, ties to the numerically smaller id.
    The block ``confirmation_depth`` below the head, and its ancestors, are
    finalized.  A head switch that would abandon a finalized block is refused
    and counted in ``finality_violations``.
    """

    def __init__(self, confirmation_depth: int = 6, difficulty_target: Optional[int] = None):
        if confirmation_depth < 0:
            raise ValueError("confirmation depth must be >= 0")
        self.confirmation_depth = confirmation_depth
        self.difficulty_target = difficulty_target
        self.blocks: dict[bytes, Block] = {}
        self.heads: dict[Thread, Block] = {}
        self.finalized: dict[Thread, Block] = {}
        self.finality_violations = 0

    def __contains__(self, block_id: bytes) -> bool:
        return block_id in self.blocks

    def head(self, thread: Thread) -> Optional[Block]:
        return self.heads.get(thread)

    def ancestors(self, block: Optional[Block]) -> Iterator[Block]:
        """``block`` then each parent up to genesis."""
        while block is not None:
            yield block
            block = self.blocks.get(block.parent)

    def chain(self, thread: Thread) -> list[Block]:
        """Head chain in height order."""
        return list(reversed(list(self.ancestors(self.heads.get(thread)))))

    def finalized_chain(self, thread: Thread) -> list[Block]:
        return list(reversed(list(self.ancestors(self.finalized.get(thread)))))

    def is_ancestor(self, maybe: Block, of: Block) -> bool:
        if maybe.height > of.height:
            return False
        for b in self.ancestors(of):
            if b.height == maybe.height:
                return b.block_id == maybe.block_id
        return False

    def append(self, block: Block, validate: Optional[Validator] = None) -> list[Block]:
        """Store ``block``; return blocks newly finalized on its thread."""
        if block.block_id in self.blocks:
            raise DuplicateBlock(block.short())
        if block.parent != GENESIS:
            parent = self.blocks.get(block.parent)
            if parent is None:
                raise UnknownParent(block.parent.hex()[:12])
            if parent.thread != block.thread:
                raise InvalidBlock("parent lies on another thread")
            if block.height != parent.height + 1:
                raise InvalidBlock("height must be parent height + 1")
        elif block.height != 1:
            raise InvalidBlock("genesis children have height 1")
        if self.difficulty_target is not None and not meets_target(block.block_id, self.difficulty_target):
            raise InvalidBlock("proof of work below difficulty")
        if validate is not None:
            validate(block, self)
        self.blocks[block.block_id] = block
        return self._update_head(block)

    def _update_head(self, block: Block) -> list[Block]:
        t = block.thread
        head = self.heads.get(t)
        if head is not None and (block.height, -block.id_int) <= (head.height, -head.id_int):
            return []
        fin = self.finalized.get(t)
        if fin is not None and not self.is_ancestor(fin, block):
            self.finality_violations += 1
            return []
        self.heads[t] = block
        target_height = block.height - self.confirmation_depth
        if target_height < 1 or (fin is not None and target_height <= fin.height):
            return []
        newly = []
        for b in self.ancestors(block):
            if b.height > target_height:
                continue
            if fin is not None and b.height <= fin.height:
                break
            newly.append(b)
        self.finalized[t] = newly[0]
        return list(reversed(newly))


def append_block(state: ChainState, block: Block, validate: Optional[Validator] = None) -> ChainState:
    state.append(block, validate)
    return state


# -- export / import ----------------------------------------------------------

EXPORT_MAGIC = b"AAMCHAIN\x01"


def export_blocks(blocks: Iterable[Block], header: bytes = b"") -> bytes:
    """Length-prefixed stream: magic, header entry, then one entry per block."""
    out = bytearray(EXPORT_MAGIC)
    out += struct.pack(">I", len(header)) + header
    for b in blocks:
        enc = b.encode()
        out += struct.pack(">I", len(enc)) + enc
    return bytes(out)


def import_blocks(data: bytes) -> tuple[bytes, list[Block]]:
    if not data.startswith(EXPORT_MAGIC):
        raise InvalidBlock("not a chain export")
    pos = len(EXPORT_MAGIC)
    entries = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise InvalidBlock("truncated export")
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        entry = data[pos + 4:pos + 4 + n]
        if len(entry) != n:
            raise InvalidBlock("truncated export")
        entries.append(entry)
        pos += 4 + n
    if not entries:
        raise InvalidBlock("export lacks a header entry")
    return entries[0], [Block.decode(e) for e in entries[1:]]


def encode_payload(records) -> bytes:
    return canonical_encode(tuple(records)) if records else b""
