"""Block DAG, coin ledger, validity, and longest-chain scoring.

Blocks are immutable records identified by a digest of their canonical
serialization.  A ChainStore is an append-only DAG rooted at a genesis
block; coin ownership is derived by replaying transfer payloads along
the ancestor path, and chain score is the number of predecessor hops
to genesis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, TypeAlias

BlockId: TypeAlias = bytes
ParticipantId: TypeAlias = int
CoinId: TypeAlias = int

GENESIS_COIN = -1
DIGEST_SIZE = 16


class UnknownBlockError(KeyError):
    """Raised when an operation references a block id not in the store."""


class UnknownCoinError(KeyError):
    """Raised when an operation references a coin without a genesis owner."""


class MissingAncestorError(ValueError):
    """Raised when a block's predecessor is absent from the store."""


@dataclass(frozen=True)
class Transfer:
    coin: CoinId
    sender: ParticipantId
    recipient: ParticipantId


@dataclass(frozen=True)
class Block:
    """One node of the chain DAG.

    ``pred`` is None only for genesis.  ``slot`` is the claimed creation
    time t_B, ``coin`` the witness coin c_B, and ``aux`` carries optional
    per-protocol bytes (e.g. a chained signature seed).
    """

    pred: Optional[BlockId]
    miner: ParticipantId
    slot: int
    coin: CoinId
    payload: tuple[Transfer, ...] = ()
    aux: bytes = b""

    @property
    def id(self) -> BlockId:
        # Memoized: blocks are immutable, and ids are recomputed in hot
        # loops (dedup, validation, tie-breaking).
        cached = self.__dict__.get("_id")
        if cached is None:
            cached = compute_block_id(self)
            object.__setattr__(self, "_id", cached)
        return cached


def _u64(n: int) -> bytes:
    return n.to_bytes(8, "big", signed=True)


def _prefixed(b: bytes) -> bytes:
    return len(b).to_bytes(4, "big") + b


def serialize_block(block: Block) -> bytes:
    """Canonical serialization: length-prefixed fields in declared order,
    fixed-width big-endian integers.  Bit-exact across platforms."""
    parts = [
        _prefixed(block.pred if block.pred is not None else b""),
        _u64(block.miner),
        _u64(block.slot),
        _u64(block.coin),
        _u64(len(block.payload)),
    ]
    for tr in block.payload:
        parts.append(_u64(tr.coin) + _u64(tr.sender) + _u64(tr.recipient))
    parts.append(_prefixed(block.aux))
    return b"".join(parts)


def compute_block_id(block: Block) -> BlockId:
    return hashlib.blake2b(serialize_block(block), digest_size=DIGEST_SIZE).digest()


@dataclass
class ChainStore:
    """Append-only DAG of blocks rooted at genesis.

    Ownership and score are memoized; memoization never changes results
    because blocks are immutable and the store only grows.
    """

    genesis_allocation: dict[CoinId, ParticipantId]
    blocks: dict[BlockId, Block] = field(default_factory=dict)
    genesis: BlockId = b""
    _score: dict[BlockId, int] = field(default_factory=dict)
    # owner map per block; shared by reference with the parent when the
    # payload moves no coins (the common case), so replay is O(1) amortized.
    _owners: dict[BlockId, dict[CoinId, ParticipantId]] = field(default_factory=dict)
    _children: dict[BlockId, list[BlockId]] = field(default_factory=dict)
    _by_height: dict[int, list[BlockId]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        g = Block(pred=None, miner=-1, slot=0, coin=GENESIS_COIN)
        gid = g.id
        self.genesis = gid
        self.blocks[gid] = g
        self._score[gid] = 0
        self._owners[gid] = dict(self.genesis_allocation)
        self._children[gid] = []
        self._by_height[0] = [gid]

    def __contains__(self, bid: BlockId) -> bool:
        return bid in self.blocks

    def get(self, bid: BlockId) -> Block:
        try:
            return self.blocks[bid]
        except KeyError:
            raise UnknownBlockError(bid.hex()) from None

    def add(self, block: Block) -> BlockId:
        """Insert a block; its predecessor must already be present."""
        if block.pred is None:
            raise ValueError("only genesis lacks a predecessor")
        if block.pred not in self.blocks:
            raise MissingAncestorError(block.pred.hex())
        bid = block.id
        if bid in self.blocks:
            return bid
        self.blocks[bid] = block
        self._score[bid] = self._score[block.pred] + 1
        parent_owners = self._owners[block.pred]
        if block.payload:
            owners = dict(parent_owners)
            for tr in block.payload:
                owners[tr.coin] = tr.recipient
            self._owners[bid] = owners
        else:
            self._owners[bid] = parent_owners
        self._children.setdefault(block.pred, []).append(bid)
        self._children[bid] = []
        self._by_height.setdefault(self._score[bid], []).append(bid)
        return bid

    def children(self, bid: BlockId) -> list[BlockId]:
        return self._children.get(bid, [])

    def at_height(self, h: int) -> list[BlockId]:
        return self._by_height.get(h, [])


def predecessor(store: ChainStore, b: BlockId, d: int) -> Optional[BlockId]:
    """d-th ancestor of b, or None if the chain to genesis is shorter."""
    cur = b
    if cur not in store.blocks:
        raise UnknownBlockError(cur.hex())
    for _ in range(d):
        pred = store.blocks[cur].pred
        if pred is None:
            return None
        cur = pred
    return cur


def anchor_of(store: ChainStore, b: BlockId, d: int) -> BlockId:
    """Like predecessor but clamps at genesis instead of returning None."""
    cur = b
    if cur not in store.blocks:
        raise UnknownBlockError(cur.hex())
    for _ in range(d):
        pred = store.blocks[cur].pred
        if pred is None:
            break
        cur = pred
    return cur


def owner_at(store: ChainStore, b: BlockId, c: CoinId) -> ParticipantId:
    """Owner of coin c after replaying transfers along genesis -> b."""
    if b not in store.blocks:
        raise UnknownBlockError(b.hex())
    owners = store._owners[b]
    try:
        return owners[c]
    except KeyError:
        raise UnknownCoinError(c) from None


def score(store: ChainStore, b: BlockId) -> int:
    if b not in store._score:
        raise UnknownBlockError(b.hex())
    return store._score[b]


def is_ancestor(store: ChainStore, ancestor: BlockId, b: BlockId) -> bool:
    """True iff ancestor lies on the path from b to genesis (or equals b)."""
    target = score(store, ancestor)
    cur = b
    while score(store, cur) > target:
        cur = store.blocks[cur].pred  # type: ignore[assignment]
    return cur == ancestor


def is_valid(store: ChainStore, b: Block, now: int, protocol) -> bool:
    """Recursive validity: a valid predecessor, the protocol's own check,
    witness-coin ownership frozen over the last F predecessors, payload
    senders owning what they spend, and t_pred < t_B <= now."""
    bid = b.id
    if bid == store.genesis:
        return True
    if b.pred is None or b.pred not in store.blocks:
        raise MissingAncestorError("predecessor not in store")
    if b.slot > now:
        return False
    cache = getattr(store, "_valid_cache", None)
    if cache is None:
        cache = {}
        store._valid_cache = cache  # type: ignore[attr-defined]
    key = (bid, protocol.name)
    cached = cache.get(key)
    if cached is not None:
        # Monotonicity: once valid at t_B, valid at every later now.
        return cached and b.slot <= now
    pred_block = store.blocks[b.pred]
    ok = (
        pred_block.slot < b.slot
        and is_valid(store, pred_block, b.slot, protocol)
        and _freeze_ok(store, b, protocol.freeze)
        and _payload_ok(store, b)
        and bool(protocol.validate(store, b))
    )
    cache[key] = ok
    return ok and b.slot <= now


def _freeze_ok(store: ChainStore, b: Block, freeze: int) -> bool:
    for i in range(1, freeze + 1):
        at = anchor_of(store, b.pred, i - 1)  # type: ignore[arg-type]
        if owner_at(store, at, b.coin) != b.miner:
            return False
    return True


def _payload_ok(store: ChainStore, b: Block) -> bool:
    owners: Optional[dict[CoinId, ParticipantId]] = None
    for tr in b.payload:
        if owners is None:
            current = owner_at(store, b.pred, tr.coin)  # type: ignore[arg-type]
        else:
            current = owners.get(tr.coin, owner_at(store, b.pred, tr.coin))  # type: ignore[arg-type]
        if current != tr.sender:
            return False
        if owners is None:
            owners = {}
        owners[tr.coin] = tr.recipient
    return True


def best_tip(store: ChainStore, known: Iterable[BlockId], now: int, protocol) -> BlockId:
    """Valid block of maximum score among known; ties broken by smallest
    id under bytewise order.  Falls back to genesis when nothing is valid."""
    best: Optional[BlockId] = None
    best_score = -1
    for bid in known:
        s = store._score.get(bid)
        if s is None:
            raise UnknownBlockError(bid.hex())
        if s < best_score or (s == best_score and best is not None and bid >= best):
            continue
        if is_valid(store, store.blocks[bid], now, protocol):
            best = bid
            best_score = s
    return best if best is not None else store.genesis
