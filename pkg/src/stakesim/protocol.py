"""Protocol definitions: the validate/mine pair, the random-oracle family
with recency, three worked example protocols, and tools for classifying
and empirically probing predictability.

All hashing and signing is modeled by a keyed deterministic pseudorandom
function (blake2b); "signature by the owner" means evaluation under the
owner's subkey.  Eligibility draws are uniform values in [0, 1) compared
against a constant success probability p.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain import (
    Block,
    BlockId,
    ChainStore,
    CoinId,
    ParticipantId,
    anchor_of,
    owner_at,
)

# Slot-width of one generated block of draws.  Small enough that a
# fresh anchor (the common case: every new tip) costs little, wide
# enough that lookahead scans touch few blocks.
CHUNK = 16

# Who may evaluate an eligibility draw before the block exists:
#   "realized" - nobody; the draw belongs to a trusted oracle and is only
#                revealed once the anchor block exists (random-oracle family)
#   "public"   - anyone; eligibility is a public hash of block coordinates
#   "owner"    - only the witness coin's owner (signature-chained)
SCOPE_REALIZED = "realized"
SCOPE_PUBLIC = "public"
SCOPE_OWNER = "owner"


class OracleKey:
    """Deterministic randomness source standing in for HASH/SIG.

    Draws are organized as chunks of uniforms indexed by (anchor bytes,
    coin, slot); a bounded cache keeps recent chunks so hot loops pay one
    generator initialization per anchor rather than per query.  Evicted
    chunks regenerate identically, so results never depend on cache state.
    """

    def __init__(self, seed: bytes, n_coins: int, max_cache_bytes: int = 8 << 20):
        self.seed = seed
        self.n_coins = n_coins
        self._cache: OrderedDict[tuple[bytes, int], np.ndarray] = OrderedDict()
        entry_bytes = n_coins * CHUNK * 8
        self._max_entries = max(16, max_cache_bytes // entry_bytes)

    def subkey(self, participant: ParticipantId) -> bytes:
        return hashlib.blake2b(
            self.seed + b"subkey" + participant.to_bytes(8, "big", signed=True),
            digest_size=32,
        ).digest()

    def _chunk(self, anchor: bytes, idx: int) -> np.ndarray:
        key = (anchor, idx)
        arr = self._cache.get(key)
        if arr is None:
            digest = hashlib.blake2b(
                self.seed + b"chunk" + anchor + idx.to_bytes(8, "big"),
                digest_size=16,
            ).digest()
            gen = np.random.Generator(
                np.random.SFC64(int.from_bytes(digest, "big"))
            )
            arr = gen.random((self.n_coins, CHUNK))
            if len(self._cache) >= self._max_entries:
                self._cache.popitem(last=False)
            self._cache[key] = arr
        else:
            self._cache.move_to_end(key)
        return arr

    def unit(self, anchor: bytes, c: CoinId, t: int) -> float:
        """The uniform draw for (anchor, coin, slot)."""
        return float(self._chunk(anchor, t // CHUNK)[c, t % CHUNK])

    def column(self, anchor: bytes, t: int) -> np.ndarray:
        """Draws for every coin at one slot."""
        return self._chunk(anchor, t // CHUNK)[:, t % CHUNK]

    def row(self, anchor: bytes, c: CoinId, t_from: int, t_to: int) -> np.ndarray:
        """Draws for one coin over slots [t_from, t_to)."""
        if t_to <= t_from:
            return np.empty(0)
        pieces = []
        t = t_from
        while t < t_to:
            idx = t // CHUNK
            lo = t % CHUNK
            hi = min(CHUNK, lo + (t_to - t))
            pieces.append(self._chunk(anchor, idx)[c, lo:hi])
            t += hi - lo
        return np.concatenate(pieces) if len(pieces) > 1 else pieces[0]

    def prf(self, subkey: bytes, *parts: bytes) -> bytes:
        h = hashlib.blake2b(subkey, digest_size=32)
        for p in parts:
            h.update(len(p).to_bytes(4, "big") + p)
        return h.digest()


def digest_unit(data: bytes) -> float:
    """Map bytes to a uniform-looking value in [0, 1)."""
    h = hashlib.blake2b(data, digest_size=8).digest()
    return int.from_bytes(h, "big") / 2**64


@dataclass(frozen=True)
class PredictabilityProfile:
    """Declared classification of a protocol per lookahead depth D.

    kind is one of "globally-predictable", "locally-predictable",
    "recent-beyond"; depth bounds the claim (None = unbounded).  For the
    random-oracle family the boundary is the recency ell: predictable for
    D <= ell, recent beyond.
    """

    kind: str
    depth: Optional[int] = None


GLOBALLY_PREDICTABLE = "globally-predictable"
LOCALLY_PREDICTABLE = "locally-predictable"
RECENT = "recent"
UNCLASSIFIED = "unclassified"


@dataclass
class ProtocolSpec:
    """The validate/mine pair plus declared metadata.

    validate(store, block) is the protocol-specific predicate V_P only;
    chain.is_valid composes it with ownership, freezing, and timestamp
    checks.  mine(store, tip, coin, slot) returns a fully-formed valid
    block or None, and returns None only when no valid block with those
    coordinates exists.
    """

    name: str
    freeze: int
    success_prob: float
    key: OracleKey
    validate: Callable[[ChainStore, Block], bool]
    mine: Callable[[ChainStore, BlockId, CoinId, int], Optional[Block]]
    recency_ell: Optional[int]
    profile: PredictabilityProfile
    oracle_scope: str
    builtin: bool = True


def _ownership_ok(store: ChainStore, tip: BlockId, c: CoinId, miner: ParticipantId, freeze: int) -> bool:
    for i in range(freeze):
        if owner_at(store, anchor_of(store, tip, i), c) != miner:
            return False
    return True


def oracle_eligible(key: OracleKey, anchor: BlockId, c: CoinId, t: int, p: float) -> bool:
    """Deterministic Bernoulli(p) draw keyed on (anchor, coin, slot)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p == 1.0:
        return True
    return key.unit(anchor, c, t) < p


def make_random_oracle(
    p: float,
    ell: int,
    key: OracleKey,
    freeze: int = 1,
    name: Optional[str] = None,
) -> ProtocolSpec:
    """Mining keyed on the ell-th predecessor of the block being mined:
    eligibility of (anchor, coin, slot) is an independent Bernoulli(p)
    draw revealed only once the anchor exists."""
    if ell < 1:
        raise ValueError("recency must be >= 1")

    def validate(store: ChainStore, b: Block) -> bool:
        anchor = anchor_of(store, b.pred, ell - 1)
        return oracle_eligible(key, anchor, b.coin, b.slot, p)

    def mine(store: ChainStore, tip: BlockId, c: CoinId, t: int) -> Optional[Block]:
        tip_block = store.get(tip)
        if t <= tip_block.slot:
            return None
        miner = owner_at(store, tip, c)
        if not _ownership_ok(store, tip, c, miner, freeze):
            return None
        anchor = anchor_of(store, tip, ell - 1)
        if not oracle_eligible(key, anchor, c, t, p):
            return None
        return Block(pred=tip, miner=miner, slot=t, coin=c)

    spec = ProtocolSpec(
        name=name or f"oracle-l{ell}",
        freeze=freeze,
        success_prob=p,
        key=key,
        validate=validate,
        mine=mine,
        recency_ell=ell,
        profile=PredictabilityProfile(GLOBALLY_PREDICTABLE, depth=ell),
        oracle_scope=SCOPE_REALIZED,
    )
    return spec


def make_p1(p: float, key: OracleKey, freeze: int = 1) -> ProtocolSpec:
    """Eligibility is a public hash of (predecessor id, slot, coin): anyone
    can evaluate it on hypothetical blocks, so chains of candidate blocks
    can be enumerated arbitrarily far ahead."""

    def validate(store: ChainStore, b: Block) -> bool:
        return key.unit(b.pred, b.coin, b.slot) < p  # type: ignore[arg-type]

    def mine(store: ChainStore, tip: BlockId, c: CoinId, t: int) -> Optional[Block]:
        tip_block = store.get(tip)
        if t <= tip_block.slot:
            return None
        miner = owner_at(store, tip, c)
        if not _ownership_ok(store, tip, c, miner, freeze):
            return None
        if not key.unit(tip, c, t) < p:
            return None
        return Block(pred=tip, miner=miner, slot=t, coin=c)

    return ProtocolSpec(
        name="p1",
        freeze=freeze,
        success_prob=p,
        key=key,
        validate=validate,
        mine=mine,
        recency_ell=None,
        profile=PredictabilityProfile(GLOBALLY_PREDICTABLE, depth=None),
        oracle_scope=SCOPE_PUBLIC,
    )


P2_ANCHOR = b"slot-coin-only"


def make_p2(p: float, key: OracleKey, freeze: int = 1) -> ProtocolSpec:
    """Eligibility is a public hash of (slot, coin) only, identical on
    every fork."""

    def validate(store: ChainStore, b: Block) -> bool:
        return key.unit(P2_ANCHOR, b.coin, b.slot) < p

    def mine(store: ChainStore, tip: BlockId, c: CoinId, t: int) -> Optional[Block]:
        tip_block = store.get(tip)
        if t <= tip_block.slot:
            return None
        miner = owner_at(store, tip, c)
        if not _ownership_ok(store, tip, c, miner, freeze):
            return None
        if not key.unit(P2_ANCHOR, c, t) < p:
            return None
        return Block(pred=tip, miner=miner, slot=t, coin=c)

    return ProtocolSpec(
        name="p2",
        freeze=freeze,
        success_prob=p,
        key=key,
        validate=validate,
        mine=mine,
        recency_ell=None,
        profile=PredictabilityProfile(GLOBALLY_PREDICTABLE, depth=None),
        oracle_scope=SCOPE_PUBLIC,
    )


def p3_genesis_seed(key: OracleKey) -> bytes:
    return hashlib.blake2b(key.seed + b"p3-genesis", digest_size=32).digest()


def p3_signature(key: OracleKey, owner: ParticipantId, pred_aux: bytes, t: int) -> bytes:
    return key.prf(key.subkey(owner), b"sig", pred_aux, t.to_bytes(8, "big"))


def make_p3(p: float, key: OracleKey, freeze: int = 1) -> ProtocolSpec:
    """Signature-chained eligibility: each block carries s_B, the owner's
    signature over (digest of predecessor's s, slot); the block is eligible
    iff s_B hashes below the threshold.  Only the owner can evaluate the
    next draw, but anyone can verify a presented block."""

    def seed_of(store: ChainStore, bid: BlockId) -> bytes:
        blk = store.get(bid)
        return blk.aux if blk.aux else p3_genesis_seed(key)

    def validate(store: ChainStore, b: Block) -> bool:
        expected = p3_signature(key, b.miner, seed_of(store, b.pred), b.slot)  # type: ignore[arg-type]
        return b.aux == expected and digest_unit(b.aux) < p

    def mine(store: ChainStore, tip: BlockId, c: CoinId, t: int) -> Optional[Block]:
        tip_block = store.get(tip)
        if t <= tip_block.slot:
            return None
        miner = owner_at(store, tip, c)
        if not _ownership_ok(store, tip, c, miner, freeze):
            return None
        sig = p3_signature(key, miner, seed_of(store, tip), t)
        if not digest_unit(sig) < p:
            return None
        return Block(pred=tip, miner=miner, slot=t, coin=c, aux=sig)

    return ProtocolSpec(
        name="p3",
        freeze=freeze,
        success_prob=p,
        key=key,
        validate=validate,
        mine=mine,
        recency_ell=None,
        profile=PredictabilityProfile(LOCALLY_PREDICTABLE, depth=1),
        oracle_scope=SCOPE_OWNER,
    )


def eligible_coins(
    spec: ProtocolSpec, store: ChainStore, tip: BlockId, coins: list[CoinId], t: int
) -> list[CoinId]:
    """Coins from `coins` whose eligibility draw on `tip` at slot t
    succeeds.  Vectorized over one oracle column for the hash-keyed
    protocols; ownership and timestamp checks are left to mine()."""
    if not coins:
        return []
    if spec.oracle_scope == SCOPE_OWNER:
        out = []
        tip_block = store.get(tip)
        seed = tip_block.aux if tip_block.aux else p3_genesis_seed(spec.key)
        for c in coins:
            owner = owner_at(store, tip, c)
            sig = p3_signature(spec.key, owner, seed, t)
            if digest_unit(sig) < spec.success_prob:
                out.append(c)
        return out
    if spec.name == "p2":
        anchor: bytes = P2_ANCHOR
    elif spec.recency_ell is not None:
        anchor = anchor_of(store, tip, spec.recency_ell - 1)
    else:
        anchor = tip
    col = spec.key.column(anchor, t)
    return [c for c in coins if col[c] < spec.success_prob]


def mine_random_oracle(
    spec: ProtocolSpec, store: ChainStore, tip: BlockId, c: CoinId, t: int
) -> Optional[Block]:
    """Mine under a random-oracle spec; thin named wrapper over spec.mine."""
    if spec.recency_ell is None:
        raise ValueError("spec has no declared recency")
    return spec.mine(store, tip, c, t)


def classify(spec: ProtocolSpec, d: int) -> str:
    """Classification per lookahead depth D for the built-in protocols.

    Arbitrary user specs return "unclassified" rather than a guess."""
    if d < 1:
        raise ValueError("depth must be >= 1")
    if not spec.builtin:
        return UNCLASSIFIED
    prof = spec.profile
    if prof.depth is None or d <= prof.depth:
        return prof.kind
    return RECENT


@dataclass
class _Candidate:
    """A hypothetical or realized block on a growth path: enough state to
    evaluate eligibility one level further without a ChainStore."""

    bid: BlockId
    slot: int
    aux: bytes


def _grow_levels(
    spec: ProtocolSpec,
    chain: list[_Candidate],
    grower_coins: list[CoinId],
    grower_owner: dict[CoinId, ParticipantId],
    start_slot: int,
    levels: int,
    budget: int,
) -> Optional[list[_Candidate]]:
    """Extend a chain by `levels` blocks mined with grower coins at the
    earliest eligible slots, or None if the budget runs out.  Operates on
    plain candidate records so it can evaluate hypothetical futures."""
    chain = list(chain)
    key = spec.key
    t = start_slot
    deadline = start_slot + budget
    ell = spec.recency_ell
    for _ in range(levels):
        placed = False
        while t < deadline and not placed:
            tip = chain[-1]
            for c in grower_coins:
                if spec.oracle_scope == SCOPE_OWNER:
                    sig = p3_signature(key, grower_owner[c], tip.aux, t)
                    ok = digest_unit(sig) < spec.success_prob
                    aux = sig
                elif spec.name == "p2":
                    ok = key.unit(P2_ANCHOR, c, t) < spec.success_prob
                    aux = b""
                else:
                    if ell is None:
                        anchor = tip.bid
                    else:
                        anchor = chain[-ell].bid if len(chain) >= ell else chain[0].bid
                    ok = key.unit(anchor, c, t) < spec.success_prob
                    aux = b""
                if ok:
                    blk = Block(pred=tip.bid, miner=grower_owner[c], slot=t, coin=c, aux=aux)
                    chain.append(_Candidate(blk.id, t, aux))
                    placed = True
                    break
            t += 1
        if not placed:
            return None
    return chain


def prediction_game(spec: ProtocolSpec, d: int, trials: int, seed: int) -> float:
    """Empirical predictability probe.

    Per trial: other participants grow d-1 blocks above a fresh tip at
    the earliest eligible slots; the question is whether the watched coin
    is eligible to witness the next (depth-d) block one slot later.  A
    best-effort predictor commits to a guess first, honoring the spec's
    evaluation scope: public draws may be evaluated on hypothetical
    blocks, realized-only draws require an existing anchor, owner-scoped
    draws require the owner's subkey.  Returns the predictor's accuracy
    excess over always guessing the majority outcome.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    key = spec.key
    watched_coin = 0
    watched_owner = 0
    grower_coins = [1, 2, 3]
    grower_owner = {c: c for c in grower_coins}
    budget = 32 * max(d, 1)
    rng = np.random.Generator(np.random.Philox(key=seed))

    ell = spec.recency_ell
    genesis_chain_pad = max(ell or 1, 1)
    hits = 0
    outcomes = []
    for trial in range(trials):
        # A fresh, distinct base tip per trial: a synthetic block whose id
        # is drawn from the trial index (its history is irrelevant to all
        # built-in eligibility rules given the padded candidate chain).
        base_slot = int(rng.integers(1, 1000))
        base_id = hashlib.blake2b(
            key.seed + b"game-base" + trial.to_bytes(8, "big"), digest_size=16
        ).digest()
        base_aux = hashlib.blake2b(base_id + b"s", digest_size=32).digest()
        chain = [_Candidate(base_id, base_slot, base_aux)] * genesis_chain_pad

        # Predictor commits before growth happens.
        guess: Optional[bool] = None
        if d == 1:
            t_target = base_slot + 1
            if spec.oracle_scope == SCOPE_OWNER:
                sig = p3_signature(key, watched_owner, base_aux, t_target)
                guess = digest_unit(sig) < spec.success_prob
            elif spec.name == "p2":
                guess = key.unit(P2_ANCHOR, watched_coin, t_target) < spec.success_prob
            else:
                anchor = chain[-(ell or 1)].bid
                guess = key.unit(anchor, watched_coin, t_target) < spec.success_prob
        elif spec.oracle_scope == SCOPE_PUBLIC:
            grown = _grow_levels(
                spec, chain, grower_coins, grower_owner, base_slot + 1, d - 1, budget
            )
            if grown is None:
                guess = False
            elif spec.name == "p2":
                guess = key.unit(P2_ANCHOR, watched_coin, grown[-1].slot + 1) < spec.success_prob
            else:
                guess = key.unit(grown[-1].bid, watched_coin, grown[-1].slot + 1) < spec.success_prob
        elif spec.oracle_scope == SCOPE_REALIZED and ell is not None and d <= ell:
            # The depth-d block's anchor is d levels below it, i.e. already
            # on the existing chain: its draw is revealed.
            anchor = chain[-(ell - d + 1)].bid
            grown = _grow_levels(
                spec, chain, grower_coins, grower_owner, base_slot + 1, d - 1, budget
            )
            if grown is None:
                guess = False
            else:
                guess = key.unit(anchor, watched_coin, grown[-1].slot + 1) < spec.success_prob
        # else: no edge; guess stays None and joins the majority below.

        # Realized growth and outcome.
        grown = _grow_levels(
            spec, chain, grower_coins, grower_owner, base_slot + 1, d - 1, budget
        )
        if grown is None:
            outcome = False
        else:
            tip = grown[-1]
            t_target = tip.slot + 1
            if spec.oracle_scope == SCOPE_OWNER:
                sig = p3_signature(key, watched_owner, tip.aux, t_target)
                outcome = digest_unit(sig) < spec.success_prob
            elif spec.name == "p2":
                outcome = key.unit(P2_ANCHOR, watched_coin, t_target) < spec.success_prob
            else:
                anchor = grown[-(ell or 1)].bid
                outcome = key.unit(anchor, watched_coin, t_target) < spec.success_prob
        outcomes.append((guess, outcome))

    realized = [o for _, o in outcomes]
    base_rate = max(sum(realized), trials - sum(realized)) / trials
    majority = sum(realized) * 2 >= trials
    correct = sum(
        1 for g, o in outcomes if (g if g is not None else majority) == o
    )
    return abs(correct / trials - base_rate)
