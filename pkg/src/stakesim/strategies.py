"""Miner behaviors: honest mining, the safe nothing-at-stake miner and
its naive (detectable) control, withhold-and-release selfish mining in
global and local flavors, the double-spend planner, and the GHOST /
subtree-forking pieces.

Strategies are mutable per-miner state machines.  step() returns the
blocks to announce this slot; the engine owns the store and visibility,
so strategies never insert blocks themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import nbinom

from .chain import (
    Block,
    BlockId,
    ChainStore,
    CoinId,
    ParticipantId,
    Transfer,
    anchor_of,
    is_ancestor,
    owner_at,
    predecessor,
    score,
)
from .protocol import (
    P2_ANCHOR,
    SCOPE_OWNER,
    ProtocolSpec,
    digest_unit,
    eligible_coins,
    p3_genesis_seed,
    p3_signature,
)


@dataclass
class MinerView:
    """What one miner can see at the current slot: all announcements from
    earlier slots (zero latency, next-slot delivery) plus its own blocks.
    tips are the announced leaves; public_tip caches the best valid tip."""

    known: set[BlockId]
    public_tip: BlockId
    tips: set[BlockId]
    clock: int
    tx_pool: list[Transfer] = field(default_factory=list)


class HonestStrategy:
    """Mine every owned coin on the best tip and announce immediately."""

    def __init__(self, participant: ParticipantId, coins: list[CoinId]):
        self.participant = participant
        self.coins = sorted(coins)

    def step(self, view: MinerView, store: ChainStore, spec: ProtocolSpec) -> list[Block]:
        tip = view.public_tip
        out = []
        payload = _claimable(store, tip, view.tx_pool)
        for c in eligible_coins(spec, store, tip, self.coins, view.clock):
            blk = spec.mine(store, tip, c, view.clock)
            if blk is not None:
                if payload:
                    blk = Block(
                        pred=blk.pred,
                        miner=blk.miner,
                        slot=blk.slot,
                        coin=blk.coin,
                        payload=payload,
                        aux=blk.aux,
                    )
                out.append(blk)
        return out


def _claimable(store: ChainStore, tip: BlockId, pool: list[Transfer]) -> tuple[Transfer, ...]:
    """Pool transfers whose sender still owns the coin at the tip (a
    transfer already applied on this chain drops out naturally)."""
    if not pool:
        return ()
    return tuple(tr for tr in pool if owner_at(store, tip, tr.coin) == tr.sender)


class UnasStrategy:
    """Nothing-at-stake mining that stays undetectable.

    Per coin and slot: mine B on the best tip A; failing that, mine B' on
    the best tip A' among blocks that are not descendants of the D-th
    predecessor of A, and announce B' only if it cannot form a provable
    deviation with this coin's earlier announcements (its predecessor
    scores at least as high as anything announced before, and nothing
    else was announced this slot)."""

    def __init__(self, participant: ParticipantId, coins: list[CoinId], depth: int):
        self.participant = participant
        self.coins = sorted(coins)
        self.depth = depth
        self._max_announced: dict[CoinId, int] = {}

    def step(self, view: MinerView, store: ChainStore, spec: ProtocolSpec) -> list[Block]:
        t = view.clock
        tip = view.public_tip
        out = []
        eligible_on_tip = set(eligible_coins(spec, store, tip, self.coins, t))
        for c in self.coins:
            if c in eligible_on_tip:
                blk = spec.mine(store, tip, c, t)
                if blk is not None:
                    out.append(blk)
                    self._max_announced[c] = max(
                        self._max_announced.get(c, 0), score(store, tip) + 1
                    )
                    continue
            alt = self._fork_target(view, store, spec, tip)
            if alt is None:
                continue
            if score(store, alt) < self._max_announced.get(c, 0):
                continue  # announcing here would prove regression
            blk = spec.mine(store, alt, c, t)
            if blk is not None:
                out.append(blk)
                self._max_announced[c] = max(
                    self._max_announced.get(c, 0), score(store, alt) + 1
                )
        return out

    def _fork_target(
        self, view: MinerView, store: ChainStore, spec: ProtocolSpec, tip: BlockId
    ) -> Optional[BlockId]:
        """Best announced block that is not a descendant of Pred^D(tip):
        highest score wins, ties to the smallest id."""
        top = score(store, tip)
        if top < self.depth:
            return None
        pivot = predecessor(store, tip, self.depth)
        assert pivot is not None
        floor = score(store, pivot)
        for h in range(top, floor - 2, -1):
            best = None
            for bid in store.at_height(h):
                if bid not in view.known:
                    continue
                if h >= floor and is_ancestor(store, pivot, bid):
                    continue
                if best is None or bid < best:
                    best = bid
            if best is not None:
                return best
        return None


class NaiveForkStrategy:
    """Fork-everything control: mines on every announced tip and announces
    every success, with no safety check.  Produces provable deviations."""

    def __init__(self, participant: ParticipantId, coins: list[CoinId]):
        self.participant = participant
        self.coins = sorted(coins)

    def step(self, view: MinerView, store: ChainStore, spec: ProtocolSpec) -> list[Block]:
        out = []
        for tip in sorted(view.tips):
            for c in eligible_coins(spec, store, tip, self.coins, view.clock):
                blk = spec.mine(store, tip, c, view.clock)
                if blk is not None:
                    out.append(blk)
        return out


@dataclass
class _CandidateChain:
    """A hypothetical chain suffix for lookahead: block ids (real ancestors
    then candidates), matching slots, and the last aux value (signature
    chains)."""

    ids: list[BlockId]
    tip_slot: int
    tip_aux: bytes


def _chain_seed(store: ChainStore, base: BlockId, ell: int) -> _CandidateChain:
    ids = [anchor_of(store, base, i) for i in reversed(range(max(ell, 1)))]
    blk = store.get(base)
    aux = blk.aux if blk.aux else b""
    return _CandidateChain(ids=ids, tip_slot=blk.slot, tip_aux=aux)


def _candidate_anchor(spec: ProtocolSpec, chain: _CandidateChain) -> bytes:
    if spec.name == "p2":
        return P2_ANCHOR
    if spec.recency_ell is not None:
        ell = spec.recency_ell
        return chain.ids[-ell] if len(chain.ids) >= ell else chain.ids[0]
    return chain.ids[-1]


def lookahead_self(
    store: ChainStore,
    spec: ProtocolSpec,
    base: BlockId,
    coins: list[CoinId],
    owner: ParticipantId,
    t: int,
    horizon: int,
    k_max: int,
) -> tuple[dict[int, int], list[Block]]:
    """Earliest attacker-only chain above base: for each lead k up to
    k_max, the first slot in (t, t+horizon] at which a self-built chain
    of score S(base)+k can complete, along with the planned blocks.

    Greedy per level: take the earliest eligible (slot, coin).  This is
    the breadth-first search collapsed to its earliest branch; any lead
    it reports is achievable, though deeper leads may exist off slower
    prefixes."""
    if horizon <= 0 or not coins:
        return {}, []
    coins = sorted(coins)
    chain = _chain_seed(store, base, spec.recency_ell or 1)
    key = spec.key
    times: dict[int, int] = {}
    blocks: list[Block] = []
    deadline = t + horizon
    for k in range(1, k_max + 1):
        s0 = max(chain.tip_slot + 1, t + 1)
        if s0 > deadline:
            break
        if spec.oracle_scope == SCOPE_OWNER:
            seed = chain.tip_aux if chain.tip_aux else p3_genesis_seed(key)
            hit = None
            for s in range(s0, deadline + 1):
                for c in coins:
                    sig = p3_signature(key, owner, seed, s)
                    if digest_unit(sig) < spec.success_prob:
                        hit = (s, c, sig)
                        break
                if hit:
                    break
            if hit is None:
                break
            s, c, aux = hit
        else:
            anchor = _candidate_anchor(spec, chain)
            rows = np.stack([key.row(anchor, c, s0, deadline + 1) for c in coins])
            hits = (rows < spec.success_prob).any(axis=0)
            idx = int(np.argmax(hits))
            if not hits[idx]:
                break
            s = s0 + idx
            c = coins[int(np.argmax(rows[:, idx] < spec.success_prob))]
            aux = b""
        blk = Block(pred=chain.ids[-1], miner=owner, slot=s, coin=c, aux=aux)
        blocks.append(blk)
        chain.ids.append(blk.id)
        chain.tip_slot = s
        chain.tip_aux = aux
        times[k] = s
    return times, blocks


def lookahead_others(
    store: ChainStore,
    spec: ProtocolSpec,
    base: BlockId,
    other_coins: list[CoinId],
    owner_of: dict[CoinId, ParticipantId],
    t: int,
    horizon: int,
    k_max: int,
) -> dict[int, int]:
    """Earliest slots at which the rest of the network reaches each score
    above base, by replaying their deterministic honest behavior with the
    attacker silent: every slot all other coins try the current tip; the
    smallest-id success becomes the next tip (the honest tie rule)."""
    if horizon <= 0 or not other_coins:
        return {}
    coins = sorted(other_coins)
    chain = _chain_seed(store, base, spec.recency_ell or 1)
    key = spec.key
    times: dict[int, int] = {}
    deadline = t + horizon
    for k in range(1, k_max + 1):
        s0 = max(chain.tip_slot + 1, t)
        if s0 > deadline:
            break
        if spec.oracle_scope == SCOPE_OWNER:
            seed = chain.tip_aux if chain.tip_aux else p3_genesis_seed(key)
            found = None
            for s in range(s0, deadline + 1):
                winners = []
                for c in coins:
                    sig = p3_signature(key, owner_of[c], seed, s)
                    if digest_unit(sig) < spec.success_prob:
                        winners.append((c, sig))
                if winners:
                    found = (s, winners)
                    break
            if found is None:
                break
            s, winners = found
            cands = [
                Block(pred=chain.ids[-1], miner=owner_of[c], slot=s, coin=c, aux=sig)
                for c, sig in winners
            ]
        else:
            anchor = _candidate_anchor(spec, chain)
            rows = np.stack([key.row(anchor, c, s0, deadline + 1) for c in coins])
            hits = rows < spec.success_prob
            cols = hits.any(axis=0)
            idx = int(np.argmax(cols))
            if not cols[idx]:
                break
            s = s0 + idx
            cands = [
                Block(pred=chain.ids[-1], miner=owner_of[coins[j]], slot=s, coin=coins[j])
                for j in np.flatnonzero(hits[:, idx])
            ]
        winner = min(cands, key=lambda b: b.id)
        chain.ids.append(winner.id)
        chain.tip_slot = s
        chain.tip_aux = winner.aux
        times[k] = s
    return times


@dataclass
class SelfishPlan:
    """Withholding state: the base tip the lookaheads were computed from,
    the planned private blocks, and the release schedule."""

    base: Optional[BlockId] = None
    t_prime: dict[int, int] = field(default_factory=dict)
    t_star: dict[int, int] = field(default_factory=dict)
    cutoffs: dict[int, int] = field(default_factory=dict)
    withheld: list[Block] = field(default_factory=list)
    release_at: Optional[int] = None
    target_score: Optional[int] = None
    planned: list[Block] = field(default_factory=list)


@dataclass
class WithholdEpisode:
    trigger_slot: int
    k: int
    release_at: int
    base_score: int
    released: bool = False
    abandoned: bool = False
    tip_id: Optional[BlockId] = None
    unique_best: Optional[bool] = None  # filled in by the engine at release


class SelfishStrategy:
    """Withhold-and-release mining.

    In global mode the attacker compares its own earliest k-chain times
    t'_k against the exact future times t*_k the rest of the network will
    reach the same scores (computable because their behavior is
    deterministic and the eligibility draws are public), withholding
    exactly when it is guaranteed to win; the release is therefore
    risk-free.  In local mode t*_k is unknown and replaced by statistical
    cutoffs T_k (the median of the others' k-th success time); the
    attacker abandons if the public chain reaches the target first."""

    def __init__(
        self,
        participant: ParticipantId,
        coins: list[CoinId],
        other_coins: list[CoinId],
        owner_of: dict[CoinId, ParticipantId],
        mode: str = "global",
        horizon: int = 256,
        k_max: int = 32,
    ):
        if mode not in ("global", "local"):
            raise ValueError(f"unknown mode {mode!r}")
        self.participant = participant
        self.coins = sorted(coins)
        self.other_coins = sorted(other_coins)
        self.owner_of = owner_of
        self.mode = mode
        self.horizon = horizon
        self.k_max = k_max
        self.plan = SelfishPlan()
        self.episodes: list[WithholdEpisode] = []
        self.withholding = False

    def _cutoffs(self) -> dict[int, int]:
        # T_k: median slot count for the others' k-th success, one success
        # opportunity per slot at their aggregate rate.
        r = 1.0 - (1.0 - self.spec_p) ** len(self.other_coins)
        out = {}
        for k in range(1, self.k_max + 1):
            out[k] = k + int(nbinom.ppf(0.5, k, r))
        return out

    def step(self, view: MinerView, store: ChainStore, spec: ProtocolSpec) -> list[Block]:
        t = view.clock
        self.spec_p = spec.success_prob
        plan = self.plan
        if self.withholding:
            if self.mode == "local" and plan.target_score is not None:
                public_score = score(store, view.public_tip)
                if public_score >= plan.target_score and t < (plan.release_at or 0):
                    self.episodes[-1].abandoned = True
                    self._reset()
                    return []
            if plan.release_at is not None and t >= plan.release_at:
                released = plan.withheld
                self.episodes[-1].released = True
                self.episodes[-1].tip_id = released[-1].id
                self._reset()
                return released
            return []

        base = view.public_tip
        if plan.base != base:
            plan.base = base
            plan.t_prime, plan.planned = lookahead_self(
                store, spec, base, self.coins, self.participant, t, self.horizon, self.k_max
            )
            if self.mode == "global":
                plan.t_star = lookahead_others(
                    store, spec, base, self.other_coins, self.owner_of, t, self.horizon, self.k_max
                )
            else:
                plan.cutoffs = self._cutoffs()

        k_hit = None
        for k in sorted(plan.t_prime, reverse=True):
            if self.mode == "global":
                rival = plan.t_star.get(k)
                if rival is None or plan.t_prime[k] < rival:
                    k_hit = k
                    break
            else:
                if plan.t_prime[k] <= t + plan.cutoffs.get(k, 0):
                    k_hit = k
                    break
        if k_hit is not None and k_hit >= 2:
            plan.withheld = plan.planned[:k_hit]
            plan.release_at = plan.t_prime[k_hit]
            plan.target_score = score(store, base) + k_hit
            self.withholding = True
            self.episodes.append(
                WithholdEpisode(
                    trigger_slot=t,
                    k=k_hit,
                    release_at=plan.release_at,
                    base_score=score(store, base),
                )
            )
            return []

        # No profitable withhold: behave honestly.
        out = []
        for c in eligible_coins(spec, store, base, self.coins, t):
            blk = spec.mine(store, base, c, t)
            if blk is not None:
                out.append(blk)
        if out:
            plan.base = None  # our own announcement will move the tip
        return out

    def _reset(self) -> None:
        self.plan = SelfishPlan()
        self.withholding = False


@dataclass
class DoubleSpendPlan:
    """Double-spend state machine: announce tx, let it confirm z deep on
    the public chain, release a private chain that excludes it."""

    tx: Transfer
    confirm_depth: int
    phase: str = "dormant"
    plan: SelfishPlan = field(default_factory=SelfishPlan)
    tx_block: Optional[BlockId] = None
    goods_at: Optional[int] = None
    released_tip: Optional[BlockId] = None
    success: Optional[bool] = None
    abort_policy: str = "discard"  # or "release-anyway"


class DoubleSpendStrategy:
    """Predictable double-spend: trigger when the attacker alone can build
    z+1 blocks before the rest of the network does, announce the payment,
    wait for z-deep confirmation, then release the private chain."""

    def __init__(
        self,
        participant: ParticipantId,
        coins: list[CoinId],
        other_coins: list[CoinId],
        owner_of: dict[CoinId, ParticipantId],
        tx: Transfer,
        confirm_depth: int,
        horizon: int = 256,
        abort_policy: str = "discard",
    ):
        self.participant = participant
        self.coins = sorted(coins)
        self.other_coins = sorted(other_coins)
        self.owner_of = owner_of
        self.horizon = horizon
        self.state = DoubleSpendPlan(tx=tx, confirm_depth=confirm_depth, abort_policy=abort_policy)

    def step(self, view: MinerView, store: ChainStore, spec: ProtocolSpec) -> list[Block]:
        t = view.clock
        st = self.state
        z = st.confirm_depth
        if st.phase == "dormant":
            base = view.public_tip
            k_need = z + 1
            t_prime, planned = lookahead_self(
                store, spec, base, self.coins, self.participant, t, self.horizon, k_need
            )
            t_star = lookahead_others(
                store, spec, base, self.other_coins, self.owner_of, t, self.horizon, k_need
            )
            if k_need in t_prime and (
                k_need not in t_star or t_prime[k_need] < t_star[k_need]
            ):
                st.plan.base = base
                st.plan.withheld = planned[:k_need]
                st.plan.release_at = t_prime[k_need]
                st.phase = "announced"
                view.tx_pool.append(st.tx)
            else:
                return []  # keep waiting; no honest mining while staging the spend
            return []
        if st.phase in ("announced", "awaiting_confirmation"):
            st.phase = "awaiting_confirmation"
            if st.tx_block is None:
                st.tx_block = _find_tx_block(store, view, st.tx)
            if st.tx_block is not None:
                depth = score(store, view.public_tip) - score(store, st.tx_block)
                if depth >= z and is_ancestor(store, st.tx_block, view.public_tip):
                    st.phase = "goods_received"
                    st.goods_at = t
            if st.phase != "goods_received" and t >= (st.plan.release_at or 0):
                # Confirmation too slow: the private chain is spent.
                st.phase = "aborted"
                st.success = False
                if st.abort_policy == "release-anyway":
                    return st.plan.withheld
                return []
        if st.phase == "goods_received" and t >= (st.plan.release_at or 0):
            st.phase = "released"
            st.released_tip = st.plan.withheld[-1].id
            return st.plan.withheld
        return []


def _find_tx_block(store: ChainStore, view: MinerView, tx: Transfer) -> Optional[BlockId]:
    cur = view.public_tip
    while cur != store.genesis:
        blk = store.get(cur)
        if tx in blk.payload:
            return cur
        cur = blk.pred  # type: ignore[assignment]
    return None


@dataclass
class GhostWeights:
    """Subtree block counts W(B), maintained incrementally."""

    subtree_size: dict[BlockId, int] = field(default_factory=dict)

    def add(self, store: ChainStore, bid: BlockId) -> None:
        self.subtree_size[bid] = 1
        cur = store.get(bid).pred
        while cur is not None:
            self.subtree_size[cur] = self.subtree_size.get(cur, 1) + 1
            cur = store.get(cur).pred


def ghost_fork_choice(store: ChainStore, weights: GhostWeights, known: set[BlockId]) -> BlockId:
    """Greedy heaviest-subtree descent from genesis; ties to smallest id."""
    cur = store.genesis
    while True:
        kids = [k for k in store.children(cur) if k in known]
        if not kids:
            return cur
        cur = min(kids, key=lambda k: (-weights.subtree_size.get(k, 1), k))


def subtree_blocks(store: ChainStore, root: BlockId, known: set[BlockId]) -> list[BlockId]:
    out = []
    stack = [root]
    while stack:
        b = stack.pop()
        if b in known or b == root:
            out.append(b)
            stack.extend(store.children(b))
    return out


def exponential_fork_step(
    store: ChainStore,
    spec: ProtocolSpec,
    root: BlockId,
    known: set[BlockId],
    coins: list[CoinId],
    t: int,
) -> list[Block]:
    """Attempt to mine every owned coin on every block of the subtree
    rooted at `root`; return every success."""
    out = []
    for site in sorted(subtree_blocks(store, root, known)):
        for c in coins:
            blk = spec.mine(store, site, c, t)
            if blk is not None:
                out.append(blk)
    return out
