"""Deterministic slot-by-slot simulation under the ideal network model
(zero latency, synchronized clocks, next-slot visibility), the
provable-deviation detector, and run logging, plus two dedicated
experiment drivers (double-spend race trials and subtree forking
against heaviest-subtree fork choice).
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chain import (
    Block,
    BlockId,
    ChainStore,
    CoinId,
    ParticipantId,
    Transfer,
    is_ancestor,
    is_valid,
    owner_at,
    score,
)
from .protocol import (
    OracleKey,
    ProtocolSpec,
    make_p1,
    make_p2,
    make_p3,
    make_random_oracle,
)
from .strategies import (
    DoubleSpendStrategy,
    GhostWeights,
    HonestStrategy,
    MinerView,
    NaiveForkStrategy,
    SelfishStrategy,
    UnasStrategy,
    exponential_fork_step,
    ghost_fork_choice,
)

SCHEMA = "runlog/1"


@dataclass(frozen=True)
class Announcement:
    """A block made public: `at` is the real announcement slot, which may
    exceed the claimed creation slot for withheld blocks."""

    block: Block
    by: ParticipantId
    at: int

    def __post_init__(self) -> None:
        if self.at < self.block.slot:
            raise ValueError("cannot announce a block before its claimed slot")


@dataclass(frozen=True)
class DeviationEvidence:
    """Two same-coin blocks no honest-with-latency miner could have made:
    either the same claimed slot, or a later block whose predecessor
    scores below an earlier block."""

    coin: CoinId
    first: BlockId
    second: BlockId
    kind: str  # "same-slot" or "regressive-predecessor"


def detect(announcements: list[Announcement], store: ChainStore) -> list[DeviationEvidence]:
    """All provable-deviation pairs over the given announcements."""
    det = Detector(store)
    out = []
    for ann in announcements:
        out.extend(det.observe(ann))
    return out


class Detector:
    """Incremental global observer of announcements."""

    def __init__(self, store: ChainStore, cap: int = 500):
        self.store = store
        self.cap = cap
        self._seen: dict[CoinId, list[tuple[int, int, int, BlockId]]] = {}
        # Per-coin screens so the common case (no deviation possible
        # against anything seen so far) is O(1) per announcement; the
        # full pairwise scan runs only when a screen trips.
        self._slots: dict[CoinId, set[int]] = {}
        self._max_score: dict[CoinId, int] = {}
        self._max_slot: dict[CoinId, int] = {}
        self.total = 0

    def observe(self, ann: Announcement) -> list[DeviationEvidence]:
        b = ann.block
        s = score(self.store, b.id)
        pred_s = s - 1
        prior = self._seen.setdefault(b.coin, [])
        slots = self._slots.setdefault(b.coin, set())
        out = []
        if self.total < self.cap and prior:
            # A same-slot pair needs b.slot among prior slots; an
            # earlier block outscoring this one's predecessor needs a
            # prior score above pred_s; a later-slot prior losing to
            # this block needs a prior slot above b.slot.
            possible = (
                b.slot in slots
                or self._max_score[b.coin] > pred_s
                or self._max_slot[b.coin] > b.slot
            )
            if possible:
                for slot, sc, psc, bid in prior:
                    if slot == b.slot:
                        out.append(DeviationEvidence(b.coin, bid, b.id, "same-slot"))
                    elif slot < b.slot and sc > pred_s:
                        out.append(DeviationEvidence(b.coin, bid, b.id, "regressive-predecessor"))
                    elif slot > b.slot and s > psc:
                        out.append(DeviationEvidence(b.coin, b.id, bid, "regressive-predecessor"))
                    if self.total + len(out) >= self.cap:
                        break
        self.total += len(out)
        prior.append((b.slot, s, pred_s, b.id))
        slots.add(b.slot)
        if b.coin not in self._max_score:
            self._max_score[b.coin] = s
            self._max_slot[b.coin] = b.slot
        else:
            if s > self._max_score[b.coin]:
                self._max_score[b.coin] = s
            if b.slot > self._max_slot[b.coin]:
                self._max_slot[b.coin] = b.slot
        return out


def honest_explanation(
    announcements: list[Announcement], store: ChainStore
) -> "list[dict] | str":
    """For one coin's announcements: a monotone awareness schedule under
    which an honest (possibly latency-afflicted) miner would have produced
    exactly these blocks, or "impossible" when a provable deviation
    exists.

    The schedule makes the miner aware, at each block's claimed slot, of
    exactly its predecessor's chain plus everything from earlier blocks;
    absent deviations each predecessor is then the best tip seen."""
    coins = {a.block.coin for a in announcements}
    if len(coins) > 1:
        raise ValueError("explanation applies to a single coin's announcements")
    if detect(announcements, store):
        return "impossible"
    ordered = sorted(announcements, key=lambda a: (a.block.slot, a.block.id))
    aware: set[BlockId] = set()
    schedule = []
    for ann in ordered:
        b = ann.block
        cur: Optional[BlockId] = b.pred
        while cur is not None and cur not in aware:
            aware.add(cur)
            cur = store.get(cur).pred
        schedule.append({"slot": b.slot, "mined": b.id.hex(), "aware": sorted(x.hex() for x in aware)})
        aware.add(b.id)
    return schedule


@dataclass
class SimConfig:
    """Everything a run depends on.  Coin ids are assigned sequentially
    over the participant list, so the allocation is implied by the coin
    counts."""

    protocol: dict
    participants: list[dict]
    slots: int
    seed: int
    detector: bool = True
    schema: str = "simconfig/1"

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - {"schema", "protocol", "participants", "slots", "seed", "detector"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for req in ("protocol", "participants", "slots", "seed"):
            if req not in d:
                raise ValueError(f"config missing required key: {req}")
        return cls(
            protocol=d["protocol"],
            participants=d["participants"],
            slots=int(d["slots"]),
            seed=int(d["seed"]),
            detector=bool(d.get("detector", True)),
            schema=d.get("schema", "simconfig/1"),
        )

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "protocol": self.protocol,
            "participants": self.participants,
            "slots": self.slots,
            "seed": self.seed,
            "detector": self.detector,
        }


@dataclass
class RunLog:
    config: dict
    records: list[dict]
    summary: dict

    def to_jsonl(self) -> str:
        lines = [json.dumps({"schema": SCHEMA, "config": self.config}, sort_keys=True, separators=(",", ":"))]
        for rec in self.records:
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        lines.append(json.dumps({"summary": self.summary}, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"


def _derive_key_seed(seed: int) -> bytes:
    return hashlib.blake2b(b"oracle" + seed.to_bytes(16, "big", signed=True), digest_size=32).digest()


def build_protocol(cfg: dict, seed: int, n_coins: int) -> ProtocolSpec:
    name = cfg.get("name", "oracle")
    p = float(cfg["p"])
    freeze = int(cfg.get("freeze", 1))
    key = OracleKey(_derive_key_seed(seed), n_coins)
    if name == "oracle":
        return make_random_oracle(p, int(cfg.get("ell", 1)), key, freeze=freeze)
    if name == "p1":
        return make_p1(p, key, freeze=freeze)
    if name == "p2":
        return make_p2(p, key, freeze=freeze)
    if name == "p3":
        return make_p3(p, key, freeze=freeze)
    raise ValueError(f"unknown protocol name: {name}")


def _build_strategies(config: SimConfig, allocation: dict[CoinId, ParticipantId]):
    coins_of: dict[ParticipantId, list[CoinId]] = {}
    for c, pid in allocation.items():
        coins_of.setdefault(pid, []).append(c)
    all_coins = sorted(allocation)
    strategies = []
    for part in config.participants:
        pid = int(part["id"])
        kind = part.get("kind", "honest")
        params = part.get("params", {})
        coins = coins_of.get(pid, [])
        others = [c for c in all_coins if allocation[c] != pid]
        if kind == "honest":
            strategies.append(HonestStrategy(pid, coins))
        elif kind == "unas":
            strategies.append(UnasStrategy(pid, coins, int(params.get("depth", 1))))
        elif kind == "naive-fork":
            strategies.append(NaiveForkStrategy(pid, coins))
        elif kind == "selfish":
            strategies.append(
                SelfishStrategy(
                    pid,
                    coins,
                    others,
                    dict(allocation),
                    mode=params.get("mode", "global"),
                    horizon=int(params.get("horizon", 256)),
                    k_max=int(params.get("k_max", 32)),
                )
            )
        elif kind == "double-spend":
            tx = Transfer(int(params["tx_coin"]), pid, int(params["tx_to"]))
            strategies.append(
                DoubleSpendStrategy(
                    pid,
                    coins,
                    others,
                    dict(allocation),
                    tx=tx,
                    confirm_depth=int(params.get("z", 3)),
                    horizon=int(params.get("horizon", 256)),
                    abort_policy=params.get("abort_policy", "discard"),
                )
            )
        else:
            raise ValueError(f"unknown strategy kind: {kind}")
    return strategies


def _lca_depth(store: ChainStore, a: BlockId, b: BlockId) -> int:
    """Score of the lowest common ancestor of a and b."""
    sa, sb = score(store, a), score(store, b)
    while sa > sb:
        a = store.get(a).pred  # type: ignore[assignment]
        sa -= 1
    while sb > sa:
        b = store.get(b).pred  # type: ignore[assignment]
        sb -= 1
    while a != b:
        a = store.get(a).pred  # type: ignore[assignment]
        b = store.get(b).pred  # type: ignore[assignment]
        sa -= 1
    return sa


def run(config: SimConfig) -> RunLog:
    """Execute the slot loop: every strategy acts once per slot on a view
    containing all announcements from strictly earlier slots plus its own
    blocks; announcements collected during a slot become visible at the
    next one.  Pure function of the config."""
    if config.slots < 1:
        raise ValueError("slots must be >= 1")
    allocation: dict[CoinId, ParticipantId] = {}
    next_coin = 0
    for part in config.participants:
        for _ in range(int(part["coins"])):
            allocation[next_coin] = int(part["id"])
            next_coin += 1
    if not allocation:
        raise ValueError("no coins allocated")
    spec = build_protocol(config.protocol, config.seed, next_coin)
    store = ChainStore(dict(allocation))
    strategies = _build_strategies(config, allocation)
    order = list(range(len(strategies)))
    random.Random(config.seed).shuffle(order)

    known: set[BlockId] = {store.genesis}
    tips: set[BlockId] = {store.genesis}
    tx_pool: list[Transfer] = []
    public_tip = store.genesis
    best_score = 0
    detector = Detector(store) if config.detector else None
    evidences: list[DeviationEvidence] = []
    announcements: list[Announcement] = []
    records: list[dict] = []
    rejected = 0
    max_reorg = 0
    announced_by: dict[ParticipantId, int] = {int(p["id"]): 0 for p in config.participants}

    for t in range(1, config.slots + 1):
        view = MinerView(known=known, public_tip=public_tip, tips=tips, clock=t, tx_pool=tx_pool)
        pending: list[Announcement] = []
        for i in order:
            strat = strategies[i]
            for blk in strat.step(view, store, spec):
                pending.append(Announcement(blk, strat.participant, t))
        if not pending:
            continue
        rec_anns = []
        for ann in pending:
            b = ann.block
            bid = b.id
            if bid in known:
                rejected += 1
                continue
            if not is_valid(store, b, t, spec):
                rejected += 1
                continue
            store.add(b)
            known.add(bid)
            tips.discard(b.pred)  # type: ignore[arg-type]
            tips.add(bid)
            announcements.append(ann)
            announced_by[ann.by] = announced_by.get(ann.by, 0) + 1
            if detector is not None:
                evidences.extend(detector.observe(ann))
            s = score(store, bid)
            if s > best_score or (s == best_score and bid < public_tip):
                if not is_ancestor(store, public_tip, bid):
                    max_reorg = max(max_reorg, best_score - _lca_depth(store, public_tip, bid))
                public_tip = bid
                best_score = s
            rec_anns.append(
                {
                    "id": bid.hex(),
                    "by": ann.by,
                    "coin": b.coin,
                    "slot": b.slot,
                    "at": ann.at,
                    "pred": b.pred.hex(),  # type: ignore[union-attr]
                    "score": s,
                }
            )
        if rec_anns:
            records.append(
                {"t": t, "announcements": rec_anns, "tip": public_tip.hex(), "score": best_score}
            )
        # Judge freshly released withheld chains: risk-free means the
        # released tip is the unique best block the moment it lands.
        for strat in strategies:
            if isinstance(strat, SelfishStrategy) and strat.episodes:
                ep = strat.episodes[-1]
                if ep.released and ep.unique_best is None and ep.tip_id in known:
                    s = score(store, ep.tip_id)
                    rivals = [
                        bb for bb in store.at_height(s) if bb != ep.tip_id and bb in known
                    ]
                    ep.unique_best = public_tip == ep.tip_id and not rivals

    summary = _summarize(
        config, store, spec, strategies, announcements, announced_by,
        evidences, public_tip, best_score, max_reorg, rejected,
    )
    return RunLog(config=config.to_dict(), records=records, summary=summary)


def _summarize(
    config, store, spec, strategies, announcements, announced_by,
    evidences, public_tip, best_score, max_reorg, rejected,
) -> dict:
    # Final-chain attribution.
    on_chain: dict[ParticipantId, int] = {}
    cur = public_tip
    while cur != store.genesis:
        blk = store.get(cur)
        on_chain[blk.miner] = on_chain.get(blk.miner, 0) + 1
        cur = blk.pred  # type: ignore[assignment]
    chain_len = best_score

    per_miner = {}
    honest_rates = []
    evidence_by = {}
    by_coin_owner = {}
    for part in config.participants:
        pid = int(part["id"])
        n_coins = int(part["coins"])
        announced = announced_by.get(pid, 0)
        rate = announced / config.slots / n_coins if n_coins else 0.0
        per_miner[str(pid)] = {
            "kind": part.get("kind", "honest"),
            "coins": n_coins,
            "announced": announced,
            "on_chain": on_chain.get(pid, 0),
            "share": (on_chain.get(pid, 0) / chain_len) if chain_len else 0.0,
            "announce_rate_per_coin": rate,
        }
        if part.get("kind", "honest") == "honest":
            honest_rates.append(rate)
        by_coin_owner[pid] = part.get("kind", "honest")
    honest_rate = sum(honest_rates) / len(honest_rates) if honest_rates else 0.0
    rate_ratio = {
        pid: (m["announce_rate_per_coin"] / honest_rate if honest_rate else None)
        for pid, m in per_miner.items()
        if m["kind"] != "honest"
    }
    ann_by_block = {a.block.id: a.by for a in announcements}
    for ev in evidences:
        culprit = ann_by_block.get(ev.second)
        if culprit is not None:
            evidence_by[str(culprit)] = evidence_by.get(str(culprit), 0) + 1

    episodes = []
    double_spend = None
    for strat in strategies:
        if isinstance(strat, SelfishStrategy):
            for ep in strat.episodes:
                episodes.append(
                    {
                        "by": strat.participant,
                        "trigger_slot": ep.trigger_slot,
                        "k": ep.k,
                        "release_at": ep.release_at,
                        "released": ep.released,
                        "abandoned": ep.abandoned,
                        "unique_best_at_release": ep.unique_best,
                    }
                )
        if isinstance(strat, DoubleSpendStrategy):
            st = strat.state
            success = None
            if st.phase == "released" and st.released_tip is not None:
                success = bool(
                    st.goods_at is not None
                    and is_ancestor(store, st.released_tip, public_tip)
                )
            elif st.phase == "aborted":
                success = False
            double_spend = {
                "by": strat.participant,
                "phase": st.phase,
                "confirm_depth": st.confirm_depth,
                "goods_at": st.goods_at,
                "success": success,
            }

    return {
        "schema": SCHEMA,
        "slots": config.slots,
        "seed": config.seed,
        "final_tip": public_tip.hex(),
        "final_score": best_score,
        "blocks_announced": len(announcements),
        "blocks_rejected": rejected,
        "max_reorg_depth": max_reorg,
        "per_miner": per_miner,
        "honest_per_coin_rate": honest_rate,
        "rate_ratio": rate_ratio,
        "detector": {
            "events": len(evidences),
            "by_participant": evidence_by,
            "kinds": sorted({e.kind for e in evidences}),
        },
        "withhold_episodes": episodes,
        "double_spend": double_spend,
    }


def metrics(log: RunLog) -> dict:
    """Headline numbers from a completed run."""
    s = log.summary
    return {
        "final_score": s["final_score"],
        "shares": {pid: m["share"] for pid, m in s["per_miner"].items()},
        "rate_ratio": s["rate_ratio"],
        "honest_per_coin_rate": s["honest_per_coin_rate"],
        "detector_events": s["detector"]["events"],
        "max_reorg_depth": s["max_reorg_depth"],
        "withhold_episodes": len(s["withhold_episodes"]),
        "double_spend": s["double_spend"],
    }


def _first_success(
    key: OracleKey, anchor: bytes, coins: list[CoinId], s0: int, p: float, limit: int = 1 << 16
) -> Optional[tuple[int, list[CoinId]]]:
    """Earliest slot >= s0 at which any coin's draw on `anchor` succeeds,
    scanning one oracle chunk at a time."""
    s = s0
    while s < s0 + limit:
        hi = s + 256
        rows = np.stack([key.row(anchor, c, s, hi) for c in coins])
        hits = rows < p
        cols = hits.any(axis=0)
        idx = int(np.argmax(cols))
        if cols[idx]:
            slot = s + idx
            return slot, [coins[j] for j in np.flatnonzero(hits[:, idx])]
        s = hi
    return None


def run_double_spend_trials(
    attacker_coins: int,
    total_coins: int,
    z: int,
    trials: int,
    seed: int,
    p: float = 0.002,
) -> dict:
    """Double-spend race experiment: per trial, the attacker privately
    chains z blocks from genesis while the rest of the network builds the
    public chain carrying the payment; success iff the attacker's z-th
    block lands strictly earlier (ties lose).  This is the event whose
    probability the 2z-1-flip binomial race formula gives.
    """
    vendor = 999
    tx_coin = total_coins  # extra, non-mining coin owned by the attacker
    att_coins = list(range(attacker_coins))
    oth_coins = list(range(attacker_coins, total_coins))
    successes = 0
    for trial in range(trials):
        trial_seed = hashlib.blake2b(
            b"ds" + seed.to_bytes(16, "big", signed=True) + trial.to_bytes(8, "big"),
            digest_size=32,
        ).digest()
        key = OracleKey(trial_seed, total_coins + 1)
        t_att = _race_chain_time(key, b"G", att_coins, z, p)
        t_pub = _race_chain_time(key, b"G", oth_coins, z, p)
        if t_att is not None and (t_pub is None or t_att < t_pub):
            successes += 1
    freq = successes / trials
    stderr = float(np.sqrt(max(freq * (1 - freq), 1e-12) / trials))
    return {
        "alpha": attacker_coins / total_coins,
        "z": z,
        "trials": trials,
        "successes": successes,
        "frequency": freq,
        "stderr": stderr,
        "tx": {"coin": tx_coin, "to": vendor},
    }


def _race_chain_time(
    key: OracleKey, root: bytes, coins: list[CoinId], levels: int, p: float
) -> Optional[int]:
    """Slot at which a chain of `levels` blocks completes, extending the
    earliest success each level (smallest-id winner on ties), recency-1
    anchoring."""
    anchor = root
    s = 1
    t_done = None
    for level in range(levels):
        hit = _first_success(key, anchor, coins, s, p)
        if hit is None:
            return None
        slot, winners = hit
        cands = [Block(pred=anchor.ljust(16, b"\0"), miner=0, slot=slot, coin=c) for c in winners]
        anchor = min(b.id for b in cands)
        s = slot + 1
        t_done = slot
    return t_done


def run_ghost_experiment(alpha: float, seeds: int, seed0: int = 0, horizon: int = 50) -> list[dict]:
    """Subtree forking against heaviest-subtree fork choice.

    Setup: genesis has two children, an honest branch of two blocks and
    the attacker's fork root R.  From then on an aggregate honest miner
    adds one block per slot with probability 1 - alpha at its fork
    choice, and the attacker tries every block of subtree(R) at per-site
    rate alpha.  Records subtree sizes and whether the honest fork choice
    has been captured into subtree(R) after `horizon` slots."""
    results = []
    for i in range(seeds):
        key_seed = hashlib.blake2b(
            b"ghost" + seed0.to_bytes(16, "big", signed=True) + i.to_bytes(8, "big"),
            digest_size=32,
        ).digest()
        key = OracleKey(key_seed, 2)
        alloc = {0: 0, 1: 1}  # coin 0: attacker, coin 1: aggregate honest
        store = ChainStore(alloc)

        def p_of(c: CoinId) -> float:
            return alpha if c == 0 else 1.0 - alpha

        def validate(st: ChainStore, b: Block) -> bool:
            if b.slot <= 2:
                return True
            return key.unit(b.pred, b.coin, b.slot) < p_of(b.coin)  # type: ignore[arg-type]

        def mine(st: ChainStore, tip: BlockId, c: CoinId, t: int) -> Optional[Block]:
            if t <= st.get(tip).slot:
                return None
            miner = owner_at(st, tip, c)
            if t > 2 and not key.unit(tip, c, t) < p_of(c):
                return None
            return Block(pred=tip, miner=miner, slot=t, coin=c)

        spec = ProtocolSpec(
            name="ghost-oracle",
            freeze=1,
            success_prob=alpha,
            key=key,
            validate=validate,
            mine=mine,
            recency_ell=1,
            profile=None,  # type: ignore[arg-type]
            oracle_scope="realized",
            builtin=False,
        )
        h1 = mine(store, store.genesis, 1, 1)
        store.add(h1)  # type: ignore[arg-type]
        h2 = mine(store, h1.id, 1, 2)  # type: ignore[union-attr]
        store.add(h2)  # type: ignore[arg-type]
        r_block = mine(store, store.genesis, 0, 2)
        root = store.add(r_block)  # type: ignore[arg-type]
        known = {store.genesis, h1.id, h2.id, root}  # type: ignore[union-attr]
        weights = GhostWeights()
        for b in (h1, h2, r_block):
            weights.add(store, b.id)  # type: ignore[union-attr]

        sizes = {}
        captured_at = None
        for k in range(1, horizon + 1):
            t = 2 + k
            choice = ghost_fork_choice(store, weights, known)
            new_blocks = []
            hb = mine(store, choice, 1, t)
            if hb is not None:
                new_blocks.append(hb)
            new_blocks.extend(
                exponential_fork_step(store, spec, root, known, [0], t)
            )
            for b in new_blocks:
                bid = store.add(b)
                known.add(bid)
                weights.add(store, bid)
            sizes[k] = weights.subtree_size.get(root, 1)
            if captured_at is None:
                post_choice = ghost_fork_choice(store, weights, known)
                if is_ancestor(store, root, post_choice):
                    captured_at = k
        final_choice = ghost_fork_choice(store, weights, known)
        results.append(
            {
                "seed": i,
                "sizes": sizes,
                "captured_at": captured_at,
                "captured": bool(is_ancestor(store, root, final_choice)),
            }
        )
    return results
