"""Deterministic simulator and analytical toolkit for longest-chain
proof-of-stake protocols: block DAG and ledger, protocol families with
predictability classification, attack strategies, a seeded simulation
engine with a deviation detector, and closed-form race analysis."""

from .analysis import (
    NoSafeWindow,
    RaceQuery,
    exp_fork_trajectory,
    lifetime_threshold,
    min_safe_window,
    race_probability,
    unas_rate_bound,
)
from .chain import Block, BlockId, ChainStore, Transfer
from .engine import RunLog, SimConfig, run
from .protocol import OracleKey, ProtocolSpec, classify, make_p1, make_p2, make_p3, make_random_oracle

__version__ = "0.1.0"

__all__ = [
    "Block",
    "BlockId",
    "ChainStore",
    "Transfer",
    "OracleKey",
    "ProtocolSpec",
    "classify",
    "make_p1",
    "make_p2",
    "make_p3",
    "make_random_oracle",
    "RunLog",
    "SimConfig",
    "run",
    "RaceQuery",
    "NoSafeWindow",
    "race_probability",
    "min_safe_window",
    "lifetime_threshold",
    "unas_rate_bound",
    "exp_fork_trajectory",
    "__version__",
]
