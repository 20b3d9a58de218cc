"""Closed-form race analysis: binomial race probabilities in log space,
safe confirmation windows, lifetime failure thresholds, the
nothing-at-stake announce-rate bound, and expected fork trajectories,
plus Monte Carlo / exhaustive cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import gammaln, logsumexp


@dataclass(frozen=True)
class RaceQuery:
    """A race of length ell against an attacker holding stake alpha: the
    attacker wins iff it gets at least ell heads among 2*ell - 1
    Bernoulli(alpha) flips."""

    alpha: float
    ell: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ell < 1:
            raise ValueError(f"ell must be >= 1, got {self.ell}")


@dataclass(frozen=True)
class SafetyPolicy:
    """Failure tolerance per block derived from a lifetime budget."""

    tolerance: float
    lifetime_blocks: Optional[int] = None
    lifetime_failure: Optional[float] = None


class NoSafeWindow(Exception):
    """No race length is safe: the attacker wins with probability >= 1/2."""


def log_race_probability(alpha: float, ell: int) -> float:
    """log of the binomial upper tail P[X >= ell], X ~ Bin(2*ell - 1, alpha)."""
    if alpha <= 0.0:
        return -math.inf
    if alpha >= 1.0:
        return 0.0
    n = 2 * ell - 1
    la, lb = math.log(alpha), math.log1p(-alpha)
    lgn = gammaln(n + 1)
    i = np.arange(ell, n + 1)
    terms = lgn - gammaln(i + 1) - gammaln(n - i + 1) + i * la + (n - i) * lb
    return float(logsumexp(terms))


def race_probability(q: RaceQuery) -> float:
    """Probability the attacker wins the race; representable down to
    ~1e-300 via log-space evaluation."""
    return math.exp(log_race_probability(q.alpha, q.ell))


def lifetime_threshold(blocks: int, failure: float) -> float:
    """Per-block tolerance so that a union bound over the chain's lifetime
    keeps total failure probability at most `failure`."""
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    return failure / blocks


def min_safe_window(alpha: float, tolerance: float) -> int:
    """Smallest ell with race_probability(alpha, ell) < tolerance.

    Monotone in ell for alpha < 1/2, so an exponential bracket plus
    binary search suffices.  Raises NoSafeWindow for alpha >= 1/2.
    """
    if not 0.0 <= alpha:
        raise ValueError("alpha must be nonnegative")
    if not 0.0 < tolerance < 1.0:
        raise ValueError("tolerance must lie in (0, 1)")
    if alpha >= 0.5:
        raise NoSafeWindow(f"alpha = {alpha} wins every race with p >= 1/2")
    log_t = math.log(tolerance)
    if log_race_probability(alpha, 1) < log_t:
        return 1
    hi = 1
    while log_race_probability(alpha, hi) >= log_t:
        hi *= 2
    lo = hi // 2  # p(lo) >= T, p(hi) < T
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if log_race_probability(alpha, mid) < log_t:
            hi = mid
        else:
            lo = mid
    return hi


def unas_rate_bound(d: int, lam: int) -> tuple[float, bool]:
    """Announce-rate multiplier 2 - 2D/(lambda+1) achievable by a
    nothing-at-stake miner, and whether the configuration is one a
    protocol must defend against (D < lambda/2)."""
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    return 2.0 - 2.0 * d / (lam + 1), d < lam / 2


def exp_fork_trajectory(alpha: float, x0: float, y0: float, k: int) -> tuple[float, float]:
    """Expected (attacker subtree size, honest block count) after k slots
    under per-site forking: x_t = (1+alpha) x_{t-1}, y_t = y_{t-1} + (1-alpha)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return x0 * (1.0 + alpha) ** k, y0 + (1.0 - alpha) * k


def exhaustive_race(alpha: float, ell: int) -> float:
    """Exact race probability by enumerating all 2^(2*ell-1) outcomes,
    weighting each by its probability.  Independent oracle for small ell."""
    if ell > 6:
        raise ValueError("exhaustive enumeration supported for ell <= 6 only")
    n = 2 * ell - 1
    total = 0.0
    # Kahan-compensated accumulation over popcount-grouped outcomes.
    comp = 0.0
    for mask in range(2**n):
        heads = bin(mask).count("1")
        if heads < ell:
            continue
        term = alpha**heads * (1.0 - alpha) ** (n - heads)
        y = term - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def monte_carlo_race(
    alpha: float, ell: int, trials: int, seed: int
) -> tuple[float, float]:
    """Sampled race probability and its standard error; 2*ell - 1 flips
    per trial, success = at least ell heads."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = 2 * ell - 1
    rng = np.random.Generator(np.random.Philox(key=seed))
    wins = 0
    batch = max(1, min(trials, 10**7 // max(n, 1)))
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        heads = (rng.random((m, n)) < alpha).sum(axis=1)
        wins += int((heads >= ell).sum())
        done += m
    p_hat = wins / trials
    stderr = math.sqrt(max(p_hat * (1.0 - p_hat), 1e-300) / trials)
    return p_hat, stderr


def sweep_alpha(tolerance: float, alphas: Iterable[float]) -> list[dict]:
    """Rows of (alpha, ell*, race probability at ell*) for plotting the
    stake-vs-window curve; alpha >= 1/2 rows are flagged unsafe."""
    rows = []
    for a in alphas:
        try:
            ell_star = min_safe_window(a, tolerance)
            rows.append(
                {
                    "alpha": a,
                    "ell_star": ell_star,
                    "p_at_ell_star": math.exp(log_race_probability(a, ell_star)),
                    "safe": True,
                }
            )
        except NoSafeWindow:
            rows.append({"alpha": a, "ell_star": None, "p_at_ell_star": None, "safe": False})
    return rows
