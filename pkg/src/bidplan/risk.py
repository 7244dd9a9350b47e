"""Stochastic shortfall protection: supply inflation and chance-constrained bids.

Planning against averages leaves roughly even odds of missing a contract.
Inflating the required quantity to (1 + delta) * C hedges that; for Poisson
win counts the Chernoff bound gives delta in closed form through the lower
branch of the Lambert-W function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from bidplan.market import make_contract

BRANCH_POINT = -1.0 / math.e


@dataclass(frozen=True)
class RiskConfig:
    """Shortfall hedging knob: either a direct inflation fraction delta,
    or a risk tolerance epsilon that drives delta through the Poisson model.

    Exactly one of the two may be set.
    """

    delta: float | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if (self.delta is None) == (self.epsilon is None):
            raise ValueError("set exactly one of delta, epsilon")
        if self.delta is not None and self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.epsilon is not None and not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    def delta_for(self, quantity, horizon):
        """Effective inflation for one contract's residual (C, T).

        With epsilon configured, the Poisson formula is applied per contract
        with its own C and T; this is a heuristic extension of the
        single-contract analysis.  Residuals below one item skip inflation
        (the formula blows up as C -> 0 and there is nothing left to hedge).
        """
        if self.delta is not None:
            return self.delta
        if quantity < 1.0 or horizon <= 0.0:
            return 0.0
        return poisson_delta(self.epsilon, quantity, horizon)


def inflate_demand(contracts, delta):
    """Scale every contract quantity by (1 + delta), all else unchanged."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return list(contracts)
    return [make_contract(c.id, c.eligible_types,
                          (1.0 + delta) * c.quantity, c.deadline)
            for c in contracts]


def lambert_w_minus1(v, tol=1e-10):
    """Lower branch of the Lambert-W function on [-1/e, 0).

    Returns the x <= -1 with x * exp(x) = v, by bisection on the monotone
    branch followed by Newton polish.  Series expansions misbehave near the
    branch point, bracketing does not.
    """
    if not BRANCH_POINT <= v < 0.0:
        raise ValueError(f"v={v} outside [-1/e, 0)")
    if v == BRANCH_POINT:
        return -1.0
    # x*e^x decreases from -1/e to 0 on (-inf, -1]; expand until we bracket
    lo = -2.0
    while lo * math.exp(lo) < v:
        lo *= 2.0
        if lo < -1e6:
            break
    # invariant: f(lo) >= v >= f(hi) with f(x) = x*e^x decreasing in x here
    hi = -1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * math.exp(mid) < v:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12 * max(1.0, abs(lo)):
            break
    x = 0.5 * (lo + hi)
    for _ in range(50):
        ex = math.exp(x)
        f = x * ex - v
        if abs(f) <= tol * max(abs(v), 1e-300):
            break
        df = ex * (1.0 + x)
        if df == 0.0:
            break
        step = f / df
        x_new = x - step
        if not lo <= x_new <= hi:
            x_new = 0.5 * (lo + hi)
        x = x_new
    return min(x, -1.0)


def poisson_delta(epsilon, quantity, horizon):
    """Inflation fraction making the Poisson-Chernoff shortfall bound <= epsilon.

    delta = -W_{-1}(-(1/e) * epsilon^(T/C)) - 1, which is >= 0 because the
    lower branch is <= -1.  Plugging (1 + delta) * C / T back into the bound
    recovers epsilon up to round-off.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if quantity <= 0 or horizon <= 0:
        raise ValueError("quantity and horizon must be positive")
    arg = -math.exp(-1.0) * epsilon ** (horizon / quantity)
    arg = max(arg, BRANCH_POINT)  # guard round-off below the branch point
    return max(0.0, -lambert_w_minus1(arg) - 1.0)


def chernoff_shortfall_bound(win_rate, quantity, horizon):
    """Poisson upper tail bound P(wins >= C) complement driver:
    (e*W)^(C/T) * e^(-W) / (C/T)^(C/T), valid for W >= C/T."""
    v = quantity / horizon
    if win_rate < v:
        raise ValueError("bound requires win_rate >= quantity/horizon")
    return math.exp(v * (1.0 + math.log(win_rate)) - win_rate - v * math.log(v))


class ChanceBidError(RuntimeError):
    pass


def chance_bid(epsilon, quantity, horizon, tail, bid_range=(0.0, 1.0),
               resolution=1e-6):
    """Smallest bid whose success probability tail(x) reaches 1 - epsilon.

    `tail` must be monotone non-decreasing in the bid and already encode the
    required rate quantity/horizon.  Bisection over bid_range to the given
    resolution; an unreachable target raises a structured error.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    lo, hi = map(float, bid_range)
    if not hi > lo:
        raise ValueError("empty bid range")
    target = 1.0 - epsilon
    if tail(hi) < target:
        raise ChanceBidError(
            f"no feasible bid: tail({hi}) = {tail(hi):.6f} < {target:.6f} "
            f"for quantity {quantity} over {horizon} hours")
    if tail(lo) >= target:
        return lo
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if tail(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi
