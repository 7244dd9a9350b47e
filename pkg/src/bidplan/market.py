"""Supply rate curves, auction cost functions, and acquisition costs.

The market model is tabular: a curve stores a bid grid, hourly time knots,
a win-probability table (monotone piecewise-linear in the bid, linear in
time) and an arrival-rate vector.  All downstream planning consumes these
tables, so estimation output plugs in directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

SCHEMA_VERSION = 1

#: Distinguished sentinel for rates/bids outside the attainable range.
#: Always ``math.inf``, never a large finite float, so callers can test
#: for it exactly.
INFEASIBLE = math.inf


class Mechanism(Enum):
    """Auction payment rule: pay your bid, or pay the highest competing bid."""

    FIRST_PRICE = "first"
    SECOND_PRICE = "second"


@dataclass(frozen=True)
class ItemType:
    """One auctionable item category, densely indexed."""

    id: int
    label: str


@dataclass(frozen=True, order=True)
class Contract:
    """Obligation to win `quantity` items of any eligible type by `deadline`.

    Sort order is by deadline, so a sorted contract list runs in
    deadline order.
    """

    deadline: float
    id: int
    eligible_types: frozenset
    quantity: float

    def __post_init__(self):
        if not self.eligible_types:
            raise ValueError(f"contract {self.id}: eligible_types is empty")
        if self.quantity < 0:
            raise ValueError(f"contract {self.id}: quantity {self.quantity} < 0")
        if self.deadline <= 0:
            raise ValueError(f"contract {self.id}: deadline {self.deadline} <= 0")
        object.__setattr__(self, "eligible_types", frozenset(self.eligible_types))


def make_contract(id, eligible_types, quantity, deadline):
    return Contract(deadline=float(deadline), id=int(id),
                    eligible_types=frozenset(int(j) for j in eligible_types),
                    quantity=float(quantity))


class CurveValidationError(ValueError):
    pass


class SupplyCurve:
    """Expected items won per hour as a function of bid and time.

    W(x, t) = rate(t) * win_prob(x, t).  The win probability is tabulated on
    ``bid_grid`` per time knot, interpolated piecewise-linearly (monotone) in
    the bid and linearly in time.  Bids below the grid clamp to the smallest
    tabulated win probability; bids at or above ``max_bid`` saturate.  Curves
    whose time knots span exactly 24 hours wrap periodically.

    Instances are immutable after construction and safe to share across
    concurrent workers.
    """

    def __init__(self, bid_grid, time_knots, win_prob, rate, max_bid=None):
        bid_grid = np.asarray(bid_grid, dtype=float)
        time_knots = np.asarray(time_knots, dtype=float)
        win_prob = np.atleast_2d(np.asarray(win_prob, dtype=float))
        rate = np.atleast_1d(np.asarray(rate, dtype=float))
        if bid_grid.ndim != 1 or len(bid_grid) < 2:
            raise CurveValidationError("bid_grid needs at least two points")
        if np.any(np.diff(bid_grid) <= 0):
            raise CurveValidationError("bid_grid must be strictly increasing")
        if time_knots.ndim != 1 or len(time_knots) < 1:
            raise CurveValidationError("need at least one time knot")
        if len(time_knots) > 1 and np.any(np.diff(time_knots) <= 0):
            raise CurveValidationError("time_knots must be strictly increasing")
        if win_prob.shape != (len(time_knots), len(bid_grid)):
            raise CurveValidationError(
                f"win_prob shape {win_prob.shape} != "
                f"({len(time_knots)}, {len(bid_grid)})")
        if rate.shape != (len(time_knots),):
            raise CurveValidationError("rate must have one value per time knot")
        if np.any(win_prob <= 0):
            raise CurveValidationError("win probabilities must be > 0 on the grid")
        if np.any(win_prob > 1 + 1e-12):
            raise CurveValidationError("win probabilities must be <= 1")
        if np.any(rate < 0):
            raise CurveValidationError("rates must be >= 0")
        # strictly increasing in the bid up to saturation, flat after; the
        # saturated zone starts where the row comes within float resolution
        # of its final value, so 1-ulp plateaus in a KDE tail don't trip it
        for ti in range(win_prob.shape[0]):
            row = win_prob[ti]
            near_end = (row[-1] - row) <= 1e-9 * max(row[-1], 1.0)
            sat = int(np.argmax(near_end)) if near_end.any() else len(row)
            d = np.diff(row)
            if np.any(d[:sat] <= 0):
                raise CurveValidationError(
                    f"win_prob row {ti} not strictly increasing before saturation")
            if np.any(np.abs(d[sat:]) > 1e-9 * max(row[-1], 1.0)):
                raise CurveValidationError(
                    f"win_prob row {ti} not flat after saturation")
        self.bid_grid = bid_grid
        self.time_knots = time_knots
        self.win_prob = win_prob
        self.rate = rate
        self.max_bid = float(max_bid) if max_bid is not None else float(bid_grid[-1])
        span = time_knots[-1] - time_knots[0]
        self.periodic = bool(abs(span - 24.0) < 1e-9)
        for arr in (self.bid_grid, self.time_knots, self.win_prob, self.rate):
            arr.flags.writeable = False

    # -- time handling -------------------------------------------------

    def _wrap(self, t):
        t0 = self.time_knots[0]
        if self.periodic:
            return t0 + (t - t0) % 24.0
        return min(max(t, t0), self.time_knots[-1])

    def _time_weights(self, t):
        """Indices (lo, hi) and weight of hi for linear interpolation in t."""
        if len(self.time_knots) == 1:
            return 0, 0, 0.0
        tw = self._wrap(t)
        hi = int(np.searchsorted(self.time_knots, tw, side="right"))
        hi = min(max(hi, 1), len(self.time_knots) - 1)
        lo = hi - 1
        dt = self.time_knots[hi] - self.time_knots[lo]
        return lo, hi, (tw - self.time_knots[lo]) / dt

    def win_prob_row(self, t):
        lo, hi, w = self._time_weights(t)
        if w == 0.0:
            return self.win_prob[lo]
        return (1.0 - w) * self.win_prob[lo] + w * self.win_prob[hi]

    def rate_at(self, t):
        lo, hi, w = self._time_weights(t)
        return float((1.0 - w) * self.rate[lo] + w * self.rate[hi])

    # -- core queries ---------------------------------------------------

    def eval_supply(self, x, t):
        """Expected win rate (items/hour) when bidding x at time t.

        Total on real x: below-grid bids clamp to the smallest tabulated
        win probability, bids past saturation return the supremum.
        """
        row = self.win_prob_row(t)
        g = self.bid_grid
        if x <= g[0]:
            w = row[0]
        elif x >= g[-1]:
            w = row[-1]
        else:
            w = float(np.interp(x, g, row))
        return self.rate_at(t) * float(w)

    def sup_rate(self, t):
        """s̄(t), the largest attainable win rate at time t."""
        return self.rate_at(t) * float(self.win_prob_row(t)[-1])

    def min_rate(self, t):
        """Win rate at the smallest tabulated bid (the below-grid clamp value)."""
        return self.rate_at(t) * float(self.win_prob_row(t)[0])

    def invert_supply(self, s, t):
        """Smallest bid x with eval_supply(x, t) = s.

        Returns the INFEASIBLE sentinel when s exceeds the supremum, and the
        lowest grid bid when s falls below the tabulated range (documented
        clamp; extrapolating below the data would violate positivity).
        """
        if s < 0:
            raise ValueError(f"rate must be nonnegative, got {s}")
        lam = self.rate_at(t)
        row = self.win_prob_row(t)
        vals = lam * row
        if s > vals[-1] * (1 + 1e-12) + 1e-300:
            return INFEASIBLE
        if s <= vals[0]:
            return float(self.bid_grid[0])
        s = min(s, vals[-1])
        # restrict to the strictly increasing head so interp is well posed
        d = np.diff(vals)
        pos = np.nonzero(d > 0)[0]
        cut = pos[-1] + 2 if len(pos) else 1
        return float(np.interp(s, vals[:cut], self.bid_grid[:cut]))

    def cost_rate(self, mechanism, x, t):
        """Expected spend per hour when bidding x on every arrival at time t.

        First price pays the bid on every win: x * W(x, t).  Second price
        pays the highest competing bid: x * W(x, t) - integral of W from 0
        to x, with the integral taken by the trapezoid rule on the bid grid.
        Negative bids never win and cost nothing.
        """
        if x < 0:
            return 0.0
        first = x * self.eval_supply(x, t)
        if mechanism is Mechanism.FIRST_PRICE:
            return first
        return first - self._win_integral(x, t)

    def _win_integral(self, x, t):
        """Trapezoid of u -> eval_supply(u, t) over [0, x]."""
        if x <= 0:
            return 0.0
        g = self.bid_grid
        inner = g[(g > 0) & (g < x)]
        pts = np.concatenate(([0.0], inner, [x]))
        lam = self.rate_at(t)
        row = self.win_prob_row(t)
        w = np.interp(pts, g, row)  # np.interp clamps at both ends
        return float(np.trapezoid(lam * w, pts))

    def acquisition_cost(self, mechanism, s, t):
        """Expected spend per hour of acquiring supply at rate s at time t.

        Extended convex form: 0 below W(0, t), the INFEASIBLE sentinel above
        s̄(t), and cost_rate at the inverting bid otherwise.
        """
        if s < 0:
            raise ValueError(f"rate must be nonnegative, got {s}")
        if s > self.sup_rate(t) * (1 + 1e-12) + 1e-300:
            return INFEASIBLE
        if s < self.eval_supply(0.0, t):
            return 0.0
        x = self.invert_supply(s, t)
        return self.cost_rate(mechanism, x, t)

    def acquisition_profile(self, mechanism, t, rates):
        """Vectorized acquisition_cost over an array of rates at one time.

        Exact agreement with the scalar path: inversion is piecewise-linear
        on the tabulated values and the spend integral is the same trapezoid,
        written in prefix form.
        """
        rates = np.asarray(rates, dtype=float)
        if np.any(rates < 0):
            raise ValueError("rates must be nonnegative")
        lam = self.rate_at(t)
        row = self.win_prob_row(t)
        vals = lam * row
        g = self.bid_grid
        d = np.diff(vals)
        pos = np.nonzero(d > 0)[0]
        cut = pos[-1] + 2 if len(pos) else 1
        vh, gh = vals[:cut], g[:cut]
        # prefix integral of u -> W(u, t) from 0 along the grid head
        head = gh[0] * vh[0] if gh[0] > 0 else 0.0
        prefix = head + np.concatenate(
            [[0.0], np.cumsum(0.5 * (vh[1:] + vh[:-1]) * np.diff(gh))])
        out = np.empty_like(rates)
        too_big = rates > vals[-1] * (1 + 1e-12) + 1e-300
        below = rates < self.eval_supply(0.0, t)
        mid = ~(too_big | below)
        out[too_big] = INFEASIBLE
        out[below] = 0.0
        s = np.clip(rates[mid], vh[0], vh[-1])
        x = np.interp(s, vh, gh)
        if mechanism is Mechanism.FIRST_PRICE:
            out[mid] = np.where(x >= 0, x * s, 0.0)
        else:
            i = np.clip(np.searchsorted(vh, s, side="left"), 1, len(vh) - 1)
            integral = prefix[i - 1] + 0.5 * (x - gh[i - 1]) * (vh[i - 1] + s)
            out[mid] = np.where(x >= 0, x * s - integral, 0.0)
        return out

    # -- serialization --------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "bid_grid": self.bid_grid.tolist(),
            "time_knots_hours": self.time_knots.tolist(),
            "win_prob": self.win_prob.tolist(),
            "rate": self.rate.tolist(),
            "max_bid": self.max_bid,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise CurveValidationError(
                f"unsupported curve schema_version {d.get('schema_version')!r}")
        return cls(d["bid_grid"], d["time_knots_hours"], d["win_prob"],
                   d["rate"], d.get("max_bid"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def ramp_curve(n_bids=257, bid_floor=1e-9, rate=1.0, time_knots=(0.0,)):
    """Identity-like test curve: win probability equals the bid on [0, 1].

    The grid starts at a tiny positive bid so probabilities stay strictly
    positive; piecewise-linear interpolation of the identity is exact
    regardless of grid placement.
    """
    grid = np.linspace(bid_floor, 1.0, n_bids)
    knots = np.asarray(time_knots, dtype=float)
    win = np.tile(grid, (len(knots), 1))
    rates = np.full(len(knots), float(rate))
    return SupplyCurve(grid, knots, win, rates, max_bid=1.0)
