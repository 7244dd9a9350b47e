"""Synthetic market generators: curves, samplers, and impression logs.

A synthetic type has a sinusoidal daily arrival-rate profile and lognormal
competing prices.  The analytic price CDF feeds the tabulated curve, and the
sampler draws from the same distributions, so planned win rates match the
simulated market by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np
from scipy.stats import norm

from bidplan.market import SupplyCurve
from bidplan.simulator import MarketSampler


@dataclass(frozen=True)
class TypeSpec:
    """One synthetic item type."""

    label: str
    base_rate: float          # mean arrivals per hour
    rate_amplitude: float = 0.0   # relative daily swing, in [0, 1)
    rate_phase: float = 0.0       # hour of peak arrivals
    price_logmean: float = 0.0    # lognormal parameters of competing price
    price_logsd: float = 0.5
    max_bid: float = 10.0

    def rate_at(self, t):
        return self.base_rate * (
            1.0 + self.rate_amplitude
            * math.sin(2.0 * math.pi * (t - self.rate_phase) / 24.0))

    def price_cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        pos = x > 0
        out[pos] = norm.cdf((np.log(x[pos]) - self.price_logmean)
                            / self.price_logsd)
        return out


@dataclass(frozen=True)
class MarketSpec:
    types: tuple

    def labels(self):
        return [ts.label for ts in self.types]

    def to_dict(self):
        return {"types": [vars(ts) | {} for ts in self.types]}

    @classmethod
    def from_dict(cls, d):
        return cls(types=tuple(TypeSpec(**t) for t in d["types"]))


def build_curves(spec, n_bids=129, bid_floor=1e-3):
    """Tabulate the analytic supply curves, 24h-periodic, hourly knots."""
    curves = {}
    for j, ts in enumerate(spec.types):
        grid = np.linspace(bid_floor, ts.max_bid, n_bids)
        knots = np.arange(0.0, 24.0 + 1e-9, 1.0)
        win = np.tile(ts.price_cdf(grid), (len(knots), 1))
        rates = np.array([ts.rate_at(t) for t in knots])
        rates[-1] = rates[0]  # exact 24h wrap
        curves[j] = SupplyCurve(grid, knots, win, rates, max_bid=ts.max_bid)
    return curves


def build_sampler(spec, seed, per_bucket=1000):
    """Empirical hourly datasets drawn from the analytic distributions.

    Inter-arrival means use the curve's within-hour average rate (the mean
    of the two knot rates), so the sampler and the tabulated curve describe
    the same market.
    """
    root = np.random.SeedSequence(entropy=seed)
    inter = {}
    prices = {}
    for j, ts in enumerate(spec.types):
        for h in range(24):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(j, h)))
            mean_rate = 0.5 * (ts.rate_at(float(h)) + ts.rate_at(h + 1.0))
            inter[(j, h)] = rng.exponential(1.0 / mean_rate, size=per_bucket)
            prices[(j, h)] = rng.lognormal(ts.price_logmean, ts.price_logsd,
                                           size=per_bucket)
    del root
    return MarketSampler(interarrivals=inter, prices=prices)


def write_impression_log(spec, seed, hours, path, start="2024-03-04T00:00:00"):
    """Simulate arrivals/prices over a real timeline and write the CSV log.

    Arrivals follow a nonhomogeneous Poisson process (thinning against the
    peak rate); each row records the market price of one impression.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    t0 = datetime.fromisoformat(start)
    rows = []
    for ts in spec.types:
        peak = ts.base_rate * (1.0 + ts.rate_amplitude)
        t = 0.0
        while True:
            t += rng.exponential(1.0 / peak)
            if t >= hours:
                break
            if rng.random() <= ts.rate_at(t) / peak:
                price = rng.lognormal(ts.price_logmean, ts.price_logsd)
                rows.append((t, ts.label, price))
    rows.sort()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "item_type", "price"])
        for t, label, price in rows:
            stamp = (t0 + timedelta(hours=t)).isoformat()
            w.writerow([stamp, label, f"{price:.6f}"])
    return len(rows)


def demo_market(n_types=3):
    """The stock three-type market used by examples and the test scenario."""
    specs = [
        TypeSpec(label="sports", base_rate=40.0, rate_amplitude=0.35,
                 rate_phase=20.0, price_logmean=0.3, price_logsd=0.6,
                 max_bid=12.0),
        TypeSpec(label="news", base_rate=55.0, rate_amplitude=0.25,
                 rate_phase=8.0, price_logmean=0.0, price_logsd=0.5,
                 max_bid=10.0),
        TypeSpec(label="games", base_rate=30.0, rate_amplitude=0.45,
                 rate_phase=22.0, price_logmean=0.55, price_logsd=0.7,
                 max_bid=16.0),
    ]
    return MarketSpec(types=tuple(specs[:n_types]))
