"""Event-driven auction simulation with receding-horizon re-planning.

One run replays sampled arrivals and prices through a priority queue,
soliciting a bid per event from a controller that holds the current plan.
The controller re-plans on every contract fulfillment (and optionally on a
fixed clock), always against residual quantities and residual deadlines.
Replications are independent and parallelize; a single run is sequential.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from bidplan.convexify import AcquisitionTable, tabulate_acquisition
from bidplan.market import Mechanism, make_contract
from bidplan.planner import (PlanMode, PlanStatus, build_grid,
                             reconstruct_paths, solve_plan)
from bidplan.risk import RiskConfig, inflate_demand


class SamplerConfigError(ValueError):
    pass


@dataclass
class MarketSampler:
    """Hour-of-day empirical datasets of inter-arrival times and prices.

    Buckets are sampled uniformly with replacement.  Every (type, hour)
    bucket must be nonempty; that is checked here so runs never hit an empty
    draw mid-simulation.
    """

    interarrivals: dict   # (type id, hour 0..23) -> np.ndarray of hours
    prices: dict          # (type id, hour 0..23) -> np.ndarray of currency

    def __post_init__(self):
        self.types = sorted({j for j, _ in self.interarrivals})
        for j in self.types:
            for h in range(24):
                for name, buckets in (("interarrival", self.interarrivals),
                                      ("price", self.prices)):
                    arr = buckets.get((j, h))
                    if arr is None or len(arr) == 0:
                        raise SamplerConfigError(
                            f"empty {name} bucket for type {j} hour {h}")
                    buckets[(j, h)] = np.asarray(arr, dtype=float)

    def sample_event(self, rng, t, j):
        """Draw (inter-arrival, price) for type j at time t.

        The hour is floor(t) when a uniform draw U satisfies
        t - floor(t) <= U, and floor(t) + 1 otherwise, interpolating linearly
        between adjacent hourly buckets; hours wrap mod 24.
        """
        p = t - math.floor(t)
        u = rng.random()
        h = int(math.floor(t)) if p <= u else int(math.floor(t)) + 1
        h %= 24
        ia = self.interarrivals[(j, h)]
        pr = self.prices[(j, h)]
        dt = float(ia[rng.integers(len(ia))])
        price = float(pr[rng.integers(len(pr))])
        return dt, price

    @classmethod
    def from_records(cls, records, label_to_type):
        """Build hourly buckets from parsed impression records."""
        by_type = {}
        for rec in records:
            j = label_to_type.get(rec.item_type)
            if j is None:
                continue
            by_type.setdefault(j, []).append(rec)
        inter = {}
        prices = {}
        for j, recs in by_type.items():
            recs.sort(key=lambda r: r.timestamp)
            for a, b in zip(recs, recs[1:]):
                gap = (b.timestamp - a.timestamp).total_seconds() / 3600.0
                if gap <= 0:
                    continue
                inter.setdefault((j, a.timestamp.hour), []).append(gap)
            for r in recs:
                prices.setdefault((j, r.timestamp.hour), []).append(r.price)
        # backfill sparse hours from the pooled per-type data
        for j, recs in by_type.items():
            all_gaps = np.concatenate([np.asarray(v) for (jj, _), v in
                                       inter.items() if jj == j]) \
                if any(jj == j for (jj, _) in inter) else np.array([1.0])
            all_prices = np.asarray([r.price for r in recs])
            for h in range(24):
                inter.setdefault((j, h), all_gaps.tolist())
                prices.setdefault((j, h), all_prices.tolist())
        return cls(interarrivals={k: np.asarray(v) for k, v in inter.items()},
                   prices={k: np.asarray(v) for k, v in prices.items()})


@dataclass
class ControllerConfig:
    """Planner wiring for the in-run controller."""

    grid_k: int = 12
    rate_points: int = 256
    segments: int = 32
    update_hours: float | None = None   # None: re-plan on fulfillment only
    risk: RiskConfig | None = None
    planning_mechanism: Mechanism | None = None  # default: market mechanism


def _knot_tables(curve, mechanism, times, rate_points, segments):
    """Per-absolute-time acquisition tables, memoized on the curve object.

    Curves are immutable, so identical (mechanism, time, resolution) requests
    across re-plans and replications resolve to the same table.
    """
    memo = curve.__dict__.setdefault("_acq_memo", {})
    out = []
    for t in times:
        tkey = round(t % 24.0, 9) if curve.periodic else round(t, 9)
        key = (mechanism, tkey, rate_points, segments)
        tab = memo.get(key)
        if tab is None:
            tab = tabulate_acquisition(curve, mechanism, [t],
                                       rate_points=rate_points,
                                       segments=segments).tables[0]
            memo[key] = tab
        out.append(tab)
    return out


class Controller:
    """Holds the live bid plan and re-plans on residual contracts.

    Re-planning always happens when a contract fills (the filled contract is
    removed and a fresh plan computed); a fixed-interval clock composes with
    that.  A strict plan that comes back infeasible falls back to best-effort
    and the event is logged.
    """

    def __init__(self, curves, market_mechanism, config=None):
        self.curves = curves
        self.market_mechanism = market_mechanism
        self.config = config or ControllerConfig()
        self.mechanism = (self.config.planning_mechanism
                          or market_mechanism)
        self.type_pos = {}
        self.bidplan = None
        self.plan_t0 = 0.0
        self.replan_log = []
        self.next_update = (self.config.update_hours
                            if self.config.update_hours else math.inf)

    def replan(self, t, residual_contracts):
        live = [c for c in residual_contracts
                if c.quantity > 1e-9 and c.deadline > 1e-9]
        if not live:
            self.bidplan = None
            self.plan_t0 = t
            self.replan_log.append((t, "idle", "no_live_contracts"))
            return
        if self.config.risk is not None:
            live = [replace_quantity(c, (1.0 + self.config.risk.delta_for(
                c.quantity, c.deadline)) * c.quantity) for c in live]
        grid = build_grid(live, max(self.config.grid_k, len(live) + 1))
        tables = {}
        for j in sorted({j for c in live for j in c.eligible_types}):
            knots = [t + rel for rel in grid.knots]
            tabs = _knot_tables(self.curves[j], self.mechanism, knots,
                                self.config.rate_points, self.config.segments)
            tables[j] = AcquisitionTable(item_type=j, mechanism=self.mechanism,
                                         time_knots=grid.knots, tables=tabs)
        plan = solve_plan(live, tables, grid, mode=PlanMode.STRICT)
        status = plan.status.value
        if plan.status is PlanStatus.INFEASIBLE:
            plan = solve_plan(live, tables, grid, mode=PlanMode.BEST_EFFORT)
            status = f"fallback_{plan.status.value}"
        self.bidplan = reconstruct_paths(plan, self.curves, t_offset=t)
        self.plan_t0 = t
        self.type_pos = {j: a for a, j in enumerate(self.bidplan.type_ids)}
        self.replan_log.append((t, "replan", status))

    def due_for_update(self, t):
        return t >= self.next_update

    def mark_updated(self, t):
        h = self.config.update_hours
        if h:
            while self.next_update <= t:
                self.next_update += h

    def solicit_bid(self, t, j, rng, sigma_bid=0.0):
        """Nominal plan lookup plus optional Gaussian bid randomization.

        Returns (bid, contract_id) or None when the plan seeks no supply of
        type j at time t.  The single uniform draw both gates participation
        (probability = total allocation) and selects the contract
        (categorical by allocation share).
        """
        bp = self.bidplan
        if bp is None or j not in self.type_pos:
            return None
        rel = t - self.plan_t0
        if rel >= bp.grid.knots[-1] or rel < 0:
            return None
        k = bp.grid.interval_of(rel)
        a = self.type_pos[j]
        gam = bp.gamma[:, a, k]
        total = float(gam.sum())
        if total <= 0.0:
            return None
        u = rng.random()
        if u >= total:
            return None
        idx = int(np.searchsorted(np.cumsum(gam), u, side="right"))
        idx = min(idx, len(gam) - 1)
        bid = float(bp.bids[a, k])
        if not math.isfinite(bid):
            return None
        if sigma_bid > 0.0:
            bid += sigma_bid * rng.normal()
        return bid, bp.contract_ids[idx]


def replace_quantity(c, q):
    return make_contract(c.id, c.eligible_types, q, c.deadline)


@dataclass
class SimResult:
    """Trajectories, spend ledger, and fulfillment for one simulated run."""

    horizon: float
    mechanism: Mechanism
    counts: dict
    requirements: dict
    trajectories: dict          # contract id -> list of (t, cumulative count)
    ledger: list                # (t, contract id, type id, paid, bid)
    replan_log: list
    events: list | None = None  # (t, type id, price, bid, won, contract id)

    @property
    def fulfillment(self):
        return {cid: self.counts[cid] / self.requirements[cid]
                if self.requirements[cid] > 0 else 1.0
                for cid in self.requirements}

    @property
    def total_spend(self):
        return float(sum(row[3] for row in self.ledger))


def run_sim(sampler, controller, contracts, mechanism, horizon,
            sigma_bid=0.0, event_rng=None, policy_rng=None,
            record_events=False):
    """Replay one sampled market against a controller.

    Arrivals and prices come only from `event_rng`, so two runs sharing that
    stream see identical markets regardless of bidding behavior (the bidder
    is a price taker).  All policy randomness (participation, contract
    selection, bid noise) draws from `policy_rng`.  Wins pay the price in a
    second-price market and the bid in a first-price market; ties win.
    """
    event_rng = event_rng or np.random.default_rng(0)
    policy_rng = policy_rng or np.random.default_rng(1)
    contracts = sorted(contracts)
    requirements = {c.id: c.quantity for c in contracts}
    counts = {c.id: 0 for c in contracts}
    trajectories = {c.id: [(0.0, 0)] for c in contracts}
    deadline = {c.id: c.deadline for c in contracts}
    eligible = {c.id: c.eligible_types for c in contracts}
    live = {c.id for c in contracts if c.quantity > 0}

    def residual(t):
        return [make_contract(cid, eligible[cid],
                              requirements[cid] - counts[cid],
                              deadline[cid] - t)
                for cid in sorted(live) if deadline[cid] > t + 1e-9]

    controller.replan(0.0, residual(0.0))

    queue = []
    seq = 0
    for j in sampler.types:
        dt, price = sampler.sample_event(event_rng, 0.0, j)
        heapq.heappush(queue, (dt, seq, j, price))
        seq += 1

    ledger = []
    events = [] if record_events else None
    while queue:
        t, _, j, price = heapq.heappop(queue)
        if t >= horizon:
            break
        if controller.due_for_update(t):
            controller.mark_updated(t)
            controller.replan(t, residual(t))
        won = False
        bid_val = None
        cid = None
        ask = controller.solicit_bid(t, j, policy_rng, sigma_bid)
        if ask is not None:
            bid_val, cid = ask
            if cid in live and deadline[cid] > t and bid_val >= price:
                won = True
                paid = price if mechanism is Mechanism.SECOND_PRICE else bid_val
                counts[cid] += 1
                trajectories[cid].append((t, counts[cid]))
                ledger.append((t, cid, j, paid, bid_val))
                if counts[cid] >= requirements[cid]:
                    live.discard(cid)
                    controller.replan(t, residual(t))
        if record_events:
            events.append((t, j, price, bid_val, won, cid if won else None))
        dt, nprice = sampler.sample_event(event_rng, t, j)
        heapq.heappush(queue, (t + dt, seq, j, nprice))
        seq += 1

    return SimResult(horizon=horizon, mechanism=mechanism, counts=counts,
                     requirements=requirements, trajectories=trajectories,
                     ledger=ledger, replan_log=list(controller.replan_log),
                     events=events)


FULFILLED_THRESHOLD = 0.98


def fulfillment_metrics(result, contracts=None):
    """Per-run service and cost metrics.

    c_avg is the mean over contracts of items acquired by deadline over
    items required.  A run counts as fulfilled when every contract reached
    at least 98% of its requirement.  Spend per item divides the ledger
    total by items won.
    """
    frac = result.fulfillment
    fractions = [frac[cid] for cid in sorted(frac)]
    items = sum(result.counts.values())
    spend = result.total_spend
    return {
        "c_avg": float(np.mean(fractions)) if fractions else 1.0,
        "min_fraction": float(min(fractions)) if fractions else 1.0,
        "median_fraction": float(np.median(fractions)) if fractions else 1.0,
        "fractions": {str(cid): float(frac[cid]) for cid in sorted(frac)},
        "items_won": int(items),
        "total_spend": float(spend),
        "spend_per_item": float(spend / items) if items else 0.0,
        "fulfilled": bool(fractions and min(fractions) >= FULFILLED_THRESHOLD),
        "n_replans": int(sum(1 for r in result.replan_log if r[1] == "replan")),
    }


# ---------------------------------------------------------------------------
# Monte Carlo harness

_WORKER_SCENARIO = None


def _worker_init(scenario):
    global _WORKER_SCENARIO
    _WORKER_SCENARIO = scenario


def _rep_seeds(master_seed, rep):
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(rep,))
    ev, pol = ss.spawn(2)
    return np.random.default_rng(ev), np.random.default_rng(pol)


def _run_variant(scenario, variant_cfg, rep, master_seed):
    event_rng, policy_rng = _rep_seeds(master_seed, rep)
    controller = Controller(scenario.curves, scenario.market_mechanism,
                            config=variant_cfg)
    result = run_sim(scenario.sampler, controller, scenario.contracts,
                     scenario.market_mechanism, scenario.horizon,
                     sigma_bid=scenario.sigma_bid,
                     event_rng=event_rng, policy_rng=policy_rng)
    return fulfillment_metrics(result)


def _run_rep(args):
    rep, master_seed, variants = args
    out = {}
    for name, cfg in variants:
        try:
            out[name] = _run_variant(_WORKER_SCENARIO, cfg, rep, master_seed)
        except Exception as exc:  # recorded and excluded, never fatal
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    return rep, out


def _stats(values):
    arr = np.asarray(values, dtype=float)
    if len(arr) == 0:
        return {"n": 0}
    return {
        "n": int(len(arr)),
        "mean": float(np.mean(arr)),
        "sd": float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0,
        "p2.5": float(np.percentile(arr, 2.5)),
        "p50": float(np.percentile(arr, 50)),
        "p97.5": float(np.percentile(arr, 97.5)),
    }


def monte_carlo(scenario, reps, master_seed, variants=None, workers=1):
    """Run `reps` independent replications, optionally over paired variants.

    Every variant of a replication shares that replication's event-stream
    seed, so cross-variant differences are paired.  Per-replication seeds
    derive from the master seed alone; results are aggregated in replication
    order, making the summary byte-stable for a fixed configuration
    regardless of worker count.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if variants is None:
        variants = {"default": scenario.controller}
    vlist = sorted(variants.items())
    jobs = [(rep, master_seed, vlist) for rep in range(reps)]
    results = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(scenario,)) as pool:
            for rep, out in pool.map(_run_rep, jobs, chunksize=4):
                results[rep] = out
    else:
        _worker_init(scenario)
        for job in jobs:
            rep, out = _run_rep(job)
            results[rep] = out

    summary = {
        "schema_version": 1,
        "master_seed": int(master_seed),
        "reps": int(reps),
        "variants": {},
    }
    for name, _ in vlist:
        rows = [results[rep][name] for rep in range(reps)]
        ok = [r for r in rows if "error" not in r]
        errors = [r["error"] for r in rows if "error" in r]
        fulfilled = [r for r in ok if r["fulfilled"]]
        pooled = [f for r in ok for f in r["fractions"].values()]
        summary["variants"][name] = {
            "failed_runs": len(errors),
            "errors": errors[:10],
            "c_avg": _stats([r["c_avg"] for r in ok]),
            "median_fraction": _stats([r["median_fraction"] for r in ok]),
            "pooled_fraction_median": (float(np.median(pooled))
                                       if pooled else 1.0),
            "spend_per_item": _stats([r["spend_per_item"] for r in ok]),
            "spend_per_item_fulfilled": _stats(
                [r["spend_per_item"] for r in fulfilled]),
            "total_spend": _stats([r["total_spend"] for r in ok]),
            "fulfilled_share": (len(fulfilled) / len(ok)) if ok else 0.0,
            "per_rep_c_avg": [round(r["c_avg"], 12) if "error" not in r else None
                              for r in rows],
        }
    return summary
