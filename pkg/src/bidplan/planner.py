"""Discretized planning: the epigraph LP, duals, and bid-path reconstruction.

The continuous transportation-production problem is discretized on a knot
grid containing every contract deadline.  Each interval's cost is the
trapezoidal average of the piecewise-affine acquisition tables at its two
endpoint knots, realized with one epigraph variable per endpoint, so the LP
objective equals the exact cost of its own piecewise-constant plan under
linear-in-time interpolation of the tables.  Demand-constraint duals are the
pseudo-bids; flow-balance duals give the per-interval shadow price of supply.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

from bidplan.market import INFEASIBLE, Mechanism, SCHEMA_VERSION

KNOT_MERGE_TOL = 1e-9
DEADLINE_TOL = 1e-9


class PlanStatus(Enum):
    OPTIMAL = "optimal"
    BEST_EFFORT = "best_effort"
    INFEASIBLE = "infeasible"


class PlanMode(Enum):
    STRICT = "strict"
    BEST_EFFORT = "best-effort"


class MissingDualsError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing knots covering [0, T] with every deadline included."""

    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if len(k) < 2 or np.any(np.diff(k) <= 0):
            raise ValueError("grid knots must be strictly increasing, n >= 2")
        object.__setattr__(self, "knots", k)
        k.flags.writeable = False

    @property
    def deltas(self):
        return np.diff(self.knots)

    @property
    def n_intervals(self):
        return len(self.knots) - 1

    def interval_of(self, t):
        """Index of the interval containing t, clamped to the grid span."""
        k = int(np.searchsorted(self.knots, t, side="right")) - 1
        return min(max(k, 0), self.n_intervals - 1)


def build_grid(contracts, K):
    """Uniform segmentation of [0, T] merged with the contract deadlines.

    [0, T] is cut into K - N equal segments (T the latest deadline), then the
    deadlines are merged in, sorted, and deduplicated to 1e-9.
    """
    deadlines = sorted(c.deadline for c in contracts)
    n = len(deadlines)
    if K < n + 1:
        raise ValueError(f"K={K} must be at least N+1={n + 1}")
    T = deadlines[-1]
    base = np.linspace(0.0, T, K - n + 1)
    knots = np.concatenate([base, deadlines])
    knots.sort()
    keep = np.concatenate([[True], np.diff(knots) > KNOT_MERGE_TOL])
    return TimeGrid(knots[keep])


# ---------------------------------------------------------------------------
# adequate supply


@dataclass
class FeasibilityReport:
    """Outcome of the constant-bid allocation feasibility check."""

    feasible: bool
    margin: float
    slack: dict            # contract id -> acquired minus required
    probe_bids: dict       # type id -> bid used
    per_type_sufficient: dict  # type id -> simple per-type sufficiency
    all_types_sufficient: bool


def _integrate_supply(curve, x, t0, t1, step=0.25):
    n = max(2, int(math.ceil((t1 - t0) / step)) + 1)
    ts = np.linspace(t0, t1, n)
    vals = [curve.eval_supply(x, t) for t in ts]
    return float(np.trapezoid(vals, ts))


def check_adequate_supply(contracts, curves, probe_bids=None):
    """Feasibility of fulfilling all contracts at constant probe bids.

    Solves: maximize a uniform per-contract surplus tau subject to the
    allocation polytope (fractions per type and deadline interval summing to
    at most one), using the supply attainable at the probe bids (saturating
    bids by default).  Infeasibility is an outcome, not an error.  Also
    evaluates the simpler per-type sufficiency condition that each type alone
    could cover all contracts assigned to it before its earliest deadline.
    """
    contracts = sorted(contracts)
    types = sorted(curves)
    if probe_bids is None:
        probe_bids = {}
    probe = {j: float(probe_bids.get(j, curves[j].max_bid)) for j in types}

    boundaries = [0.0]
    for c in contracts:
        if c.deadline > boundaries[-1] + KNOT_MERGE_TOL:
            boundaries.append(c.deadline)
    n_iv = len(boundaries) - 1
    supply = {(j, k): _integrate_supply(curves[j], probe[j],
                                        boundaries[k], boundaries[k + 1])
              for j in types for k in range(n_iv)}

    # variables: gamma_{ijk} for eligible (i, j) and intervals ending by T_i,
    # then tau (free)
    var = {}
    for i, c in enumerate(contracts):
        for j in c.eligible_types:
            for k in range(n_iv):
                if boundaries[k + 1] <= c.deadline + DEADLINE_TOL:
                    var[(i, j, k)] = len(var)
    n_gamma = len(var)
    tau = n_gamma

    rows, cols, vals, rhs = [], [], [], []
    r = 0
    for i, c in enumerate(contracts):
        for (ii, j, k), v in var.items():
            if ii == i:
                rows.append(r); cols.append(v); vals.append(-supply[(j, k)])
        rows.append(r); cols.append(tau); vals.append(1.0)
        rhs.append(-c.quantity * (1.0 + 1e-6))
        r += 1
    for j in types:
        for k in range(n_iv):
            share = [v for (ii, jj, kk), v in var.items() if jj == j and kk == k]
            if not share:
                continue
            for v in share:
                rows.append(r); cols.append(v); vals.append(1.0)
            rhs.append(1.0)
            r += 1
    A = csr_matrix((vals, (rows, cols)), shape=(r, n_gamma + 1))
    cobj = np.zeros(n_gamma + 1)
    cobj[tau] = -1.0
    bounds = [(0.0, 1.0)] * n_gamma + [(None, None)]
    res = linprog(cobj, A_ub=A, b_ub=np.array(rhs), bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    margin = float(res.x[tau])
    slack = {}
    for i, c in enumerate(contracts):
        acquired = sum(res.x[v] * supply[(j, k)]
                       for (ii, j, k), v in var.items() if ii == i)
        slack[c.id] = float(acquired - c.quantity)

    per_type = {}
    for j in types:
        assigned = [c for c in contracts if j in c.eligible_types]
        if not assigned:
            per_type[j] = True
            continue
        tau_j = min(c.deadline for c in assigned)
        total = _integrate_supply(curves[j], probe[j], 0.0, tau_j)
        per_type[j] = bool(total > sum(c.quantity for c in assigned))

    return FeasibilityReport(feasible=bool(margin >= 0.0), margin=margin,
                             slack=slack, probe_bids=probe,
                             per_type_sufficient=per_type,
                             all_types_sufficient=all(per_type.values()))


# ---------------------------------------------------------------------------
# the planning LP


@dataclass
class Plan:
    """Solution of the discretized planning problem on one grid.

    supply[j, k] is the target win rate for type j on interval k;
    rates[i, j, k] the share routed to contract i.  rho are the demand duals
    (pseudo-bids), mu the flow-balance shadow prices per (type, interval).
    Dual detail (epigraph weights/slope mixes and cap duals) is retained so
    the dual objective can be re-evaluated through conjugates.
    """

    grid: TimeGrid
    contract_ids: list
    type_ids: list
    quantities: np.ndarray
    deadlines: np.ndarray
    eligible: list              # frozenset of type ids per contract
    status: PlanStatus
    objective: float
    supply: np.ndarray          # (M, K)
    rates: np.ndarray           # (N, M, K)
    contract_active: np.ndarray   # (N, K) bool
    type_active: np.ndarray       # (M, K) bool
    rho: np.ndarray | None = None
    mu: np.ndarray | None = None   # (M, K)
    shortfall: np.ndarray | None = None
    eta_detail: dict | None = None
    cap_dual: np.ndarray | None = None   # (M, K)
    caps: np.ndarray | None = None       # (M, K)
    feasibility: FeasibilityReport | None = None
    mechanism: Mechanism | None = None

    def to_dict(self):
        d = {
            "schema_version": SCHEMA_VERSION,
            "status": self.status.value,
            "objective": self.objective,
            "grid_knots_hours": self.grid.knots.tolist() if self.grid else None,
            "contract_ids": self.contract_ids,
            "type_ids": self.type_ids,
            "supply": self.supply.tolist() if self.supply is not None else None,
            "rates": self.rates.tolist() if self.rates is not None else None,
            "rho": self.rho.tolist() if self.rho is not None else None,
            "mu": self.mu.tolist() if self.mu is not None else None,
        }
        if self.shortfall is not None:
            d["shortfall"] = self.shortfall.tolist()
        if self.mechanism is not None:
            d["mechanism"] = self.mechanism.value
        return d


def _active_masks(contracts, types, grid):
    K = grid.n_intervals
    N = len(contracts)
    M = len(types)
    contract_active = np.zeros((N, K), dtype=bool)
    for i, c in enumerate(contracts):
        contract_active[i] = grid.knots[1:] <= c.deadline + DEADLINE_TOL
    type_active = np.zeros((M, K), dtype=bool)
    tpos = {j: a for a, j in enumerate(types)}
    for i, c in enumerate(contracts):
        for j in c.eligible_types:
            if j in tpos:
                type_active[tpos[j]] |= contract_active[i]
    return contract_active, type_active


def _check_table_alignment(tables, types, grid, type_active):
    for a, j in enumerate(types):
        need = int(np.max(np.nonzero(type_active[a])[0])) + 2 if type_active[a].any() else 0
        tk = np.asarray(tables[j].time_knots, dtype=float)
        if len(tk) < need:
            raise ValueError(f"acquisition table for type {j} covers {len(tk)} "
                             f"knots, grid needs {need}")
        if not np.allclose(tk[:need], grid.knots[:need], atol=1e-9, rtol=0.0):
            raise ValueError(f"acquisition table knots for type {j} do not "
                             f"match the planning grid")


def solve_plan(contracts, tables, grid, mode=PlanMode.STRICT, curves=None):
    """Solve the epigraph-form planning LP on the given grid.

    Strict mode enforces every demand constraint and reports status
    INFEASIBLE rather than raising, attaching an adequate-supply report when
    `curves` are supplied.  Best-effort mode adds a nonnegative shortfall to
    each demand constraint, penalized at ten times the steepest finite
    acquisition slope.

    Among the (typically many) optimal solutions, supply and routing are
    averaged within each (type, inter-deadline window) whenever doing so
    provably preserves the objective; this selects the piecewise-constant
    representative that the duals predict.
    """
    contracts = sorted(contracts)
    types = sorted(tables)
    N, M, K = len(contracts), len(types), grid.n_intervals
    dk = grid.deltas
    contract_active, type_active = _active_masks(contracts, types, grid)
    _check_table_alignment(tables, types, grid, type_active)

    quantities = np.array([c.quantity for c in contracts])
    tpos = {j: a for a, j in enumerate(types)}

    # -- variable layout --
    s_idx = {}
    aL_idx = {}
    aH_idx = {}
    r_idx = {}
    nv = 0
    for a in range(M):
        for k in range(K):
            if type_active[a, k]:
                s_idx[(a, k)] = nv; nv += 1
                aL_idx[(a, k)] = nv; nv += 1
                aH_idx[(a, k)] = nv; nv += 1
    for i, c in enumerate(contracts):
        for j in c.eligible_types:
            if j not in tpos:
                raise ValueError(f"contract {c.id} references unknown type {j}")
            a = tpos[j]
            for k in range(K):
                if contract_active[i, k]:
                    r_idx[(i, a, k)] = nv; nv += 1
    slack_idx = {}
    if mode is PlanMode.BEST_EFFORT:
        max_slope = max(float(np.max(tables[j].tables[k].slopes))
                        for a, j in enumerate(types)
                        for k in range(len(tables[j].tables)))
        penalty = 10.0 * max(max_slope, 1e-12)
        for i in range(N):
            slack_idx[i] = nv; nv += 1

    caps = np.zeros((M, K))
    cobj = np.zeros(nv)
    bounds = [(0.0, None)] * nv
    for (a, k), v in s_idx.items():
        j = types[a]
        caps[a, k] = min(tables[j].cap(k), tables[j].cap(k + 1))
        bounds[v] = (0.0, caps[a, k])
        cobj[aL_idx[(a, k)]] = 0.5 * dk[k]
        cobj[aH_idx[(a, k)]] = 0.5 * dk[k]
    for i in slack_idx:
        cobj[slack_idx[i]] = penalty

    row_chunks, col_chunks, val_chunks, rhs_chunks = [], [], [], []
    r = 0
    epi_rows = {}   # (a, k, side) -> (start, stop, slopes)
    for (a, k), sv in s_idx.items():
        j = types[a]
        for side, (knot, av) in enumerate(((k, aL_idx[(a, k)]),
                                           (k + 1, aH_idx[(a, k)]))):
            tab = tables[j].tables[knot]
            m = tab.slopes
            b = tab.intercepts
            H = len(m)
            rr = np.arange(r, r + H)
            row_chunks += [rr, rr]
            col_chunks += [np.full(H, sv), np.full(H, av)]
            val_chunks += [m, np.full(H, -1.0)]
            rhs_chunks.append(-b)
            epi_rows[(a, k, side)] = (r, r + H, m)
            r += H
    demand_rows = {}
    by_contract = {}
    for (i, a, k), v in r_idx.items():
        by_contract.setdefault(i, []).append((v, dk[k]))
    for i, c in enumerate(contracts):
        ent = by_contract.get(i, [])
        if ent:
            vs, ds = zip(*ent)
            row_chunks.append(np.full(len(vs), r))
            col_chunks.append(np.array(vs))
            val_chunks.append(-np.array(ds))
        if i in slack_idx:
            row_chunks.append(np.array([r]))
            col_chunks.append(np.array([slack_idx[i]]))
            val_chunks.append(np.array([-1.0]))
        rhs_chunks.append(np.array([-c.quantity]))
        demand_rows[i] = r
        r += 1
    A_ub = csr_matrix((np.concatenate(val_chunks),
                       (np.concatenate(row_chunks).astype(np.int64),
                        np.concatenate(col_chunks).astype(np.int64))),
                      shape=(r, nv))
    b_ub = np.concatenate(rhs_chunks)

    erows, ecols, evals = [], [], []
    flow_rows = {}
    by_cell = {}
    for (ii, aa, kk), v in r_idx.items():
        by_cell.setdefault((aa, kk), []).append(v)
    er = 0
    for (a, k), sv in s_idx.items():
        erows.append(er); ecols.append(sv); evals.append(1.0)
        for v in by_cell.get((a, k), []):
            erows.append(er); ecols.append(v); evals.append(-1.0)
        flow_rows[(a, k)] = er
        er += 1
    A_eq = csr_matrix((evals, (erows, ecols)), shape=(er, nv))
    b_eq = np.zeros(er)

    res = linprog(cobj, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status == 2:
        report = (check_adequate_supply(contracts, curves)
                  if curves is not None else None)
        return Plan(grid=grid, contract_ids=[c.id for c in contracts],
                    type_ids=list(types), quantities=quantities,
                    deadlines=np.array([c.deadline for c in contracts]),
                    eligible=[frozenset(c.eligible_types) for c in contracts],
                    status=PlanStatus.INFEASIBLE, objective=math.inf,
                    supply=np.zeros((M, K)), rates=np.zeros((N, M, K)),
                    contract_active=contract_active, type_active=type_active,
                    feasibility=report)
    if res.status != 0:
        raise RuntimeError(f"planning LP failed: {res.message}")

    supply = np.zeros((M, K))
    rates = np.zeros((N, M, K))
    for (a, k), v in s_idx.items():
        supply[a, k] = res.x[v]
    for (i, a, k), v in r_idx.items():
        rates[i, a, k] = res.x[v]
    shortfall = None
    if mode is PlanMode.BEST_EFFORT:
        shortfall = np.array([res.x[slack_idx[i]] for i in range(N)])

    rho = np.maximum(0.0, np.array([-res.ineqlin.marginals[demand_rows[i]]
                                    for i in range(N)]))
    mu = np.zeros((M, K))
    for (a, k), rr in flow_rows.items():
        mu[a, k] = res.eqlin.marginals[rr] / dk[k]

    eta_detail = {}
    for (a, k, side), (start, stop, m) in epi_rows.items():
        eta = -res.ineqlin.marginals[start:stop]
        tot = float(np.sum(eta))
        p = float(eta @ m / tot) if tot > 1e-14 else 0.0
        eta_detail[(a, k, side)] = (tot, p)
    cap_dual = np.zeros((M, K))
    upper = res.upper.marginals
    for (a, k), v in s_idx.items():
        cap_dual[a, k] = upper[v]

    objective = float(res.fun)
    if mode is PlanMode.BEST_EFFORT:
        objective -= float(penalty * np.sum(shortfall))
        status = (PlanStatus.BEST_EFFORT if np.any(shortfall > 1e-7)
                  else PlanStatus.OPTIMAL)
    else:
        status = PlanStatus.OPTIMAL

    plan = Plan(grid=grid, contract_ids=[c.id for c in contracts],
                type_ids=list(types), quantities=quantities,
                deadlines=np.array([c.deadline for c in contracts]),
                eligible=[frozenset(c.eligible_types) for c in contracts],
                status=status, objective=objective, supply=supply, rates=rates,
                contract_active=contract_active, type_active=type_active,
                rho=rho, mu=mu, shortfall=shortfall, eta_detail=eta_detail,
                cap_dual=cap_dual, caps=caps,
                mechanism=tables[types[0]].mechanism)
    _normalize_windows(plan, contracts, tables)
    return plan


def _epigraph_cost(plan, tables, supply):
    """Exact LP objective of a candidate supply array (epigraph values tight)."""
    dk = plan.grid.deltas
    total = 0.0
    for a, j in enumerate(plan.type_ids):
        for k in range(plan.grid.n_intervals):
            if not plan.type_active[a, k]:
                continue
            s = supply[a, k]
            lo = max(0.0, float(tables[j].tables[k](s)))
            hi = max(0.0, float(tables[j].tables[k + 1](s)))
            total += 0.5 * dk[k] * (lo + hi)
    return total


def _window_ids(plan, contracts):
    """Interval -> inter-deadline window index (windows split at deadlines)."""
    K = plan.grid.n_intervals
    deadlines = sorted({c.deadline for c in contracts})
    wid = np.zeros(K, dtype=int)
    w = 0
    for k in range(K):
        wid[k] = w
        if any(abs(plan.grid.knots[k + 1] - d) <= DEADLINE_TOL for d in deadlines):
            w += 1
    return wid


def _normalize_windows(plan, contracts, tables):
    """Average supply/routing per (type, window) when cost-neutral.

    The LP optimum is usually degenerate along flat table segments; the
    window average is the representative with piecewise-constant rate, and
    Jensen's inequality makes it optimal whenever the endpoint tables agree
    across the window.  The averaged candidate is adopted only if its exact
    epigraph cost matches the solver objective.
    """
    if plan.status is PlanStatus.INFEASIBLE:
        return
    dk = plan.grid.deltas
    wid = _window_ids(plan, contracts)
    supply = plan.supply.copy()
    rates = plan.rates.copy()
    for a in range(supply.shape[0]):
        for w in np.unique(wid):
            ks = np.nonzero((wid == w) & plan.type_active[a])[0]
            if len(ks) < 2:
                continue
            wsum = dk[ks].sum()
            supply[a, ks] = float((supply[a, ks] * dk[ks]).sum() / wsum)
            for i in range(rates.shape[0]):
                rates[i, a, ks] = float((rates[i, a, ks] * dk[ks]).sum() / wsum)
    base = _epigraph_cost(plan, tables, plan.supply)
    cand = _epigraph_cost(plan, tables, supply)
    if cand <= base + 1e-9 * (1.0 + abs(base)):
        plan.supply = supply
        plan.rates = rates


# ---------------------------------------------------------------------------
# duals and reconstruction


@dataclass
class PseudoBids:
    rho: np.ndarray
    mu: np.ndarray
    max_residual: float


def extract_pseudo_bids(plan):
    """Demand duals (clipped at zero) and flow duals, with consistency residual.

    The optimal flow dual on each active interval must dominate every active
    pseudo-bid; the residual reports the worst shortfall from that relation.
    """
    if plan.status is not PlanStatus.OPTIMAL:
        raise ValueError(f"plan status is {plan.status.value}, need optimal")
    if plan.rho is None or plan.mu is None:
        raise MissingDualsError("plan carries no duals")
    residual = 0.0
    for a in range(plan.mu.shape[0]):
        j = plan.type_ids[a]
        for k in range(plan.mu.shape[1]):
            if not plan.type_active[a, k]:
                continue
            active = [plan.rho[i] for i in range(len(plan.contract_ids))
                      if plan.contract_active[i, k] and j in plan.eligible[i]]
            if active:
                residual = max(residual, max(active) - plan.mu[a, k])
    return PseudoBids(rho=plan.rho.copy(), mu=plan.mu.copy(),
                      max_residual=float(residual))


@dataclass
class BidPlan:
    """Piecewise-constant bid paths and allocation fractions on the grid."""

    grid: TimeGrid
    contract_ids: list
    type_ids: list
    bids: np.ndarray      # (M, K); -inf sentinel where no supply is sought
    gamma: np.ndarray     # (N, M, K)
    pseudo_bids: np.ndarray
    mu: np.ndarray
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "grid_knots_hours": self.grid.knots.tolist(),
            "contract_ids": self.contract_ids,
            "type_ids": self.type_ids,
            "bids": [[(None if not np.isfinite(b) else b) for b in row]
                     for row in self.bids],
            "gamma": self.gamma.tolist(),
            "pseudo_bids": self.pseudo_bids.tolist(),
            "mu": self.mu.tolist(),
            "warnings": list(self.warnings),
        }


def reconstruct_paths(plan, curves, t_offset=0.0):
    """Bids via supply-curve inversion at interval midpoints, gamma via ratios.

    `t_offset` maps the plan's relative grid onto curve time, for plans built
    mid-run on residual contracts.  Zero-supply intervals get gamma 0 and a
    never-bid sentinel.  Allocation fractions are renormalized only when they
    exceed one beyond tolerance.  Supply targets past the attainable supremum
    (a discretization artifact) clamp to the saturation bid and are recorded
    as warnings.
    """
    if plan.status not in (PlanStatus.OPTIMAL, PlanStatus.BEST_EFFORT):
        raise ValueError(f"cannot reconstruct from status {plan.status.value}")
    M, K = plan.supply.shape
    N = plan.rates.shape[0]
    bids = np.full((M, K), -math.inf)
    gamma = np.zeros((N, M, K))
    warnings = []
    mids = t_offset + 0.5 * (plan.grid.knots[:-1] + plan.grid.knots[1:])
    for a in range(M):
        j = plan.type_ids[a]
        curve = curves[j]
        for k in range(K):
            s = plan.supply[a, k]
            if not plan.type_active[a, k] or s <= 0.0:
                continue
            x = curve.invert_supply(s, mids[k])
            if x == INFEASIBLE:
                x = curve.max_bid
                warnings.append(
                    f"type {j} interval {k}: rate {s:.6g} exceeds attainable "
                    f"supremum at t={mids[k]:.4g}; clamped to saturation bid")
            bids[a, k] = x
            g = plan.rates[:, a, k] / s
            tot = g.sum()
            if tot > 1.0 + 1e-7:
                g = g / tot
            gamma[:, a, k] = g
    return BidPlan(grid=plan.grid, contract_ids=plan.contract_ids,
                   type_ids=plan.type_ids, bids=bids, gamma=gamma,
                   pseudo_bids=plan.rho.copy() if plan.rho is not None else np.zeros(N),
                   mu=plan.mu.copy() if plan.mu is not None else np.zeros((M, K)),
                   warnings=warnings)


# ---------------------------------------------------------------------------
# duality


@dataclass
class GapReport:
    primal: float
    dual: float
    gap: float
    relative_gap: float
    dual_at_mu: float


def dual_objective(contracts, grid, tables, rho):
    """Value of the finite dual at pseudo-bids rho with minimal flow duals.

    The flow dual on each interval is the max of the active pseudo-bids; the
    per-interval integral of the conjugate is taken by the trapezoid rule on
    the two endpoint tables.  Any rho >= 0 gives a valid lower bound on the
    primal optimum.
    """
    contracts = sorted(contracts)
    types = sorted(tables)
    contract_active, type_active = _active_masks(contracts, types, grid)
    dk = grid.deltas
    rho = np.asarray(rho, dtype=float)
    total = float(rho @ np.array([c.quantity for c in contracts]))
    for a, j in enumerate(types):
        for k in range(grid.n_intervals):
            if not type_active[a, k]:
                continue
            active = [rho[i] for i, c in enumerate(contracts)
                      if contract_active[i, k] and j in c.eligible_types]
            m = max(active) if active else 0.0
            lo = tables[j].tables[k].conjugate(m)
            hi = tables[j].tables[k + 1].conjugate(m)
            total -= 0.5 * dk[k] * (lo + hi)
    return total


def duality_gap(plan, tables):
    """Primal-versus-dual agreement for an optimal plan.

    The dual objective is rebuilt from the extracted multipliers: pseudo-bid
    times quantity, minus each epigraph block's weight times the conjugate of
    its table at the block's dual slope mix, plus the supply-cap terms.  At a
    true optimum this equals the primal value, so the gap should sit in
    [-1e-6, 1e-5 * |primal|].
    """
    if plan.status is not PlanStatus.OPTIMAL:
        raise ValueError("duality gap requires an optimal plan")
    if plan.rho is None or plan.eta_detail is None:
        raise MissingDualsError("plan carries no dual detail")
    dual = float(plan.rho @ plan.quantities)
    for (a, k, side), (tot, p) in plan.eta_detail.items():
        if tot <= 0.0:
            continue
        j = plan.type_ids[a]
        tab = tables[j].tables[k + side]
        dual -= tot * tab.conjugate(max(p, 0.0))
    if plan.cap_dual is not None and plan.caps is not None:
        dual += float(np.sum(plan.cap_dual * plan.caps))
    primal = plan.objective
    gap = primal - dual
    rel = gap / max(abs(primal), 1e-30)
    dual_mu = _dual_at_max_active_rho(plan, tables)
    return GapReport(primal=primal, dual=dual, gap=float(gap),
                     relative_gap=float(rel), dual_at_mu=float(dual_mu))


def _dual_at_max_active_rho(plan, tables):
    """Dual value at flow duals set to the max active pseudo-bid per interval."""
    dk = plan.grid.deltas
    total = float(plan.rho @ plan.quantities)
    for a, j in enumerate(plan.type_ids):
        for k in range(plan.grid.n_intervals):
            if not plan.type_active[a, k]:
                continue
            active = [plan.rho[i] for i in range(len(plan.contract_ids))
                      if plan.contract_active[i, k] and j in plan.eligible[i]]
            m = max(active) if active else 0.0
            lo = tables[j].tables[k].conjugate(m)
            hi = tables[j].tables[k + 1].conjugate(m)
            total -= 0.5 * dk[k] * (lo + hi)
    return total
