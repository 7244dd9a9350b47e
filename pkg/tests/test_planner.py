import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidplan.convexify import tabulate_acquisition
from bidplan.market import Mechanism, make_contract, ramp_curve
from bidplan.planner import (MissingDualsError, PlanMode, PlanStatus,
                             build_grid, check_adequate_supply, dual_objective,
                             duality_gap, extract_pseudo_bids,
                             reconstruct_paths, solve_plan)


def plan_single(mech, K=20, C=5.0, T=10.0, curve=None, **tab_kw):
    curve = curve or ramp_curve()
    c = make_contract(0, {0}, C, T)
    grid = build_grid([c], K)
    tables = {0: tabulate_acquisition(curve, mech, grid.knots, **tab_kw)}
    plan = solve_plan([c], tables, grid)
    return plan, tables, grid, c, curve


# -- grid -------------------------------------------------------------------

def test_build_grid_merges_deadlines():
    cs = [make_contract(0, {0}, 1.0, 24.0), make_contract(1, {0}, 1.0, 48.0)]
    grid = build_grid(cs, 4)
    assert np.allclose(grid.knots, [0.0, 24.0, 48.0])


def test_build_grid_uniform_plus_deadline():
    grid = build_grid([make_contract(0, {0}, 1.0, 10.0)], 3)
    assert np.allclose(grid.knots, [0.0, 5.0, 10.0])


def test_build_grid_dedups_coincident_knots():
    cs = [make_contract(0, {0}, 1.0, 5.0), make_contract(1, {0}, 1.0, 10.0)]
    grid = build_grid(cs, 4)  # uniform {0,5,10} collides with deadline 5
    assert np.all(np.diff(grid.knots) > 0)
    assert np.allclose(grid.knots, [0.0, 5.0, 10.0])


def test_build_grid_rejects_small_K():
    with pytest.raises(ValueError):
        build_grid([make_contract(0, {0}, 1.0, 1.0)], 1)


# -- adequate supply --------------------------------------------------------

def test_adequate_supply_single_feasible(ramp):
    report = check_adequate_supply([make_contract(0, {0}, 1.0, 10.0)],
                                   {0: ramp})
    assert report.feasible
    assert report.slack[0] == pytest.approx(9.0, abs=1e-3)
    assert report.all_types_sufficient


def test_adequate_supply_shortfall(ramp):
    report = check_adequate_supply([make_contract(0, {0}, 20.0, 10.0)],
                                   {0: ramp})
    assert not report.feasible
    assert report.slack[0] == pytest.approx(-10.0, abs=1e-3)


def test_adequate_supply_jointly_infeasible(ramp):
    cs = [make_contract(0, {0}, 6.0, 10.0), make_contract(1, {0}, 6.0, 10.0)]
    report = check_adequate_supply(cs, {0: ramp})
    assert not report.feasible
    each = check_adequate_supply(cs[:1], {0: ramp})
    assert each.feasible


# -- solve_plan -------------------------------------------------------------

def test_analytic_objective_second_price():
    # oracle: minimize integral of s^2/2 subject to integral s = C gives
    # constant s = C/T and value C^2/(2T) = 1.25
    plan, *_ = plan_single(Mechanism.SECOND_PRICE, K=20)
    assert plan.status is PlanStatus.OPTIMAL
    assert plan.objective == pytest.approx(1.25, rel=0.01)
    assert np.allclose(plan.supply[0], 0.5, atol=0.01)


def test_analytic_objective_first_price():
    plan, *_ = plan_single(Mechanism.FIRST_PRICE, K=20)
    assert plan.objective == pytest.approx(2.5, rel=0.01)


def test_zero_quantity_zero_plan():
    plan, *_ = plan_single(Mechanism.SECOND_PRICE, C=0.0)
    assert plan.objective == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(plan.supply, 0.0)
    assert np.allclose(plan.rates, 0.0)


def test_flow_balance_and_demand_hold():
    cs = [make_contract(0, {0}, 2.0, 6.0),
          make_contract(1, {0, 1}, 3.0, 10.0)]
    curves = {0: ramp_curve(), 1: ramp_curve(rate=1.5)}
    grid = build_grid(cs, 8)
    tables = {j: tabulate_acquisition(curves[j], Mechanism.SECOND_PRICE,
                                      grid.knots, item_type=j)
              for j in curves}
    plan = solve_plan(cs, tables, grid)
    assert plan.status is PlanStatus.OPTIMAL
    # flow balance per (type, interval)
    assert np.max(np.abs(plan.rates.sum(axis=0) - plan.supply)) < 1e-7
    # exact integral of the piecewise-constant plan meets each demand
    dk = grid.deltas
    for i, c in enumerate(sorted(cs)):
        got = float((plan.rates[i] * dk[None, :]).sum())
        assert got >= c.quantity - 1e-6


def test_infeasible_strict_reports(ramp):
    c = make_contract(0, {0}, 20.0, 10.0)
    grid = build_grid([c], 6)
    tables = {0: tabulate_acquisition(ramp, Mechanism.SECOND_PRICE, grid.knots)}
    plan = solve_plan([c], tables, grid, curves={0: ramp})
    assert plan.status is PlanStatus.INFEASIBLE
    assert plan.feasibility is not None
    assert not plan.feasibility.feasible
    with pytest.raises(ValueError):
        reconstruct_paths(plan, {0: ramp})


def test_best_effort_uses_slack(ramp):
    c = make_contract(0, {0}, 20.0, 10.0)
    grid = build_grid([c], 6)
    tables = {0: tabulate_acquisition(ramp, Mechanism.SECOND_PRICE, grid.knots)}
    plan = solve_plan([c], tables, grid, mode=PlanMode.BEST_EFFORT)
    assert plan.status is PlanStatus.BEST_EFFORT
    assert plan.shortfall[0] == pytest.approx(10.0, abs=1e-5)
    # supply saturates at the attainable cap
    assert np.allclose(plan.supply[0], 1.0, atol=1e-6)


def test_best_effort_matches_strict_when_feasible(ramp):
    strict, *_ = plan_single(Mechanism.SECOND_PRICE, K=10)
    c = make_contract(0, {0}, 5.0, 10.0)
    grid = build_grid([c], 10)
    tables = {0: tabulate_acquisition(ramp, Mechanism.SECOND_PRICE, grid.knots)}
    soft = solve_plan([c], tables, grid, mode=PlanMode.BEST_EFFORT)
    assert soft.status is PlanStatus.OPTIMAL
    assert soft.objective == pytest.approx(strict.objective, rel=1e-9)


def test_bid_independent_of_contract_identity():
    # splitting one contract into two identical halves with the same
    # aggregate leaves the objective unchanged
    curve = ramp_curve()
    whole = [make_contract(0, {0}, 5.0, 10.0)]
    halves = [make_contract(0, {0}, 2.5, 10.0),
              make_contract(1, {0}, 2.5, 10.0)]
    grids = [build_grid(whole, 8), build_grid(halves, 8)]
    objs = []
    for cs, grid in zip((whole, halves), grids):
        tables = {0: tabulate_acquisition(curve, Mechanism.SECOND_PRICE,
                                          grid.knots)}
        objs.append(solve_plan(cs, tables, grid).objective)
    assert objs[0] == pytest.approx(objs[1], abs=1e-9)


# -- duals ------------------------------------------------------------------

def test_pseudo_bids_second_price():
    plan, tables, grid, c, curve = plan_single(
        Mechanism.SECOND_PRICE, K=6, rate_points=2049, segments=2048)
    pb = extract_pseudo_bids(plan)
    assert pb.rho[0] == pytest.approx(0.5, abs=1e-3)
    assert pb.max_residual <= 1e-6
    bp = reconstruct_paths(plan, {0: curve})
    assert np.allclose(bp.bids[0], pb.rho[0], atol=1e-3)


def test_pseudo_bids_first_price_maps_through_marginal_rate():
    # for the ramp the first-price marginal-cost map is 2x, so the optimal
    # bid is half the pseudo-bid
    curve = ramp_curve(2049)
    c = make_contract(0, {0}, 5.0, 10.0)
    grid = build_grid([c], 5)
    tables = {0: tabulate_acquisition(curve, Mechanism.FIRST_PRICE, grid.knots,
                                      rate_points=8193, segments=8192)}
    plan = solve_plan([c], tables, grid)
    pb = extract_pseudo_bids(plan)
    bp = reconstruct_paths(plan, {0: curve})
    assert pb.rho[0] == pytest.approx(1.0, abs=1e-3)
    assert bp.bids[0, 0] == pytest.approx(pb.rho[0] / 2, abs=1e-3)


def test_expired_contract_keeps_mu_consistent():
    cs = [make_contract(0, {0}, 1.0, 2.0), make_contract(1, {0}, 2.0, 10.0)]
    curve = ramp_curve()
    grid = build_grid(cs, 8)
    tables = {0: tabulate_acquisition(curve, Mechanism.SECOND_PRICE,
                                      grid.knots)}
    plan = solve_plan(cs, tables, grid)
    pb = extract_pseudo_bids(plan)
    assert pb.max_residual <= 1e-6


def test_missing_duals_is_structured_error(ramp):
    c = make_contract(0, {0}, 20.0, 10.0)
    grid = build_grid([c], 6)
    tables = {0: tabulate_acquisition(ramp, Mechanism.SECOND_PRICE, grid.knots)}
    plan = solve_plan([c], tables, grid)
    assert plan.status is PlanStatus.INFEASIBLE
    with pytest.raises((MissingDualsError, ValueError)):
        extract_pseudo_bids(plan)


# -- reconstruction ---------------------------------------------------------

def test_single_contract_gets_full_allocation():
    plan, tables, grid, c, curve = plan_single(Mechanism.SECOND_PRICE, K=8)
    bp = reconstruct_paths(plan, {0: curve})
    gamma = bp.gamma[0, 0]
    assert np.all(gamma[plan.supply[0] > 0] == pytest.approx(1.0))


def test_even_split_yields_half_each():
    cs = [make_contract(0, {0}, 2.5, 10.0), make_contract(1, {0}, 2.5, 10.0)]
    curve = ramp_curve()
    grid = build_grid(cs, 8)
    tables = {0: tabulate_acquisition(curve, Mechanism.SECOND_PRICE,
                                      grid.knots)}
    plan = solve_plan(cs, tables, grid)
    bp = reconstruct_paths(plan, {0: curve})
    sums = bp.gamma.sum(axis=0)[0]
    assert np.all(sums[plan.supply[0] > 0] <= 1.0 + 1e-7)
    # equal demands -> th same total; individual splits are solver's choice
    dk = grid.deltas
    for i in range(2):
        got = float((plan.rates[i, 0] * dk).sum())
        assert got == pytest.approx(2.5, abs=1e-6)


def test_zero_supply_interval_never_bids():
    cs = [make_contract(0, {0}, 1.0, 2.0)]
    curve = ramp_curve()
    grid = build_grid(cs, 4)
    tables = {0: tabulate_acquisition(curve, Mechanism.SECOND_PRICE,
                                      grid.knots)}
    plan = solve_plan(cs, tables, grid)
    plan.supply[0, -1] = 0.0  # force an idle interval
    bp = reconstruct_paths(plan, {0: curve})
    assert bp.bids[0, -1] == -math.inf
    assert np.all(bp.gamma[:, 0, -1] == 0.0)


def test_second_price_bids_constant_between_deadlines():
    cs = [make_contract(0, {0}, 2.0, 4.0), make_contract(1, {0}, 2.0, 10.0)]
    curve = ramp_curve()
    grid = build_grid(cs, 12)
    tables = {0: tabulate_acquisition(curve, Mechanism.SECOND_PRICE,
                                      grid.knots)}
    plan = solve_plan(cs, tables, grid)
    bp = reconstruct_paths(plan, {0: curve})
    knots = grid.knots[1:]
    first_window = bp.bids[0][knots <= 4.0 + 1e-9]
    second_window = bp.bids[0][knots > 4.0 + 1e-9]
    assert np.std(first_window) <= 1e-6
    assert np.std(second_window) <= 1e-6


# -- duality ----------------------------------------------------------------

def test_duality_gap_in_band(mechanism):
    plan, tables, grid, c, curve = plan_single(mechanism, K=16)
    report = duality_gap(plan, tables)
    assert report.gap >= -1e-6
    assert abs(report.gap) <= 1e-5 * abs(report.primal) + 1e-9


def test_conjugate_negative_price_sentinel():
    plan, tables, *_ = plan_single(Mechanism.SECOND_PRICE, K=6)
    assert tables[0].tables[0].conjugate(-0.1) == math.inf


@given(st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=20)
def test_weak_duality_for_scaled_pseudo_bids(theta):
    plan, tables, grid, c, curve = plan_single(Mechanism.SECOND_PRICE, K=10)
    rho = plan.rho * theta
    dual = dual_objective([c], grid, tables, rho)
    assert dual <= plan.objective + 1e-9


def test_weak_duality_for_random_feasible_duals():
    rng = np.random.default_rng(0)
    cs = [make_contract(0, {0}, 2.0, 6.0),
          make_contract(1, {0, 1}, 3.0, 10.0)]
    curves = {0: ramp_curve(), 1: ramp_curve(rate=1.5)}
    grid = build_grid(cs, 10)
    tables = {j: tabulate_acquisition(curves[j], Mechanism.SECOND_PRICE,
                                      grid.knots, item_type=j)
              for j in curves}
    plan = solve_plan(cs, tables, grid)
    for _ in range(25):
        rho = rng.uniform(0.0, 1.2, size=2)
        assert dual_objective(cs, grid, tables, rho) <= plan.objective + 1e-9


def test_discretization_stays_within_band_at_k80():
    plan, *_ = plan_single(Mechanism.SECOND_PRICE, K=80)
    assert plan.objective == pytest.approx(1.25, rel=0.01)
