import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from bidplan.convexify import (EnvelopeSolverError, PiecewiseAffineConvex,
                               check_alpha_concavity, convex_majorant,
                               ell_alpha, sparsify, tabulate_acquisition)
from bidplan.market import Mechanism, SupplyCurve, ramp_curve


def bimodal_curve(n=241):
    """Mixture of two well-separated Normal CDFs: the near-plateau between
    the modes breaks log-concavity while the curve stays strictly
    increasing."""
    grid = np.linspace(0.0, 4.0, n)
    w = 0.5 * norm.cdf((grid - 1.0) / 0.3) + 0.5 * norm.cdf((grid - 3.0) / 0.3)
    w = np.clip(w, 1e-12, 1.0)
    return SupplyCurve(grid, [0.0], [w], [1.0])


# -- alpha-concavity --------------------------------------------------------

def test_exponential_curve_is_log_concave():
    grid = np.linspace(-3.0, 0.0, 101)
    curve = SupplyCurve(grid, [0.0], [np.exp(grid)], [1.0])
    report = check_alpha_concavity(curve, 1.0)
    assert report.holds
    # log of exp is linear: second differences vanish
    assert abs(report.worst_violation) < 1e-9


def test_ramp_is_two_concave():
    curve = ramp_curve(201, bid_floor=0.01)
    report = check_alpha_concavity(curve, 2.0)
    # oracle: sign of divided second differences of 1 - 1/W on the same grid
    g = 1.0 - 1.0 / curve.win_prob[0]
    slopes = np.diff(g) / np.diff(curve.bid_grid)
    assert np.max(np.diff(slopes)) <= 1e-9
    assert report.holds
    assert report.hierarchy_ok


def test_bimodal_fails_log_concavity():
    curve = bimodal_curve()
    report = check_alpha_concavity(curve, 1.0)
    # oracle: direct second-difference scan of log W
    g = np.log(curve.win_prob[0])
    slopes = np.diff(g) / np.diff(curve.bid_grid)
    assert np.max(np.diff(slopes)) > 1e-9
    assert not report.holds
    # the violation sits on the inter-mode plateau
    assert 1.2 < report.location < 2.8


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_hierarchy_alpha_implies_beta(alpha):
    curve = ramp_curve(101, bid_floor=0.05)
    report = check_alpha_concavity(curve, alpha)
    if report.holds:
        assert report.hierarchy_ok
        for beta in report.betas_checked:
            assert check_alpha_concavity(curve, beta).holds


def test_ell_alpha_forms():
    x = np.array([0.5, 1.0, 2.0])
    assert np.allclose(ell_alpha(x, 1.0), np.log(x))
    assert np.allclose(ell_alpha(x, 2.0), 1.0 - 1.0 / x)
    with pytest.raises(ValueError):
        ell_alpha(np.array([0.0, 1.0]), 1.0)


def test_rejects_nonpositive_values():
    with pytest.raises(ValueError):
        check_alpha_concavity(bimodal_curve(), -1.0)


# -- convex majorant --------------------------------------------------------

def test_already_feasible_input_unchanged():
    grid = np.array([0.0, 1.0, 2.0])
    vals = np.array([0.0, 0.25, 1.0])
    out = convex_majorant(grid, vals)
    assert np.array_equal(out.values, vals)


def test_fixture_0112_beats_witness():
    # witness [0.25, 1, 1.75, 2.5] is feasible with objective 0.875/4,
    # so the optimum cannot exceed it
    grid = np.arange(4.0)
    vals = np.array([0.0, 1.0, 1.0, 2.0])
    out = convex_majorant(grid, vals)
    obj = np.mean((out.values - vals) ** 2)
    assert obj <= 0.875 / 4 + 1e-9
    assert np.all(out.values >= vals - 1e-8)
    assert np.all(np.diff(out.values) >= -1e-8)
    assert np.all(np.diff(out.values, 2) >= -1e-8)


def test_strictly_monotone_input_keeps_strict_monotonicity():
    grid = np.linspace(0.0, 1.0, 41)
    vals = np.sqrt(grid)  # strictly increasing, concave: needs repair
    out = convex_majorant(grid, vals)
    assert np.all(np.diff(out.values) > 0)


def test_idempotence():
    rng = np.random.default_rng(5)
    grid = np.linspace(0.0, 1.0, 60)
    vals = np.cumsum(rng.uniform(0, 0.1, 60)) + 0.2 * np.sin(9 * grid)
    once = convex_majorant(grid, vals)
    twice = convex_majorant(once.knots, once.values)
    assert np.max(np.abs(twice.values - once.values)) <= 1e-7


@given(st.integers(min_value=0, max_value=10_000))
def test_random_vectors_satisfy_constraints(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 50))
    vals = np.cumsum(rng.normal(0.1, 1.0, n))
    grid = np.arange(float(n))
    out = convex_majorant(grid, vals)
    assert np.all(out.values >= vals - 1e-8)
    assert np.all(np.diff(out.values) >= -1e-8)
    assert np.all(np.diff(out.values, 2) >= -1e-8)


def test_flat_input_stays_flat():
    grid = np.linspace(0.0, 1.0, 10)
    out = convex_majorant(grid, np.full(10, 0.7))
    assert np.allclose(out.values, 0.7)


def test_rejects_bad_grid():
    with pytest.raises(ValueError):
        convex_majorant(np.array([0.0, 0.0, 1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        convex_majorant(np.array([0.0, 1.0]), np.zeros(2))
    with pytest.raises(ValueError):
        convex_majorant(np.linspace(0, 1, 4), np.array([0, 1, np.inf, 2.0]))


# -- pw-affine container ----------------------------------------------------

def test_evaluation_extends_end_segments():
    f = PiecewiseAffineConvex(np.array([0.0, 1.0, 2.0]),
                              np.array([0.0, 1.0, 3.0]))
    assert f(0.5) == pytest.approx(0.5)
    assert f(3.0) == pytest.approx(5.0)   # last slope 2 continues
    assert f(-1.0) == pytest.approx(-1.0)  # first slope 1 continues


def test_validator_rejects_nonconvex():
    with pytest.raises(ValueError):
        PiecewiseAffineConvex(np.array([0.0, 1.0, 2.0]),
                              np.array([0.0, 1.0, 1.5]))


def test_conjugate_of_quadratic_table():
    s = np.linspace(0.0, 1.0, 513)
    f = PiecewiseAffineConvex(s, s ** 2)
    for p in (0.0, 0.3, 0.9, 1.7):
        assert f.conjugate(p) == pytest.approx(
            p * p / 4 if p <= 2 else p - 1, abs=1e-3)
    assert f.conjugate(-0.5) == np.inf


# -- sparsify ---------------------------------------------------------------

def quad_table(n=257):
    s = np.linspace(0.0, 1.0, n)
    return PiecewiseAffineConvex(s, s ** 2)


def test_sparsify_identity_at_full_budget():
    f = quad_table()
    assert sparsify(f, len(f.knots) - 1) is f


def test_sparsify_chord_lies_above():
    f = quad_table()
    out = sparsify(f, 2)
    assert out(0.5) >= 0.25 - 1e-12
    assert len(out.knots) <= 3


def test_sparsify_majorizes_everywhere():
    f = quad_table()
    out = sparsify(f, 8)
    dense = np.linspace(0, 1, 700)
    assert np.all(out(dense) >= f(dense) - 1e-12)
    assert len(out.knots) <= 9


def test_sparsify_gap_shrinks_as_budget_doubles():
    f = quad_table()
    dense = np.linspace(0, 1, 1500)
    gaps = []
    for m in (2, 4, 8, 16):
        out = sparsify(f, m)
        gaps.append(np.max(out(dense) - f(dense)))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


# -- tabulation -------------------------------------------------------------

def test_second_price_tabulation_is_noop_repair(ramp):
    table = tabulate_acquisition(ramp, Mechanism.SECOND_PRICE, [0.0],
                                 rate_points=256, segments=255)
    t = table.tables[0]
    # already convex: the majorant leaves the samples untouched
    raw = ramp.acquisition_profile(Mechanism.SECOND_PRICE, 0.0, t.knots)
    assert np.max(np.abs(t.values - raw)) < 1e-8
    assert np.max(np.abs(t.values - np.asarray(t.knots) ** 2 / 2)) < 1e-8


def test_first_price_two_concave_majorant_close(ramp):
    table = tabulate_acquisition(ramp, Mechanism.FIRST_PRICE, [0.0],
                                 rate_points=256, segments=255)
    t = table.tables[0]
    raw = ramp.acquisition_profile(Mechanism.FIRST_PRICE, 0.0, t.knots)
    assert np.max(np.abs(t.values - raw)) < 1e-6


def test_first_price_bimodal_restored_convex():
    curve = bimodal_curve()
    table = tabulate_acquisition(curve, Mechanism.FIRST_PRICE, [0.0],
                                 rate_points=256, segments=64)
    t = table.tables[0]
    # restored convexity
    slopes = np.diff(t.values) / np.diff(t.knots)
    assert np.all(np.diff(slopes) >= -1e-8)
    # and strictly above the raw acquisition cost somewhere
    raw = curve.acquisition_profile(Mechanism.FIRST_PRICE, 0.0, t.knots)
    assert np.max(t.values - raw) > 1e-3
    assert np.all(t.values >= raw - 1e-8)


def test_tabulation_error_carries_context():
    # degenerate rate range triggers the tagged error path
    grid = np.linspace(1e-6, 1.0, 11)
    curve = SupplyCurve(grid, [0.0], [grid], [0.0])  # zero arrival rate
    with pytest.raises(ValueError):
        tabulate_acquisition(curve, Mechanism.SECOND_PRICE, [0.0])


def test_serialization_round_trip(ramp):
    table = tabulate_acquisition(ramp, Mechanism.SECOND_PRICE, [0.0, 1.0],
                                 rate_points=64, segments=16)
    from bidplan.convexify import AcquisitionTable
    again = AcquisitionTable.from_dict(table.to_dict())
    assert again.mechanism is Mechanism.SECOND_PRICE
    assert np.array_equal(again.tables[1].values, table.tables[1].values)
