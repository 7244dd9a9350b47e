import json
from datetime import datetime, timedelta

import numpy as np
import pytest

from bidplan.estimate import (ImpressionRecord, MalformedLogError, RateCurve,
                              compose_supply_curve, estimate_curves,
                              estimate_rate, estimate_win_prob, load_curves,
                              normal_reference_bandwidth, parse_impressions,
                              save_curves)
from bidplan.market import Mechanism
from bidplan.synthetic import demo_market, write_impression_log

T0 = datetime(2024, 3, 4)


def rec(hours, label="a", price=1.0):
    return ImpressionRecord(T0 + timedelta(hours=hours), label, price)


# -- parsing ----------------------------------------------------------------

def test_empty_file_returns_nothing(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("timestamp,item_type,price\n")
    records, skipped = parse_impressions(p)
    assert records == [] and skipped == 0


def test_single_row(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("timestamp,item_type,price\n2024-03-04T01:02:03,a,1.5\n")
    records, skipped = parse_impressions(p)
    assert len(records) == 1 and skipped == 0
    assert records[0].price == 1.5
    assert records[0].item_type == "a"


def test_negative_price_skipped_and_counted(tmp_path):
    p = tmp_path / "log.csv"
    rows = ["2024-03-04T00:00:00,a,1.0"] * 200 + ["2024-03-04T00:00:01,a,-2"]
    p.write_text("timestamp,item_type,price\n" + "\n".join(rows) + "\n")
    records, skipped = parse_impressions(p)
    assert skipped == 1
    assert len(records) == 200


def test_over_cap_malformed_aborts(tmp_path):
    p = tmp_path / "log.csv"
    rows = ["2024-03-04T00:00:00,a,1.0"] * 10 + ["garbage,x,?"] * 5
    p.write_text("timestamp,item_type,price\n" + "\n".join(rows) + "\n")
    with pytest.raises(MalformedLogError):
        parse_impressions(p)


def test_column_mapping_ipinyou_style(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("timestamp,user_tag,market_price\n"
                 "2024-03-04T00:00:00,10063,77\n")
    records, _ = parse_impressions(
        p, columns={"item_type": "user_tag", "price": "market_price"})
    assert records[0].item_type == "10063"
    assert records[0].price == 77.0


def test_json_lines_accepted(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text(json.dumps({"timestamp": "2024-03-04T00:00:00",
                             "item_type": "a", "price": 2.0}) + "\n")
    records, _ = parse_impressions(p)
    assert records[0].price == 2.0


# -- rate estimation --------------------------------------------------------

def test_constant_interarrival_gives_exact_rate():
    records = [rec(i * 0.01) for i in range(24 * 100 + 1)]
    rate = estimate_rate(records, "a")
    assert np.allclose(rate.hourly, 100.0, rtol=1e-9)


def test_poisson_rate_within_ten_percent():
    rng = np.random.default_rng(3)
    times = np.cumsum(rng.exponential(1.0 / 100.0, size=10_000))
    records = [rec(float(t)) for t in times]
    rate = estimate_rate(records, "a")
    assert np.all(np.abs(rate.hourly - 100.0) / 100.0 <= 0.10)


def test_periodicity_is_exact():
    records = [rec(i * 0.02) for i in range(3000)]
    rate = estimate_rate(records, "a")
    assert rate(0.0) == rate(24.0)
    assert rate(1.25) == rate(25.25)


def test_rate_nonnegative_everywhere():
    hourly = np.zeros(24)
    hourly[12] = 50.0
    curve = RateCurve(hourly=hourly)
    ts = np.linspace(0, 24, 2401)
    assert all(curve(t) >= 0.0 for t in ts)


def test_sparse_bucket_borrows_global_mean(caplog):
    # all records in hour 0: the other hours borrow
    records = [rec(i * 0.001) for i in range(500)]
    rate = estimate_rate(records, "a")
    assert rate.hourly[5] == pytest.approx(rate.hourly[13])


def test_unknown_type_rejected():
    with pytest.raises(ValueError):
        estimate_rate([rec(0.0)], "zzz")


def test_outlier_gaps_have_bounded_influence():
    # one huge gap (a data hole) cannot crater the hourly rate
    base = [rec(i * 0.01) for i in range(200)]
    hole = [rec(20.0 + i * 0.01) for i in range(200)]
    rate = estimate_rate(base + hole, "a")
    assert rate.hourly[0] > 50.0  # ~100/h except the clamped hole


# -- win probabilities ------------------------------------------------------

def test_single_atom_kde_is_gaussian_cdf():
    records = [rec(i * 0.01, price=5.0) for i in range(2000)]
    est = estimate_win_prob(records, "a", bandwidth=1.0, max_bid=10.0,
                            bid_points=201)
    i5 = int(np.argmin(np.abs(est.bid_grid - 5.0)))
    assert est.table[0][i5] == pytest.approx(0.5, abs=1e-9)


def test_cdf_limits():
    records = [rec(i * 0.01, price=5.0) for i in range(2000)]
    est = estimate_win_prob(records, "a", bandwidth=0.5, max_bid=50.0)
    assert est.table[0][-1] == pytest.approx(1.0, abs=1e-6)
    assert 0.0 < est.table[0][0] < 0.01  # positive but tiny at bid 0


def test_uniform_prices_close_to_true_cdf():
    rng = np.random.default_rng(0)
    records = [rec(3.0 + 1e-4 * i, price=float(p))
               for i, p in enumerate(rng.uniform(0, 10, size=10_000))]
    est = estimate_win_prob(records, "a", max_bid=10.0, bid_points=401)
    true = np.clip(est.bid_grid / 10.0, 0.0, 1.0)
    assert np.max(np.abs(est.table[3] - true)) <= 0.03


def test_sparse_hours_pool_neighbors():
    records = [rec(h + i / 60.0, price=1.0 + h)
               for h in (0, 1, 2) for i in range(40)]
    est = estimate_win_prob(records, "a", max_bid=5.0)
    assert est.pooled_hours  # far hours had to pool
    assert max(est.pooled_hours.values()) >= 1


def test_bandwidth_rule():
    x = np.random.default_rng(1).normal(0, 2.0, size=400)
    bw = normal_reference_bandwidth(x)
    sd = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    assert bw == pytest.approx(1.06 * min(sd, iqr / 1.34) * 400 ** -0.2)


# -- composition ------------------------------------------------------------

def test_compose_scales_by_rate():
    records = [rec(i * 0.005, price=1.0) for i in range(5000)]
    rate = estimate_rate(records, "a")
    win = estimate_win_prob(records, "a", bandwidth=0.5, max_bid=4.0)
    curve = compose_supply_curve(rate, win)
    t = 0.5
    x = 2.0
    xi = int(np.argmin(np.abs(win.bid_grid - x)))
    assert curve.eval_supply(win.bid_grid[xi], t) == pytest.approx(
        curve.rate_at(t) * curve.win_prob_row(t)[xi], rel=1e-9)


def test_beyond_truncation_flat():
    records = [rec(i * 0.005, price=1.0) for i in range(5000)]
    rate = estimate_rate(records, "a")
    win = estimate_win_prob(records, "a", bandwidth=0.5, max_bid=4.0)
    curve = compose_supply_curve(rate, win)
    assert curve.eval_supply(4.0, 1.0) == curve.eval_supply(100.0, 1.0)


def test_estimation_is_deterministic(tmp_path):
    spec = demo_market(2)
    p = tmp_path / "log.csv"
    write_impression_log(spec, seed=6, hours=60.0, path=p)
    records, _ = parse_impressions(p)
    c1, l1 = estimate_curves(records)
    c2, l2 = estimate_curves(records)
    assert l1 == l2
    for j in c1:
        assert np.array_equal(c1[j].win_prob, c2[j].win_prob)
        assert np.array_equal(c1[j].rate, c2[j].rate)


def test_estimated_curves_pass_validators_and_roundtrip(tmp_path):
    spec = demo_market(2)
    p = tmp_path / "log.csv"
    write_impression_log(spec, seed=8, hours=72.0, path=p)
    records, _ = parse_impressions(p)
    curves, labels = estimate_curves(records)  # validators run in __init__
    out = tmp_path / "curves.json"
    save_curves(curves, labels, out)
    again, labels2 = load_curves(out)
    assert labels == labels2
    for j in curves:
        assert np.array_equal(again[j].win_prob, curves[j].win_prob)


def test_cost_ordering_on_estimated_curves(tmp_path):
    spec = demo_market(2)
    p = tmp_path / "log.csv"
    write_impression_log(spec, seed=8, hours=72.0, path=p)
    records, _ = parse_impressions(p)
    curves, _ = estimate_curves(records)
    for j, curve in curves.items():
        xs = np.linspace(0.0, curve.max_bid, 64)
        for t in range(0, 24, 6):
            for x in xs:
                f1 = curve.cost_rate(Mechanism.FIRST_PRICE, x, float(t))
                f2 = curve.cost_rate(Mechanism.SECOND_PRICE, x, float(t))
                assert f2 <= f1 + 1e-12
