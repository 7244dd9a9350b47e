"""Command-line front end: estimate, convexify, plan, simulate, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from bidplan.convexify import save_acquisition_tables, tabulate_acquisition
from bidplan.estimate import (IPINYOU_COLUMNS, estimate_curves,
                              parse_impressions, save_curves)
from bidplan.market import Mechanism
from bidplan.planner import (PlanMode, build_grid, check_adequate_supply,
                             duality_gap, reconstruct_paths, solve_plan)
from bidplan.risk import RiskConfig
from bidplan.scenario import load_scenario
from bidplan.simulator import (Controller, ControllerConfig, _rep_seeds,
                               monte_carlo, run_sim)
from bidplan.synthetic import demo_market, write_impression_log


def _mechanism(name):
    return Mechanism.FIRST_PRICE if name == "first" else Mechanism.SECOND_PRICE


def _parse_columns(pairs):
    out = {}
    for pair in pairs.split(","):
        dst, _, src = pair.partition("=")
        if not src:
            raise argparse.ArgumentTypeError(
                f"column mapping {pair!r} is not dst=src")
        out[dst.strip()] = src.strip()
    return out


def cmd_estimate(args):
    columns = dict(IPINYOU_COLUMNS) if args.ipinyou else {}
    if args.columns:
        columns.update(args.columns)
    records, skipped = parse_impressions(args.log, columns=columns or None)
    if args.window:
        lo, _, hi = args.window.partition(":")
        t0 = min(r.timestamp for r in records)
        keep = lambda r: (float(lo) <=
                          (r.timestamp - t0).total_seconds() / 3600.0
                          < float(hi))
        records = [r for r in records if keep(r)]
    curves, labels = estimate_curves(records, bid_points=args.bid_points,
                                     max_bid=args.max_bid)
    save_curves(curves, labels, args.output)
    print(f"estimated {len(curves)} curves from {len(records)} records "
          f"({skipped} skipped) -> {args.output}")


def cmd_convexify(args):
    from bidplan.estimate import load_curves
    curves, labels = load_curves(args.curves)
    mech = _mechanism(args.mechanism)
    knots = np.arange(0.0, args.hours + 1e-9, args.knot_step)
    tables = [tabulate_acquisition(curves[j], mech, knots, item_type=j,
                                   rate_points=args.rate_points,
                                   segments=args.segments)
              for j in sorted(curves)]
    save_acquisition_tables(tables, args.output)
    print(f"tabulated {len(tables)} acquisition tables "
          f"({len(knots)} knots each) -> {args.output}")


def _risk_from_args(args):
    if args.delta is not None and args.epsilon is not None:
        sys.exit("set at most one of --delta / --epsilon")
    if args.delta is not None:
        return RiskConfig(delta=args.delta)
    if args.epsilon is not None:
        return RiskConfig(epsilon=args.epsilon)
    return None


def cmd_plan(args):
    sc = load_scenario(args.scenario)
    mech = _mechanism(args.mechanism) if args.mechanism \
        else (sc.controller.planning_mechanism or sc.market_mechanism)
    contracts = sc.contracts
    risk = _risk_from_args(args) or sc.controller.risk
    if risk is not None:
        from bidplan.market import make_contract
        contracts = [make_contract(
            c.id, c.eligible_types,
            (1.0 + risk.delta_for(c.quantity, c.deadline)) * c.quantity,
            c.deadline) for c in contracts]
    grid = build_grid(contracts, args.grid_k or sc.controller.grid_k)
    tables = {j: tabulate_acquisition(
        sc.curves[j], mech, grid.knots, item_type=j,
        rate_points=sc.controller.rate_points,
        segments=sc.controller.segments) for j in sorted(sc.curves)}
    mode = PlanMode(args.mode)
    plan = solve_plan(contracts, tables, grid, mode=mode, curves=sc.curves)
    out = {"schema_version": 1, "plan": plan.to_dict()}
    if plan.status.value != "infeasible":
        bidplan = reconstruct_paths(plan, sc.curves)
        out["bid_plan"] = bidplan.to_dict()
        if plan.status.value == "optimal":
            gap = duality_gap(plan, tables)
            out["duality"] = {"primal": gap.primal, "dual": gap.dual,
                              "gap": gap.gap,
                              "relative_gap": gap.relative_gap}
    else:
        rep = plan.feasibility
        out["feasibility"] = {
            "feasible": rep.feasible, "margin": rep.margin,
            "slack": {str(k): v for k, v in rep.slack.items()},
        } if rep else None
    with open(args.output, "w") as fh:
        json.dump(out, fh, sort_keys=True, indent=1)
    print(f"plan status {plan.status.value}, objective "
          f"{plan.objective:.6g} -> {args.output}")


def cmd_simulate(args):
    sc = load_scenario(args.scenario)
    if sc.sampler is None:
        sys.exit("scenario has no sampleable market (curves-only)")
    if args.mechanism:
        sc.market_mechanism = _mechanism(args.mechanism)
    if args.sigma is not None:
        sc.sigma_bid = args.sigma
    deltas = [float(d) for d in args.delta.split(",")] if args.delta else [None]
    updates = ([None if u in ("none", "") else float(u)
                for u in args.update_hours.split(",")]
               if args.update_hours else [sc.controller.update_hours])
    variants = {}
    meta = {}
    for d in deltas:
        for u in updates:
            name = f"delta_{'cfg' if d is None else d}_update_" \
                   f"{'none' if u is None else u}"
            over = {"update_hours": u}
            if d is not None:
                over["risk"] = RiskConfig(delta=d) if d > 0 else None
            variants[name] = ControllerConfig(**{**vars(sc.controller), **over})
            meta[name] = {"delta": d, "update_hours": u}
    summary = monte_carlo(sc, reps=args.reps, master_seed=args.seed,
                          variants=variants, workers=args.workers)
    for name in variants:
        summary["variants"][name]["config"] = meta[name]
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    # event log of the first replication, first variant, for inspection
    name0 = sorted(variants)[0]
    ev, pol = _rep_seeds(args.seed, 0)
    ctrl = Controller(sc.curves, sc.market_mechanism, variants[name0])
    res = run_sim(sc.sampler, ctrl, sc.contracts, sc.market_mechanism,
                  sc.horizon, sigma_bid=sc.sigma_bid, event_rng=ev,
                  policy_rng=pol, record_events=True)
    with open(outdir / "events_rep0.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "event", "type", "price", "bid", "won", "contract"])
        for n, (t, j, price, bid, won, cid) in enumerate(res.events):
            w.writerow([f"{t:.6f}", n, sc.labels.get(j, j), f"{price:.6f}",
                        "" if bid is None else f"{bid:.6f}",
                        int(won), "" if cid is None else cid])
    print(f"{args.reps} replications x {len(variants)} variants "
          f"-> {outdir}/summary.json")


def cmd_report(args):
    with open(args.summary) as fh:
        summary = json.load(fh)
    rows = []
    for name, v in summary["variants"].items():
        cfg = v.get("config", {})
        rows.append({
            "variant": name,
            "delta": cfg.get("delta"),
            "update_hours": cfg.get("update_hours"),
            "c_avg_mean": v["c_avg"].get("mean"),
            "c_avg_p2.5": v["c_avg"].get("p2.5"),
            "c_avg_p97.5": v["c_avg"].get("p97.5"),
            "fulfilled_share": v.get("fulfilled_share"),
            "spend_per_item_mean": v["spend_per_item"].get("mean"),
            "spend_per_item_fulfilled_mean":
                v["spend_per_item_fulfilled"].get("mean"),
        })
    rows.sort(key=lambda r: (str(r["update_hours"]), r["delta"] or 0))
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    for fname, cols in (
            ("fulfillment_vs_delta.csv",
             ["variant", "delta", "update_hours", "c_avg_mean", "c_avg_p2.5",
              "c_avg_p97.5", "fulfilled_share"]),
            ("cost_vs_delta.csv",
             ["variant", "delta", "update_hours", "spend_per_item_mean",
              "spend_per_item_fulfilled_mean"])):
        with open(outdir / fname, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
    print(f"wrote fulfillment_vs_delta.csv and cost_vs_delta.csv -> {outdir}")


def cmd_synth(args):
    spec = demo_market(args.types)
    n = write_impression_log(spec, seed=args.seed, hours=args.hours,
                             path=args.output)
    print(f"wrote {n} impressions ({args.types} types, "
          f"{args.hours}h) -> {args.output}")


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="bidplan",
        description="Minimum-cost bidding and allocation planning for "
                    "auction contract fulfillment.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="impression log -> supply curve JSON")
    p.add_argument("--log", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--columns", type=_parse_columns, default=None,
                   help="standard=source column mapping, comma separated")
    p.add_argument("--ipinyou", action="store_true",
                   help="map user_tag->item_type, market_price->price")
    p.add_argument("--max-bid", type=float, default=None)
    p.add_argument("--bid-points", type=int, default=129)
    p.add_argument("--window", default=None,
                   help="use only records in [H0:H1) hours from log start")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("convexify",
                       help="curve JSON -> acquisition table JSON")
    p.add_argument("--curves", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mechanism", choices=["first", "second"],
                   default="second")
    p.add_argument("--hours", type=float, default=24.0)
    p.add_argument("--knot-step", type=float, default=1.0)
    p.add_argument("--rate-points", type=int, default=256)
    p.add_argument("--segments", type=int, default=32)
    p.set_defaults(func=cmd_convexify)

    p = sub.add_parser("plan", help="scenario -> plan + bid plan JSON")
    p.add_argument("--scenario", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mechanism", choices=["first", "second"], default=None)
    p.add_argument("--grid-k", type=int, default=None)
    p.add_argument("--mode", choices=["strict", "best-effort"],
                   default="strict")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="scenario -> Monte Carlo summary")
    p.add_argument("--scenario", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--update-hours", default=None,
                   help="comma list; 'none' disables scheduled updates")
    p.add_argument("--delta", default=None, help="comma list of inflations")
    p.add_argument("--sigma", type=float, default=None,
                   help="bid randomization std dev")
    p.add_argument("--mechanism", choices=["first", "second"], default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="summary JSON -> plot-data CSVs")
    p.add_argument("--summary", required=True)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic impression log")
    p.add_argument("--output", required=True)
    p.add_argument("--hours", type=float, default=96.0)
    p.add_argument("--types", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    main()
