"""Scenario files: contracts plus a market source plus run configuration.

A scenario is a JSON or TOML document; the market comes either from a
synthetic generator spec (curves and sampler derived from the same
distributions) or from an impression log (curves estimated, sampler drawn
from the log's own hourly buckets).  Relative paths resolve against the
scenario file's directory, or BIDPLAN_DATA_DIR when set.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from bidplan.estimate import estimate_curves, load_curves, parse_impressions
from bidplan.market import Mechanism, make_contract
from bidplan.risk import RiskConfig
from bidplan.simulator import Controller, ControllerConfig, MarketSampler
from bidplan.synthetic import MarketSpec, build_curves, build_sampler

SCHEMA_VERSION = 1


@dataclass
class Scenario:
    """Everything one simulation or planning run needs, cross-checked."""

    contracts: list
    curves: dict            # type id -> SupplyCurve
    sampler: MarketSampler | None
    market_mechanism: Mechanism
    horizon: float
    labels: dict = field(default_factory=dict)   # type id -> label
    sigma_bid: float = 0.0
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        for c in self.contracts:
            missing = set(c.eligible_types) - set(self.curves)
            if missing:
                raise ValueError(
                    f"contract {c.id} references types {sorted(missing)} "
                    f"with no curve")

    def make_controller(self, **overrides):
        cfg_kwargs = {**vars(self.controller), **overrides}
        return Controller(self.curves, self.market_mechanism,
                          ControllerConfig(**cfg_kwargs))


def _read_config(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # py3.10: tomllib landed in 3.11
            try:
                import tomli as tomllib
            except ImportError as exc:
                raise RuntimeError(
                    "TOML scenarios need Python >= 3.11 or the tomli "
                    "package; JSON scenarios work everywhere") from exc
        return tomllib.loads(text)
    return json.loads(text)


def _resolve(path, base):
    p = Path(path)
    if p.is_absolute():
        return p
    env = os.environ.get("BIDPLAN_DATA_DIR")
    for root in ([Path(env)] if env else []) + [base]:
        cand = root / p
        if cand.exists():
            return cand
    return base / p


def _controller_config(d):
    risk = None
    if d.get("delta") is not None:
        risk = RiskConfig(delta=float(d["delta"]))
    elif d.get("epsilon") is not None:
        risk = RiskConfig(epsilon=float(d["epsilon"]))
    pm = d.get("planning_mechanism")
    return ControllerConfig(
        grid_k=int(d.get("grid_k", 12)),
        rate_points=int(d.get("rate_points", 256)),
        segments=int(d.get("segments", 32)),
        update_hours=(float(d["update_hours"])
                      if d.get("update_hours") is not None else None),
        risk=risk,
        planning_mechanism=Mechanism(pm) if pm else None,
    )


def load_scenario(path):
    """Parse and materialize a scenario file (curves, sampler, contracts)."""
    base = Path(path).parent
    doc = _read_config(path)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported scenario schema_version {doc.get('schema_version')!r}")
    market = doc["market"]
    if "synthetic" in market:
        spec = MarketSpec.from_dict(market["synthetic"])
        curves = build_curves(spec,
                              n_bids=int(market.get("bid_points", 129)))
        labels = dict(enumerate(spec.labels()))
        sampler = build_sampler(
            spec, seed=int(market.get("seed", 0)),
            per_bucket=int(market.get("per_bucket", 1000)))
    elif "log" in market:
        records, _ = parse_impressions(
            _resolve(market["log"], base), columns=market.get("columns"))
        curves, labels = estimate_curves(
            records,
            bid_points=int(market.get("bid_points", 129)),
            max_bid=market.get("max_bid"))
        sampler = MarketSampler.from_records(
            records, {lab: j for j, lab in labels.items()})
    elif "curves" in market:
        curves, labels = load_curves(_resolve(market["curves"], base))
        sampler = None  # planning-only scenario
    else:
        raise ValueError("market needs one of: synthetic, log, curves")

    by_label = {lab: j for j, lab in labels.items()}
    contracts = []
    for c in doc["contracts"]:
        types = set()
        for t in c["types"]:
            if isinstance(t, str):
                if t not in by_label:
                    raise ValueError(f"unknown item type label {t!r}")
                types.add(by_label[t])
            else:
                types.add(int(t))
        contracts.append(make_contract(c["id"], types, c["quantity"],
                                       c["deadline_hours"]))

    return Scenario(
        contracts=contracts,
        curves=curves,
        sampler=sampler,
        market_mechanism=Mechanism(doc.get("mechanism", "second")),
        horizon=float(doc.get("horizon_hours",
                              max(c.deadline for c in contracts))),
        labels=labels,
        sigma_bid=float(doc.get("sigma_bid", 0.0)),
        controller=_controller_config(doc.get("controller", {})),
    )
