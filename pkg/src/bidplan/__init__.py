"""Minimum-cost contract fulfillment in real-time auctions.

Library layout:

- :mod:`bidplan.market` — supply curves and auction cost primitives
- :mod:`bidplan.convexify` — concavity checks and convex piecewise-affine envelopes
- :mod:`bidplan.planner` — the discretized planning LP, duals, and bid paths
- :mod:`bidplan.risk` — supply inflation and chance-constrained bids
- :mod:`bidplan.simulator` — event-driven auction simulation and Monte Carlo
- :mod:`bidplan.estimate` — impression-log ingestion and curve estimation
- :mod:`bidplan.cli` — the command-line front end
"""

from bidplan.market import Contract, ItemType, Mechanism, SupplyCurve, make_contract

__all__ = [
    "Contract",
    "ItemType",
    "Mechanism",
    "SupplyCurve",
    "make_contract",
]
