"""Concavity diagnostics and monotone convex piecewise-affine envelopes.

The planner consumes acquisition costs as piecewise-affine convex tables.
First-price costs need not be convex when the win-probability curve fails
2-concavity, so every table passes through a least-squares majorant QP that
enforces majorization, monotonicity, and convexity by finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import cvxopt

from bidplan.market import INFEASIBLE, Mechanism, SCHEMA_VERSION

cvxopt.solvers.options.setdefault("show_progress", False)

#: QP stopping tolerance; constraint violations beyond ACCEPT_TOL are errors.
QP_TOL = 1e-9
ACCEPT_TOL = 1e-8


class EnvelopeSolverError(RuntimeError):
    """QP backend failed; carries the solver status string."""

    def __init__(self, message, status=None, context=None):
        super().__init__(message)
        self.status = status
        self.context = context


@dataclass(frozen=True)
class PiecewiseAffineConvex:
    """Monotone convex piecewise-affine function of a supply rate.

    Stored as knots (increasing rates) and values; segments extend linearly
    beyond the end knots, so evaluation equals the max over segment lines.
    """

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or len(k) < 2:
            raise ValueError("knots/values must be equal-length 1-d, n >= 2")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        scale = max(1.0, float(np.max(np.abs(v))))
        m = np.diff(v) / np.diff(k)
        if np.any(np.diff(v) < -ACCEPT_TOL * scale):
            raise ValueError("values must be monotone non-decreasing")
        if np.any(np.diff(m) < -ACCEPT_TOL * scale / min(np.diff(k))):
            raise ValueError("slopes must be non-decreasing (convexity)")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)
        k.flags.writeable = False
        v.flags.writeable = False

    @property
    def slopes(self):
        return np.diff(self.values) / np.diff(self.knots)

    @property
    def intercepts(self):
        return self.values[:-1] - self.slopes * self.knots[:-1]

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        m = self.slopes
        b = self.intercepts
        lines = m[:, None] * s.ravel()[None, :] + b[:, None]
        out = lines.max(axis=0).reshape(s.shape)
        return float(out) if out.ndim == 0 else out

    def conjugate(self, p):
        """sup_s [p*s - f(s)] over the knot span; +inf sentinel for p < 0.

        Closed form for a piecewise-affine convex function: the sup is
        attained at a knot, so this is max over knots of p*knot - value.
        """
        if p < 0:
            return INFEASIBLE
        return float(np.max(p * self.knots - self.values))

    def to_dict(self):
        return {"knots": self.knots.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["knots"], float), np.asarray(d["values"], float))


@dataclass
class ConcavityReport:
    """Outcome of a discrete alpha-concavity test on one curve at one time."""

    alpha: float
    holds: bool
    worst_violation: float
    location: float
    tolerance: float
    hierarchy_ok: bool = True
    betas_checked: tuple = ()


def ell_alpha(x, alpha):
    """The order-alpha concavity transform: log for alpha=1, else power form."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("ell_alpha requires strictly positive arguments")
    if alpha == 1.0:
        return np.log(x)
    return (x ** (1.0 - alpha) - 1.0) / (1.0 - alpha)


def _worst_convexity_gap(x, g):
    """Largest divided second difference of g on grid x (positive = convex bump)."""
    m = np.diff(g) / np.diff(x)
    jumps = np.diff(m)
    if len(jumps) == 0:
        return 0.0, float(x[0])
    i = int(np.argmax(jumps))
    return float(jumps[i]), float(x[i + 1])


def check_alpha_concavity(curve, alpha, t=0.0, tol=1e-9, betas=None):
    """Test whether ell_alpha of the tabulated win probability is concave at t.

    Concavity is checked through divided differences of the transformed
    values on the bid grid.  When the test holds and `betas` are supplied
    (default alpha+0.5, alpha+1, 2*alpha), the report also records whether
    every larger order holds too, which any true alpha-concave curve must
    satisfy.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    row = curve.win_prob_row(t)
    if np.any(row <= 0):
        raise ValueError("curve has non-positive win probabilities; "
                         "cannot apply the concavity transform")
    g = ell_alpha(row, alpha)
    worst, loc = _worst_convexity_gap(curve.bid_grid, g)
    holds = worst <= tol
    report = ConcavityReport(alpha=float(alpha), holds=holds,
                             worst_violation=worst, location=loc, tolerance=tol)
    if holds:
        if betas is None:
            betas = (alpha + 0.5, alpha + 1.0, 2.0 * alpha)
        betas = tuple(b for b in betas if b > alpha)
        ok = True
        for b in betas:
            gb = ell_alpha(row, b)
            wb, _ = _worst_convexity_gap(curve.bid_grid, gb)
            ok = ok and (wb <= tol)
        report.hierarchy_ok = ok
        report.betas_checked = betas
    return report


def _feasibility_gaps(grid, lam, samples):
    maj = float(np.max(samples - lam))
    dv = np.diff(lam)
    mono = float(np.max(-dv)) if len(dv) else 0.0
    m = dv / np.diff(grid)
    dm = np.diff(m)
    conv = float(np.max(-dm)) if len(dm) else 0.0
    return maj, mono, conv


def convex_majorant(grid, samples):
    """Least-squares monotone convex majorant of samples on a rate grid.

    Solves: minimize mean squared deviation subject to lam_i >= samples_i,
    non-decreasing values, and non-decreasing slopes (divided differences,
    which reduce to plain second differences on uniform grids).  Inputs that
    already satisfy every constraint are returned unchanged — the objective
    is zero there, which is globally optimal — making the QP a no-op for
    already-convex costs and making repeated application exact.
    """
    grid = np.asarray(grid, dtype=float)
    y = np.asarray(samples, dtype=float)
    n = len(y)
    if n < 3:
        raise ValueError("need at least 3 samples")
    if grid.shape != y.shape or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and match samples")
    if not np.all(np.isfinite(y)):
        raise ValueError("samples must be finite")

    scale = max(1.0, float(np.max(np.abs(y))))
    maj, mono, conv = _feasibility_gaps(grid, y, y)
    if max(maj, mono, conv * float(np.min(np.diff(grid)))) <= QP_TOL * scale:
        return PiecewiseAffineConvex(grid, y)

    dx = np.diff(grid)
    P = cvxopt.spmatrix(2.0 / n, range(n), range(n))
    q = cvxopt.matrix(-2.0 / n * y)
    rows, cols, vals, h = [], [], [], []
    r = 0
    for i in range(n):  # -lam_i <= -y_i
        rows.append(r); cols.append(i); vals.append(-1.0); h.append(-y[i]); r += 1
    for i in range(n - 1):  # lam_i - lam_{i+1} <= 0
        rows += [r, r]; cols += [i, i + 1]; vals += [1.0, -1.0]; h.append(0.0); r += 1
    for i in range(1, n - 1):  # slope_i-1 - slope_i <= 0 via divided differences
        a, b = 1.0 / dx[i - 1], 1.0 / dx[i]
        rows += [r, r, r]; cols += [i - 1, i, i + 1]
        vals += [-a, a + b, -b]; h.append(0.0); r += 1
    G = cvxopt.spmatrix(vals, rows, cols, (r, n))
    opts = {"show_progress": False, "abstol": 1e-10, "reltol": 1e-10,
            "feastol": QP_TOL * 0.1, "refinement": 2, "maxiters": 200}
    try:
        sol = cvxopt.solvers.qp(P, q, G, cvxopt.matrix(h), options=opts)
    except (ValueError, ArithmeticError) as exc:
        raise EnvelopeSolverError(f"majorant QP failed: {exc}", status="error") from exc
    if sol["status"] not in ("optimal", "unknown"):
        raise EnvelopeSolverError(f"majorant QP status {sol['status']!r}",
                                  status=sol["status"])
    lam = np.array(sol["x"]).ravel()
    # a uniform lift preserves monotonicity/convexity and closes any
    # residual majorization slack exactly
    lam += max(0.0, float(np.max(y - lam)))
    maj, mono, conv = _feasibility_gaps(grid, lam, y)
    if max(maj, mono, conv) > ACCEPT_TOL * scale:
        raise EnvelopeSolverError(
            f"majorant violates constraints beyond tolerance "
            f"(maj={maj:.2e} mono={mono:.2e} conv={conv:.2e})",
            status=sol["status"])
    # snap away violations below the acceptance threshold so the result
    # validates as convex under stricter downstream checks
    lam = _enforce_shape(grid, lam, y)
    return PiecewiseAffineConvex(grid, lam)


def _enforce_shape(grid, lam, y):
    """Exact convexity/monotonicity repair for sub-tolerance solver noise."""
    m = np.diff(lam) / np.diff(grid)
    m = _isotonic_increasing(m)
    m = np.maximum(m, 0.0)
    out = np.empty_like(lam)
    out[0] = lam[0]
    out[1:] = lam[0] + np.cumsum(m * np.diff(grid))
    out += max(0.0, float(np.max(y - out)))
    return out


def _isotonic_increasing(v):
    """Pool-adjacent-violators for a non-decreasing fit (unit weights on blocks)."""
    vals = []
    wts = []
    for x in v:
        vals.append(float(x)); wts.append(1.0)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            w = wts[-2] + wts[-1]
            m = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / w
            vals[-2:] = [m]; wts[-2:] = [w]
    out = np.empty(len(v))
    i = 0
    for val, w in zip(vals, wts):
        out[i:i + int(w)] = val
        i += int(w)
    return out


def sparsify(f, m):
    """Reduce f to at most m segments by greedy maximum-gap knot insertion.

    Starts from the end knots and repeatedly inserts the original knot where
    the current chord interpolation deviates most from f.  Chords of a convex
    function lie above it, so the result majorizes f, stays convex and
    monotone, and keeps at most m+1 knots.
    """
    if m < 2:
        raise ValueError("need at least 2 segments")
    n_seg = len(f.knots) - 1
    if m >= n_seg:
        return f
    keep = {0, n_seg}
    while len(keep) - 1 < m:
        idx = sorted(keep)
        approx = np.interp(f.knots, f.knots[idx], f.values[idx])
        gaps = approx - f.values
        gaps[idx] = -1.0
        j = int(np.argmax(gaps))
        if gaps[j] <= 1e-15:
            break
        keep.add(j)
    idx = sorted(keep)
    return PiecewiseAffineConvex(f.knots[idx], f.values[idx])


@dataclass
class AcquisitionTable:
    """Per-time-knot piecewise-affine acquisition costs for one item type."""

    item_type: int
    mechanism: Mechanism
    time_knots: np.ndarray
    tables: list = field(default_factory=list)

    def cap(self, k):
        """Largest representable rate at knot k."""
        return float(self.tables[k].knots[-1])

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "item_type": self.item_type,
            "mechanism": self.mechanism.value,
            "time_knots_hours": np.asarray(self.time_knots).tolist(),
            "tables": [t.to_dict() for t in self.tables],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
        return cls(item_type=int(d["item_type"]),
                   mechanism=Mechanism(d["mechanism"]),
                   time_knots=np.asarray(d["time_knots_hours"], float),
                   tables=[PiecewiseAffineConvex.from_dict(t) for t in d["tables"]])


def tabulate_acquisition(curve, mechanism, time_knots, item_type=0,
                         rate_points=256, segments=32):
    """Sample, convexify, and sparsify acquisition costs at each time knot.

    The rate grid spans [W(x_min, t), s̄(t)].  The majorant runs
    unconditionally — for second-price costs it is a no-op up to tolerance,
    for first-price costs it repairs any non-convexity — and the result is
    then thinned to the configured segment budget.  Each table's last knot is
    the attainable supremum, so rates past it are infeasible by construction.
    """
    time_knots = np.asarray(time_knots, dtype=float)
    tables = []
    for t in time_knots:
        lo = curve.min_rate(t)
        hi = curve.sup_rate(t)
        if not hi > lo:
            raise ValueError(f"degenerate rate range at t={t}: [{lo}, {hi}]")
        grid = np.linspace(lo, hi, rate_points)
        samples = curve.acquisition_profile(mechanism, t, grid)
        try:
            env = convex_majorant(grid, samples)
        except EnvelopeSolverError as exc:
            raise EnvelopeSolverError(
                f"acquisition envelope failed for type {item_type} at t={t}: {exc}",
                status=exc.status, context=(item_type, float(t))) from exc
        tables.append(sparsify(env, segments))
    return AcquisitionTable(item_type=item_type, mechanism=mechanism,
                            time_knots=time_knots, tables=tables)


def save_acquisition_tables(tables, path):
    payload = {"schema_version": SCHEMA_VERSION,
               "types": {str(t.item_type): t.to_dict() for t in tables}}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_acquisition_tables(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {payload.get('schema_version')!r}")
    return {int(k): AcquisitionTable.from_dict(v)
            for k, v in payload["types"].items()}
