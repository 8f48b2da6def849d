"""Numerical certification of the finite-set HJB system.

For each cell the quasi-variational inequality reads

    max{ L^{a_i,c_j} W_{i,j},  W_{i+1,j} - W_{i,j},  W_{i,j+1} - W_{i,j} } = 0,

with ``L^{a,c} W = 0.5 sigma^2 a^2 W'' + (mu a - b - c) W' - q W + c``.  All
derivatives come from the exponential pieces; finite differences only appear
in tests as an independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .thresholds import INF, ThresholdSolution

BRANCHES = ("L", "A", "C")


@dataclass(frozen=True)
class ResidualReport:
    grid_points: np.ndarray
    residuals: dict          # (i, j) -> array (len(xs), 3) with columns L, A, C
    skipped: dict            # (i, j) -> boolean mask of points too close to a kink
    max_violation: float
    active_branch: dict      # (i, j) -> int array, index into BRANCHES
    worst: tuple | None = None

    def hjb_max(self, cell) -> np.ndarray:
        return self.residuals[cell].max(axis=1)

    def rows(self):
        """``(x, i, j, branchA, branchC, branchL, max)`` rows for CSV export."""
        for (i, j), r in sorted(self.residuals.items()):
            skip = self.skipped[(i, j)]
            for k, x in enumerate(self.grid_points):
                if skip[k]:
                    continue
                yield (float(x), i, j, float(r[k, 1]), float(r[k, 2]), float(r[k, 0]), float(r[k].max()))


def operator_L(sol: ThresholdSolution, i: int, j: int, x) -> np.ndarray:
    """``L^{a_i,c_j}`` applied to ``W(., a_i, c_j)`` at points off the kinks."""
    p = sol.params
    a, c = sol.grid.retentions[i], sol.grid.dividends[j]
    w0 = sol.value(x, i, j, 0)
    w1 = sol.value(x, i, j, 1)
    w2 = sol.value(x, i, j, 2)
    return 0.5 * p.sigma**2 * a * a * w2 + (p.mu * a - p.b - c) * w1 - p.q * w0 + c


def chain_levels(sol: ThresholdSolution, i: int, j: int) -> list[float]:
    """Finite switching levels met along the delegation chain of ``(i, j)``."""
    out = []
    while True:
        t = sol.switch_level(i, j)
        if not math.isfinite(t):
            return out
        out.append(t)
        i, j = sol.target(i, j)


def all_levels(sol: ThresholdSolution) -> np.ndarray:
    m, n = sol.shape
    lv = {sol.switch_level(i, j) for i in range(m) for j in range(n)}
    return np.array(sorted(t for t in lv if math.isfinite(t) and t > 0))


def default_samples(sol: ThresholdSolution, n: int = 2000, x_hi: float | None = None) -> np.ndarray:
    """Half uniform, the rest geometrically clustered at 0 and around each threshold."""
    lv = all_levels(sol)
    if x_hi is None:
        x_hi = 1.25 * lv.max() if lv.size else sol.config.x_max
    n_uni = n // 2
    pts = [np.linspace(0.0, x_hi, n_uni)]
    n_rest = n - n_uni
    groups = 1 + lv.size
    per = max(n_rest // groups, 2)
    pts.append(np.geomspace(1e-6, max(x_hi, 1e-3) * 0.05, per))
    for t in lv:
        off = np.geomspace(1e-5, max(t, 1.0) * 0.05, per // 2)
        pts.append(t - off)
        pts.append(t + off)
    xs = np.concatenate(pts)
    xs = np.unique(xs[(xs >= 0) & (xs <= x_hi)])
    return xs


def hjb_residuals(sol: ThresholdSolution, xs, kink_gap: float = 1e-7) -> ResidualReport:
    xs = np.asarray(xs, dtype=float)
    m, n = sol.shape
    res, skipped, active = {}, {}, {}
    worst_val, worst = -INF, None
    for i in range(m):
        for j in range(n):
            levels = np.array(chain_levels(sol, i, j))
            near = np.zeros(xs.size, dtype=bool)
            for t in levels:
                near |= np.abs(xs - t) < kink_gap
            r = np.full((xs.size, 3), -INF)
            ok = ~near
            w = sol.value(xs[ok], i, j)
            r[ok, 0] = operator_L(sol, i, j, xs[ok])
            if i + 1 < m:
                r[ok, 1] = sol.value(xs[ok], i + 1, j) - w
            if j + 1 < n:
                r[ok, 2] = sol.value(xs[ok], i, j + 1) - w
            r[near] = np.nan
            res[(i, j)] = r
            skipped[(i, j)] = near
            mx = np.where(near, -INF, np.max(np.where(near[:, None], -INF, r), axis=1))
            act = np.where(near, -1, np.argmax(np.where(near[:, None], -INF, r), axis=1))
            active[(i, j)] = act
            if mx.size:
                k = int(np.argmax(mx))
                if mx[k] > worst_val:
                    worst_val, worst = float(mx[k]), (i, j, float(xs[k]), BRANCHES[act[k]])
    return ResidualReport(xs, res, skipped, worst_val, active, worst)


@dataclass(frozen=True)
class ScanResult:
    passed: bool
    max_positive: float
    max_active_gap: float
    tol_pos: float
    tol_active: float
    worst_positive: tuple | None
    worst_active: tuple | None
    report: ResidualReport = field(repr=False)


def viscosity_scan(sol: ThresholdSolution, xs=None, tol_pos: float | None = None,
                   tol_active: float | None = None) -> ScanResult:
    """Check ``max{...} <= tol_pos`` everywhere and ``>= -tol_active`` (complementarity)."""
    scale = sol.grid.c_max / sol.params.q
    tol_pos = 1e-6 * scale if tol_pos is None else tol_pos
    tol_active = 1e-6 * scale if tol_active is None else tol_active
    if xs is None:
        xs = default_samples(sol)
    rep = hjb_residuals(sol, xs)
    max_pos, max_gap = -INF, 0.0
    wpos = wgap = None
    for cell, r in rep.residuals.items():
        ok = ~rep.skipped[cell]
        mx = r[ok].max(axis=1)
        if not mx.size:
            continue
        x_ok = rep.grid_points[ok]
        k = int(np.argmax(mx))
        if mx[k] > max_pos:
            max_pos, wpos = float(mx[k]), (cell, float(x_ok[k]))
        k = int(np.argmin(mx))
        if -mx[k] > max_gap:
            max_gap, wgap = float(-mx[k]), (cell, float(x_ok[k]))
    passed = max_pos <= tol_pos and max_gap <= tol_active
    return ScanResult(passed, max_pos, max_gap, tol_pos, tol_active, wpos, wgap, rep)


@dataclass(frozen=True)
class PastingCheck:
    cell: tuple
    level: float
    kind: str
    left: float
    right: float
    raw_relative: float
    relative: float
    d2_jump: float
    fallback: bool


def smooth_pasting(sol: ThresholdSolution) -> list[PastingCheck]:
    """Derivative match at every positive finite threshold.

    ``raw_relative`` divides the slope gap by the larger one-sided slope;
    ``relative`` divides by the cell's slope at ``0+`` instead, so that
    thresholds placed by the zero-max fallback (where both slopes are already
    negligibly small) are judged on the cell's own slope scale.
    ``d2_jump`` is ``W''(t-) - W''(t+)``.
    """
    out = []
    m, n = sol.shape
    for i in range(m):
        for j in range(n):
            t = sol.switch_level(i, j)
            if not (math.isfinite(t) and t > 0):
                continue
            ti, tj = sol.target(i, j)
            left = float(sol.piece(i, j, t, 1))
            right = float(sol.value(t, ti, tj, 1))
            l2 = float(sol.piece(i, j, t, 2))
            r2 = float(sol.value(t, ti, tj, 2))
            gap = abs(left - right)
            raw = gap / max(abs(left), abs(right), np.finfo(float).tiny)
            scale = abs(float(sol.value(0.0, i, j, 1)))
            rel = gap / max(abs(left), abs(right), scale)
            kind = "E" if (ti, tj) == (i + 1, j + 1) else ("A" if ti == i + 1 else "C")
            fb = bool(sol.reports.get((i, j)) and sol.reports[(i, j)].fallback)
            out.append(PastingCheck((i, j), t, kind, left, right, raw, rel, l2 - r2, fb))
    return out


@dataclass(frozen=True)
class BoundaryReport:
    zero_ok: bool
    x_big: float
    tail_errors: dict
    tail_bound: float
    tail_ok: bool
    lipschitz: float
    slope0_max: float
    lipschitz_ok: bool

    @property
    def passed(self) -> bool:
        return self.zero_ok and self.tail_ok and self.lipschitz_ok


def boundary_checks(sol: ThresholdSolution, n_probe: int = 4000) -> BoundaryReport:
    """``W(0) = 0``, the ``c_n/q`` asymptote and an empirical Lipschitz bound."""
    p, g = sol.params, sol.grid
    m, n = sol.shape
    cq = g.c_max / p.q
    lv = all_levels(sol)
    x_big = 10.0 * ((lv.max() if lv.size else 0.0) + 1.0)
    t2 = sol.theta2[m - 1, n - 1]
    bound = cq * math.exp(t2 * x_big) + 1e-9
    zero_ok, tails = True, {}
    slope0 = 0.0
    lip = 0.0
    xs = np.linspace(0.0, 1.25 * (lv.max() if lv.size else 10.0 / abs(t2)) + 1.0, n_probe)
    for i in range(m):
        for j in range(n):
            zero_ok &= float(sol.value(0.0, i, j)) == 0.0
            tails[(i, j)] = abs(float(sol.value(x_big, i, j)) - cq)
            slope0 = max(slope0, float(sol.value(0.0, i, j, 1)))
            w = sol.value(xs, i, j)
            lip = max(lip, float(np.max(np.diff(w) / np.diff(xs))))
    tail_ok = all(v <= bound for v in tails.values())
    lip_ok = lip <= slope0 + 1e-6
    return BoundaryReport(bool(zero_ok), x_big, tails, bound, tail_ok, lip, slope0, lip_ok)
