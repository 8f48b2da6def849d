"""Nested grid refinement on an interval box.

Level 0 is the corner grid ``{a_hi, a_lo} x {c_lo, c_hi}``; each further level
inserts midpoints in both coordinates, so every node survives to the next
level and the mesh halves.  Finite-grid values are lower bounds for the
closed-interval value and should increase with refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import IntervalBox
from .errors import ValidationError
from .hjb import viscosity_scan
from .model import ActionGrid, ModelParams
from .thresholds import SolverConfig, ThresholdSolution, extended_value, solve_backward


def dyadic_levels(box: IntervalBox, n_levels: int) -> list[ActionGrid]:
    if n_levels < 1:
        raise ValidationError("need at least one level")
    out = []
    for k in range(n_levels):
        pts = 2**k + 1
        out.append(ActionGrid(np.linspace(box.a_hi, box.a_lo, pts), np.linspace(box.c_lo, box.c_hi, pts)))
    return out


def _contains(fine, coarse) -> bool:
    return all(np.any(np.abs(np.asarray(fine) - v) <= 1e-12 * (1 + abs(v))) for v in coarse)


def check_nested(grids: list[ActionGrid]) -> None:
    """Raise unless every level's nodes reappear at the next level and the mesh shrinks."""
    for k in range(len(grids) - 1):
        g, h = grids[k], grids[k + 1]
        if not (_contains(h.retentions, g.retentions) and _contains(h.dividends, g.dividends)):
            raise ValidationError(f"level {k + 1} does not contain the nodes of level {k}")
        if not (_mesh(h.retentions) < _mesh(g.retentions) and _mesh(h.dividends) < _mesh(g.dividends)):
            raise ValidationError(f"mesh does not shrink from level {k} to {k + 1}")


def _mesh(v) -> float:
    v = np.asarray(v)
    return float(np.max(np.abs(np.diff(v)))) if v.size > 1 else np.inf


def default_probes(box: IntervalBox, x_hi: float = 50.0, n_x: int = 11, n_a: int = 5, n_c: int = 5):
    xs = np.linspace(0.0, x_hi, n_x)
    as_ = np.linspace(box.a_lo, box.a_hi, n_a)
    cs = np.linspace(box.c_lo, box.c_hi, n_c)
    return xs, as_, cs


@dataclass(frozen=True)
class RefinementPlan:
    box: IntervalBox
    levels: list
    xs: np.ndarray
    as_: np.ndarray
    cs: np.ndarray

    def __post_init__(self):
        check_nested(self.levels)
        for a in self.as_:
            if not self.box.a_lo - 1e-12 <= a <= self.box.a_hi + 1e-12:
                raise ValidationError(f"probe retention {a} outside the box")
        for c in self.cs:
            if not self.box.c_lo - 1e-12 <= c <= self.box.c_hi + 1e-12:
                raise ValidationError(f"probe dividend {c} outside the box")
        if np.any(np.asarray(self.xs) < 0):
            raise ValidationError("probe reserves must be nonnegative")

    @classmethod
    def dyadic(cls, box: IntervalBox, n_levels: int = 4, **probe_kw) -> "RefinementPlan":
        xs, as_, cs = default_probes(box, **probe_kw)
        return cls(box, dyadic_levels(box, n_levels), xs, as_, cs)

    @classmethod
    def custom(cls, box: IntervalBox, grids: list[tuple], **probe_kw) -> "RefinementPlan":
        xs, as_, cs = default_probes(box, **probe_kw)
        return cls(box, [ActionGrid(r, d) for r, d in grids], xs, as_, cs)

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "levels": [g.to_dict() for g in self.levels],
                "xs": list(map(float, self.xs)), "as": list(map(float, self.as_)),
                "cs": list(map(float, self.cs))}


@dataclass(frozen=True)
class RefinementResult:
    plan: RefinementPlan
    solutions: list = field(repr=False)
    tables: list                 # per level, array (n_x, n_a, n_c)
    sup_gaps: list               # between consecutive levels
    max_values: list
    worst_decrease: float        # max over probes of V_k - V_{k+1} (positive = violation)
    scans_passed: list

    @property
    def monotone(self) -> bool:
        return self.worst_decrease <= 1e-9

    @property
    def gaps_nonincreasing(self) -> bool:
        g = self.sup_gaps
        return all(g[k + 1] <= g[k] + 1e-9 for k in range(len(g) - 1))

    def rows(self):
        """``(level, m, n, sup_gap, max_value)``; the gap column is to the next level."""
        for k, sol in enumerate(self.solutions):
            gap = self.sup_gaps[k] if k < len(self.sup_gaps) else float("nan")
            yield (k, sol.grid.m, sol.grid.n, gap, self.max_values[k])


def level_table(sol: ThresholdSolution, xs, as_, cs) -> np.ndarray:
    out = np.empty((len(xs), len(as_), len(cs)))
    for ia, a in enumerate(as_):
        for ic, c in enumerate(cs):
            out[:, ia, ic] = extended_value(sol, np.asarray(xs, float), float(a), float(c))
    return out


def run_refinement(p: ModelParams, plan: RefinementPlan, cfg: SolverConfig | None = None,
                   scan: bool = True) -> RefinementResult:
    sols, tables, scans = [], [], []
    for g in plan.levels:
        sol = solve_backward(p, g, cfg)
        sols.append(sol)
        tables.append(level_table(sol, plan.xs, plan.as_, plan.cs))
        scans.append(bool(viscosity_scan(sol).passed) if scan else None)
    gaps = [float(np.max(np.abs(tables[k + 1] - tables[k]))) for k in range(len(tables) - 1)]
    dec = max((float(np.max(tables[k] - tables[k + 1])) for k in range(len(tables) - 1)), default=-np.inf)
    return RefinementResult(plan, sols, tables, gaps, [float(t.max()) for t in tables], dec, scans)


@dataclass(frozen=True)
class LipschitzReport:
    x: list
    a: list
    c_max_signed: list           # largest (most positive) difference quotient in c
    slope0: list
    stable: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lipschitz_probe(res: RefinementResult, rel: float = 0.05) -> LipschitzReport:
    """Largest difference quotients per level in x, a and c over the probe set."""
    if len(res.tables) < 2:
        raise ValidationError("need at least two solved levels")
    xs, as_, cs = (np.asarray(v, float) for v in (res.plan.xs, res.plan.as_, res.plan.cs))
    qx, qa, qc, s0 = [], [], [], []
    for sol, t in zip(res.solutions, res.tables):
        qx.append(float(np.max(np.abs(np.diff(t, axis=0)) / np.diff(xs)[:, None, None])))
        qa.append(float(np.max(np.abs(np.diff(t, axis=1)) / np.diff(as_)[None, :, None])) if as_.size > 1 else 0.0)
        qc.append(float(np.max(np.diff(t, axis=2) / np.diff(cs)[None, None, :])) if cs.size > 1 else 0.0)
        m, n = sol.shape
        s0.append(max(float(sol.value(0.0, i, j, 1)) for i in range(m) for j in range(n)))
    stable = all(qx[k + 1] <= qx[k] * (1 + rel) + 1e-12 and qa[k + 1] <= qa[k] * (1 + rel) + 1e-12
                 for k in range(len(qx) - 1))
    return LipschitzReport(qx, qa, qc, s0, stable)
