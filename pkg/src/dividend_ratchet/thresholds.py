"""Optimal threshold strategies on a finite action grid.

Cells ``(i, j)`` index the pair ``(a_i, c_j)``.  Inside a cell the value is

    W(x) = (c_j/q)(1 - exp(theta2 x)) + k (exp(theta1 x) - exp(theta2 x)),   x < y ^ z,

and beyond the switching level the cell hands over to ``(i+1, j)``,
``(i, j+1)`` or ``(i+1, j+1)``.  The grid is swept backwards from the
terminal cell ``(m-1, n-1)``; each cell maximises the three G-ratios that
fix ``k`` and reads its thresholds off the case table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, ValidationError
from .model import ActionGrid, ModelParams, theta_roots

INF = math.inf
KINDS = ("A", "C", "E")
_STEP = {"A": (1, 0), "C": (0, 1), "E": (1, 1)}


class Priority(str, Enum):
    RETENTION_FIRST = "retention-first"
    DIVIDEND_FIRST = "dividend-first"


@dataclass(frozen=True)
class SolverConfig:
    """Search settings.  ``None`` fields are derived from the model in :func:`resolve_config`."""

    x_max: Optional[float] = None
    coarse_points: int = 8192
    refine_tol: float = 1e-10
    delta_tol: Optional[float] = None
    inf_threshold_M: Optional[float] = None
    priority: Priority = Priority.DIVIDEND_FIRST

    def __post_init__(self):
        object.__setattr__(self, "priority", Priority(self.priority))
        if self.x_max is not None and not self.x_max > 0:
            raise ValidationError("x_max must be positive")
        if int(self.coarse_points) != self.coarse_points or self.coarse_points < 64:
            raise ValidationError("coarse_points must be an integer >= 64")
        if not self.refine_tol > 0:
            raise ValidationError("refine_tol must be positive")
        if self.delta_tol is not None and not self.delta_tol > 0:
            raise ValidationError("delta_tol must be positive")
        if self.inf_threshold_M is not None:
            if self.x_max is not None and not self.inf_threshold_M > self.x_max:
                raise ValidationError("inf_threshold_M must exceed x_max")

    def to_dict(self) -> dict:
        return {
            "x_max": self.x_max,
            "coarse_points": self.coarse_points,
            "refine_tol": self.refine_tol,
            "delta_tol": self.delta_tol,
            "inf_threshold_M": self.inf_threshold_M,
            "priority": self.priority.value,
        }


def default_delta(p: ModelParams, grid: ActionGrid) -> float:
    return 1e-12 * grid.c_max / p.q


def default_x_max(p: ModelParams, grid: ActionGrid, delta: float) -> float:
    """Reserve level by which every singleton has decayed to well below ``delta``."""
    slow = min(abs(theta_roots(p, a, c).theta2) for a in grid.retentions for c in grid.dividends)
    return 1.5 * math.log(grid.c_max / (p.q * delta)) / slow


def resolve_config(p: ModelParams, grid: ActionGrid, cfg: SolverConfig) -> SolverConfig:
    delta = cfg.delta_tol if cfg.delta_tol is not None else default_delta(p, grid)
    x_max = cfg.x_max if cfg.x_max is not None else default_x_max(p, grid, delta)
    big = cfg.inf_threshold_M if cfg.inf_threshold_M is not None else 10.0 * x_max
    return SolverConfig(
        x_max=x_max,
        coarse_points=cfg.coarse_points,
        refine_tol=cfg.refine_tol,
        delta_tol=delta,
        inf_threshold_M=big,
        priority=cfg.priority,
    )


# ---------------------------------------------------------------------------
# piece arithmetic


def piece_value(cq: float, t1: float, t2: float, k: float, x, order: int = 0):
    """Derivative ``order`` (0, 1 or 2) of ``cq(1 - e^{t2 x}) + k(e^{t1 x} - e^{t2 x})``."""
    x = np.asarray(x, dtype=float)
    e2 = np.exp(t2 * x)
    if order == 0:
        out = -cq * np.expm1(t2 * x)
        if k != 0.0:
            out = out - k * np.exp(t1 * x) * np.expm1((t2 - t1) * x)
        return out
    if order == 1:
        out = -cq * t2 * e2
        if k != 0.0:
            out = out + k * (t1 * np.exp(t1 * x) - t2 * e2)
        return out
    if order == 2:
        out = -cq * t2 * t2 * e2
        if k != 0.0:
            out = out + k * (t1 * t1 * np.exp(t1 * x) - t2 * t2 * e2)
        return out
    raise ValueError("order must be 0, 1 or 2")


def g_ratio(cq: float, t1: float, t2: float, x, cont: Callable, cont_slope0: float):
    """``(W_next(x) - p(x)) / (e^{t1 x} - e^{t2 x})``, with its limit at ``x = 0``.

    ``cont`` evaluates the continuation value on arrays and ``cont_slope0`` is
    its right derivative at zero.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    zero = x == 0.0
    out[zero] = (cont_slope0 + cq * t2) / (t1 - t2)
    xs = x[~zero]
    if xs.size:
        num = cont(xs) - piece_value(cq, t1, t2, 0.0, xs)
        with np.errstate(over="ignore", under="ignore"):
            out[~zero] = num * np.exp(-t1 * xs) / -np.expm1(-(t1 - t2) * xs)
    return out


def maximize_scalar(f: Callable, x_max: float, coarse_points: int, refine_tol: float):
    """Global max of ``f`` on ``[0, x_max]`` and its smallest maximiser.

    ``f`` must accept arrays.  A uniform scan picks the leftmost point within
    ``refine_tol*(1+|best|)`` of the best value; golden-section search then
    polishes inside the neighbouring scan cells.  Endpoints of that bracket
    win ties, so a maximum sitting on a scan node (``x = 0`` in particular)
    is returned exactly.
    """
    xs = np.linspace(0.0, x_max, int(coarse_points))
    vals = np.asarray(f(xs), dtype=float)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    best = vals.max()
    if not np.isfinite(best):
        return -INF, 0.0
    k = int(np.argmax(vals >= best - refine_tol * (1.0 + abs(best))))
    lo = xs[max(k - 1, 0)]
    hi = xs[min(k + 1, xs.size - 1)]
    xr, fr = _golden(f, lo, hi, refine_tol * max(1.0, x_max))
    cand = [(vals[k], xs[k]), (fr, xr)]
    if k > 0:
        cand.append((vals[k - 1], xs[k - 1]))
    # highest value first, then smallest abscissa
    cand.sort(key=lambda t: (-t[0], t[1]))
    top = cand[0][0]
    tied = [x for v, x in cand if v >= top]
    return float(top), float(min(tied))


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden(f, lo, hi, tol):
    def fs(x):
        v = float(np.asarray(f(np.array([x])), dtype=float)[0])
        return v if math.isfinite(v) else -INF

    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fs(c), fs(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = fs(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = fs(d)
    return (c, fc) if fc >= fd else (d, fd)


def fallback_threshold(gap: Callable, delta: float, x_max: float, coarse_points: int,
                       max_doublings: int = 12) -> float:
    """Switching level when the best G-ratio is zero.

    ``gap(x) = p(x) - W_next(x)``.  If the continuation lies strictly above
    the cell's own payoff at every sampled ``x > 0`` the switch is immediate
    (return 0).  Otherwise return the level beyond which the gap stays below
    ``delta``; ``inf`` if it never does within the doubled search range.
    """
    hi = x_max
    for _ in range(max_doublings + 1):
        xs = np.linspace(0.0, hi, int(coarse_points))
        g = np.asarray(gap(xs), dtype=float)
        if np.all(g[1:] < 0):
            return 0.0
        below = g < delta
        if below[-1]:
            break
        hi *= 2.0
    else:
        return INF
    if below[1:].all():
        return 0.0
    last_bad = int(np.nonzero(~below)[-1][-1])
    a, b = xs[last_bad], xs[last_bad + 1]
    return float(brentq(lambda x: float(gap(np.array([x]))[0]) - delta, a, b, xtol=1e-12, rtol=1e-14))


# ---------------------------------------------------------------------------
# case table


def _eq(u: float, v: float) -> bool:
    if u == v:
        return True
    if not (math.isfinite(u) and math.isfinite(v)):
        return False
    return abs(u - v) <= 1e-9 * (1.0 + max(abs(u), abs(v)))


def _gt(u, v):
    return u > v and not _eq(u, v)


def _lt(u, v):
    return u < v and not _eq(u, v)


def _le(u, v):
    return u < v or _eq(u, v)


def select_case(maxA: float, maxC: float, maxE: float, gA: float, gC: float, gE: float,
                priority: Priority | str = Priority.DIVIDEND_FIRST):
    """Thresholds ``(y, z, case)`` from the three maxima and their g-points.

    Unavailable switches carry ``-inf`` maxima.
    """
    retention_first = Priority(priority) is Priority.RETENTION_FIRST
    if _gt(maxA, max(maxC, maxE)):
        return gA, INF, 1
    if _gt(maxC, max(maxA, maxE)):
        return INF, gC, 2
    if _gt(maxE, max(maxA, maxC)):
        return gE, gE, 3
    if _eq(maxA, maxC) and _gt(maxA, maxE):
        if retention_first:
            y = gA if _le(gA, gC) else INF
            z = gC if _lt(gC, gA) else INF
        else:
            y = gA if _lt(gA, gC) else INF
            z = gC if _le(gC, gA) else INF
        return y, z, 4
    if _eq(maxE, maxA) and _gt(maxE, maxC):
        if _le(gE, gA):
            return gE, gE, 5
        return gA, INF, 5
    if _eq(maxE, maxC) and _gt(maxE, maxA):
        if _le(gE, gC):
            return gE, gE, 6
        return INF, gC, 6
    # all three tie (also the landing spot for tolerance-intransitive triples)
    if _le(gE, min(gA, gC)):
        return gE, gE, 7
    a_first = _lt(gA, min(gE, gC))
    c_first = _lt(gC, min(gE, gA))
    a_c_tie = _eq(gA, gC) and _lt(gA, gE)
    if retention_first:
        y = gA if (a_first or a_c_tie) else INF
        z = gC if c_first else INF
    else:
        y = gA if a_first else INF
        z = gC if (c_first or a_c_tie) else INF
    return y, z, 7


# ---------------------------------------------------------------------------
# solution object


@dataclass(frozen=True)
class CellReport:
    """Per-cell diagnostics of the backward sweep."""

    maxima: dict
    g_points: dict
    case: int
    fallback: bool


@dataclass(frozen=True)
class ThresholdSolution:
    y_star: np.ndarray
    z_star: np.ndarray
    k_star: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    grid: ActionGrid
    params: ModelParams
    config: SolverConfig
    reports: dict = field(default_factory=dict, compare=False)

    @property
    def priority(self) -> Priority:
        return self.config.priority

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.m, self.grid.n

    def switch_level(self, i: int, j: int) -> float:
        return float(min(self.y_star[i, j], self.z_star[i, j]))

    def target(self, i: int, j: int) -> tuple[int, int] | None:
        """Cell reached at the switching level of ``(i, j)``; ``None`` if it never switches."""
        y, z = self.y_star[i, j], self.z_star[i, j]
        if y == INF and z == INF:
            return None
        if y < z:
            return i + 1, j
        if z < y:
            return i, j + 1
        return i + 1, j + 1

    def landing_cell(self, x: float, i: int, j: int) -> tuple[int, int]:
        """Cell whose own piece is in force at reserve ``x`` after immediate switches."""
        while x >= self.switch_level(i, j):
            i, j = self.target(i, j)
        return i, j

    def piece(self, i: int, j: int, x, order: int = 0):
        """Cell ``(i, j)``'s own exponential piece, ignoring its switching level."""
        cq = self.grid.dividends[j] / self.params.q
        return piece_value(cq, self.theta1[i, j], self.theta2[i, j], self.k_star[i, j], x, order)

    def _check(self, i, j):
        m, n = self.shape
        if not (0 <= i < m and 0 <= j < n):
            raise IndexError(f"cell ({i}, {j}) outside {m}x{n} grid")

    def value(self, x, i: int, j: int, order: int = 0):
        """``W`` (or its ``order``-th right derivative) at reserve ``x`` in cell ``(i, j)``."""
        self._check(i, j)
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0):
            raise DomainError("reserve must be nonnegative")
        flat = np.atleast_1d(xa).ravel()
        out = np.empty_like(flat)
        idx = np.arange(flat.size)
        while idx.size:
            t = self.switch_level(i, j)
            here = flat[idx] < t
            if here.any():
                out[idx[here]] = self.piece(i, j, flat[idx[here]], order)
            idx = idx[~here]
            if idx.size:
                i, j = self.target(i, j)
        out = out.reshape(np.shape(xa))
        return out[()] if out.ndim == 0 else out

    def grid_indices(self, a: float, c: float) -> tuple[int, int]:
        return self.grid.retention_index(a), self.grid.dividend_index(c)

    def exported_thresholds(self):
        """``(y, z)`` with ``+inf`` replaced by ``inf_threshold_M`` for step-function use."""
        big = self.config.inf_threshold_M
        return (np.where(np.isinf(self.y_star), big, self.y_star),
                np.where(np.isinf(self.z_star), big, self.z_star))


def eval_W(sol: ThresholdSolution, x, i: int, j: int):
    return sol.value(x, i, j)


def extended_value(sol: ThresholdSolution, x, a: float, c: float):
    """Value for an off-grid pair: retention snapped down, dividend snapped up."""
    i, j = sol.grid_indices(a, c)
    return sol.value(x, i, j)


# ---------------------------------------------------------------------------
# backward sweep


class _Partial:
    """Mutable view used while the sweep is still filling cells."""

    def __init__(self, p, grid, cfg, t1, t2):
        m, n = grid.m, grid.n
        self.y = np.full((m, n), INF)
        self.z = np.full((m, n), INF)
        self.k = np.zeros((m, n))
        self.sol = ThresholdSolution(self.y, self.z, self.k, t1, t2, grid, p, cfg)


def solve_backward(p: ModelParams, grid: ActionGrid, cfg: SolverConfig | None = None) -> ThresholdSolution:
    """Fill ``y*``, ``z*`` and ``k*`` for every cell by backward recursion."""
    cfg = resolve_config(p, grid, cfg or SolverConfig())
    m, n = grid.m, grid.n
    t1 = np.empty((m, n))
    t2 = np.empty((m, n))
    for i, a in enumerate(grid.retentions):
        for j, c in enumerate(grid.dividends):
            t1[i, j], t2[i, j] = theta_roots(p, a, c)
    work = _Partial(p, grid, cfg, t1, t2)
    sol = work.sol
    zero_tol = 64 * np.finfo(float).eps * grid.c_max / p.q
    reports = {}
    for i in range(m - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            if i == m - 1 and j == n - 1:
                continue
            cq = grid.dividends[j] / p.q
            a1, a2 = t1[i, j], t2[i, j]
            maxima, gpts = {}, {}
            for kind in KINDS:
                di, dj = _STEP[kind]
                ti, tj = i + di, j + dj
                if ti >= m or tj >= n:
                    maxima[kind], gpts[kind] = -INF, INF
                    continue
                cont = _bind(sol, ti, tj)
                slope0 = float(sol.value(0.0, ti, tj, order=1))
                f = lambda x, cont=cont, s=slope0: g_ratio(cq, a1, a2, x, cont, s)
                best, arg = _maximize_with_growth(f, cfg)
                if best <= zero_tol:
                    maxima[kind] = 0.0
                    gap = lambda x, cont=cont: piece_value(cq, a1, a2, 0.0, x) - cont(x)
                    gpts[kind] = fallback_threshold(gap, cfg.delta_tol, cfg.x_max, cfg.coarse_points)
                else:
                    maxima[kind], gpts[kind] = best, arg
            y, z, case = select_case(maxima["A"], maxima["C"], maxima["E"],
                                     gpts["A"], gpts["C"], gpts["E"], cfg.priority)
            top = max(maxima.values())
            work.y[i, j], work.z[i, j] = y, z
            work.k[i, j] = top if top > 0 else 0.0
            reports[(i, j)] = CellReport(maxima, gpts, case, top <= 0)
    for arr in (work.y, work.z, work.k, t1, t2):
        arr.setflags(write=False)
    return ThresholdSolution(work.y, work.z, work.k, t1, t2, grid, p, cfg, reports)


def solution_from_tables(p: ModelParams, grid: ActionGrid, cfg: SolverConfig, y, z, k) -> ThresholdSolution:
    """Rebuild a solution from stored ``y*``, ``z*``, ``k*`` tables (no per-cell reports)."""
    cfg = resolve_config(p, grid, cfg)
    shape = (grid.m, grid.n)
    arrs = [np.array(v, dtype=float).reshape(shape) for v in (y, z, k)]
    t1 = np.empty(shape)
    t2 = np.empty(shape)
    for i, a in enumerate(grid.retentions):
        for j, c in enumerate(grid.dividends):
            t1[i, j], t2[i, j] = theta_roots(p, a, c)
    for arr in arrs + [t1, t2]:
        arr.setflags(write=False)
    return ThresholdSolution(*arrs, t1, t2, grid, p, cfg)


def _bind(sol, i, j):
    return lambda x: sol.value(x, i, j)


def _maximize_with_growth(f, cfg: SolverConfig, max_doublings: int = 6):
    """Maximise on ``[0, x_max]``, widening the range while the peak hugs its right end."""
    hi = cfg.x_max
    for _ in range(max_doublings + 1):
        best, arg = maximize_scalar(f, hi, cfg.coarse_points, cfg.refine_tol)
        if best <= 0 or arg < hi * (1.0 - 2.0 / cfg.coarse_points):
            return best, arg
        hi *= 2.0
    return best, arg


def switch_chain(sol: ThresholdSolution, start: tuple[int, int] = (0, 0)):
    """Sequence of ``((a, c), level)`` visited from ``start`` as the reserve grows."""
    i, j = start
    chain = [((sol.grid.retentions[i], sol.grid.dividends[j]), None)]
    while True:
        nxt = sol.target(i, j)
        if nxt is None:
            return chain
        level = sol.switch_level(i, j)
        i, j = nxt
        chain.append(((sol.grid.retentions[i], sol.grid.dividends[j]), level))
