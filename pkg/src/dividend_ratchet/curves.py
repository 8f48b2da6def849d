"""Free-boundary curves for the closed-interval problem near the corner (a_lo, c_hi).

Actions range over ``[a_lo, a_hi] x [c_lo, c_hi]``.  In the no-change region
the value is

    H(x, a, c) = (c/q)(1 - e^{theta2 x}) + K(a, c)(e^{theta1 x} - e^{theta2 x}),

and the switching curves ``zeta_C`` (raise dividends) and ``zeta_A`` (cede
more) are characterised through four auxiliary b-functions, each of the form

    b(x) = [alpha3 (e^{theta2 x} - 1) + alpha1 x e^{theta2 x} + alpha2 x e^{theta1 x}]
           / (e^{theta1 x} - e^{theta2 x}).

Their x-derivatives are coded by hand on a cancellation-free basis; derivatives
in ``a`` or ``c`` of those are taken by complex-step differentiation, which is
exact to rounding because everything above is analytic in ``(a, c)``.
"""

from __future__ import annotations

import cmath
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, root

from .errors import (ConditionNotMetError, DomainError, NoValidXaError, ValidationError,
                     ValidityDomainExceeded)
from .model import ModelParams, _first_partials, _roots, theta_roots

B_NAMES = ("a0", "a1", "c0", "c1")
_CSTEP = 1e-30
_SERIES_CUTOFF = 1e-3
_NSERIES = 7


@dataclass(frozen=True)
class IntervalBox:
    a_lo: float
    a_hi: float
    c_lo: float
    c_hi: float

    def __post_init__(self):
        if not (0.0 <= self.a_lo < self.a_hi <= 1.0):
            raise ValidationError("need 0 <= a_lo < a_hi <= 1")
        if not (0.0 <= self.c_lo < self.c_hi):
            raise ValidationError("need 0 <= c_lo < c_hi")
        if self.a_lo == 0.0:
            raise ValidationError("a_lo = 0 leaves no diffusion at the corner")

    def to_dict(self) -> dict:
        return {"a_lo": self.a_lo, "a_hi": self.a_hi, "c_lo": self.c_lo, "c_hi": self.c_hi}


def corner_condition(p: ModelParams, box: IntervalBox) -> tuple[bool, float]:
    """Hypothesis ``c_hi > q sigma^2 a_lo^2 / (2 (mu a_lo - b))`` and its right-hand side."""
    drift = p.mu * box.a_lo - p.b
    if drift == 0:
        return False, math.inf
    bound = p.q * p.sigma**2 * box.a_lo**2 / (2.0 * drift)
    return box.c_hi > bound, bound


# ---------------------------------------------------------------------------
# b-functions


def _coeffs(p: ModelParams, a, c):
    t1, t2, D = _roots(p, a, c)
    d1a, d2a, d1c, d2c = _first_partials(p, a, c, t1, t2, D)
    cq = c / p.q
    zero = 0.0 * t1
    alpha1 = (cq * d2a, d2a, cq * d2c, d2c)
    alpha2 = (zero, -d1a, zero, -d1c)
    alpha3 = (zero, zero, zero + 1.0 / p.q, zero)
    return t1, t2, alpha1, alpha2, alpha3


def _basis(t1, t2, x, order):
    """``x e2/Den``, ``x e1/Den`` and ``(e2 - 1)/Den`` (or their x-derivatives)."""
    dl = t1 - t2
    u = np.exp(-dl * x)
    s = 1.0 / -np.expm1(-dl * x)
    e1m = np.exp(-t1 * x)
    us2 = u * s * s
    f3 = u * s
    f0 = e1m * s
    if order == 0:
        return x * f3, x * s, f3 - f0
    f3p = -dl * us2
    f0p = e1m * (-t1 * s - dl * us2)
    if order == 1:
        return f3 + x * f3p, s - dl * x * us2, f3p - f0p
    f3pp = dl * dl * us2 * (1.0 + 2.0 * u * s)
    f0pp = e1m * (t1 * t1 * s + 2.0 * t1 * dl * us2 + dl * dl * us2 * (1.0 + 2.0 * u * s))
    f2pp = -2.0 * dl * us2 + dl * dl * x * us2 * (1.0 + 2.0 * u * s)
    return 2.0 * f3p + x * f3pp, f2pp, f3pp - f0pp


def _series(t1, t2, a1, a2, a3, x, order):
    """Taylor expansion at 0 of ``N(x)/Den(x)``; used where the closed form cancels."""
    dl = t1 - t2
    n = _NSERIES
    num = []
    fact = 1.0
    for k in range(1, n + 1):
        fact_km1 = fact
        fact *= k
        num.append(a3 * t2**k / fact + a1 * t2 ** (k - 1) / fact_km1 + a2 * t1 ** (k - 1) / fact_km1)
    den = []
    fact = 1.0
    for k in range(0, n):
        fact *= k + 1
        den.append((t1 ** (k + 1) - t2 ** (k + 1)) / (fact * dl))
    qs = []
    for k in range(n):
        acc = num[k]
        for i in range(1, k + 1):
            acc = acc - den[i] * qs[k - i]
        qs.append(acc)
    out = 0.0 * x
    for k in range(order, n):
        coef = qs[k] / dl
        for r in range(order):
            coef = coef * (k - r)
        out = out + coef * x ** (k - order)
    return out


def _bvals(p: ModelParams, x, a, c, order: int = 0):
    """Array of shape ``(4,) + x.shape`` holding ``(b^a_0, b^a_1, b^c_0, b^c_1)`` or an x-derivative."""
    x = np.asarray(x, dtype=float)
    t1, t2, al1, al2, al3 = _coeffs(p, a, c)
    dl = np.real(t1 - t2)
    small = np.abs(dl * x) < _SERIES_CUTOFF
    out = []
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        F1, F2, F3 = _basis(t1, t2, np.where(small, 1.0, x), order)
        for k in range(4):
            v = al1[k] * F1 + al2[k] * F2 + al3[k] * F3
            if np.any(small):
                v = np.where(small, _series(t1, t2, al1[k], al2[k], al3[k], x, order), v)
            out.append(v)
    return np.stack(out)


def b_aux(p: ModelParams, x, a: float, c: float):
    """``(b^a_0, b^a_1, b^c_0, b^c_1)`` at ``x`` (the continuous extension at ``x = 0``)."""
    _check_x(x)
    return _bvals(p, x, a, c, 0)


def b_aux_dx(p: ModelParams, x, a: float, c: float):
    _check_x(x)
    return _bvals(p, x, a, c, 1)


def b_aux_dxx(p: ModelParams, x, a: float, c: float):
    _check_x(x)
    return _bvals(p, x, a, c, 2)


def b_aux_mixed(p: ModelParams, x, a: float, c: float, wrt: str, order: int = 1):
    """``d/d(wrt)`` of the ``order``-th x-derivative, by complex step."""
    _check_x(x)
    if wrt == "a":
        v = _bvals(p, x, complex(a, _CSTEP), c, order)
    elif wrt == "c":
        v = _bvals(p, x, a, complex(c, _CSTEP), order)
    else:
        raise ValueError("wrt must be 'a' or 'c'")
    return np.imag(v) / _CSTEP


def b_limits_at_zero(p: ModelParams, a: float, c: float):
    """Closed-form values at ``x = 0+`` of the four b-functions."""
    t1, t2 = theta_roots(p, a, c)
    t1, t2, D = _roots(p, a, c)
    d1a, d2a, d1c, d2c = _first_partials(p, a, c, t1, t2, D)
    dl = t1 - t2
    return np.array([
        (c / p.q) * d2a / dl,
        (d2a - d1a) / dl,
        (t2 / p.q + (c / p.q) * d2c) / dl,
        (d2c - d1c) / dl,
    ])


def _check_x(x):
    if np.any(np.asarray(x) < 0):
        raise DomainError("reserve must be nonnegative")


# ---------------------------------------------------------------------------
# boundary roots


def find_xc(p: ModelParams, box: IntervalBox, a: Optional[float] = None, c: Optional[float] = None,
            rtol: float = 1e-10) -> float:
    """Unique root of ``x -> d/dx b^c_0(x, a, c)``; defaults to the corner ``(a_lo, c_hi)``."""
    ok, bound = corner_condition(p, box)
    if not ok:
        raise ConditionNotMetError(
            f"c_hi={box.c_hi} does not exceed q sigma^2 a_lo^2 / (2(mu a_lo - b)) = {bound}"
        )
    a = box.a_lo if a is None else a
    c = box.c_hi if c is None else c

    def f(x):
        return float(_bvals(p, x, a, c, 1)[2])

    if not f(0.0) < 0:
        raise ConditionNotMetError(f"d/dx b^c_0 is not negative at 0 for (a, c) = ({a}, {c})")
    hi = 1.0
    while f(hi) <= 0:
        hi *= 2.0
        if hi > 1e6:
            raise ConditionNotMetError("d/dx b^c_0 never turns positive")
    lo = 0.0
    # walk the bracket in from below so the root returned is the first sign change
    xs = np.linspace(0.0, hi, 257)
    vals = _bvals(p, xs, a, c, 1)[2]
    k = int(np.argmax(vals > 0))
    lo, hi = xs[k - 1], xs[k]
    return float(brentq(f, lo, hi, xtol=1e-300, rtol=max(rtol, 4 * np.finfo(float).eps)))


def _xa_ratio(p, x, a, c):
    d = _bvals(p, x, a, c, 1)
    return np.abs(d[0] / d[1])


def find_xa(p: ModelParams, box: IntervalBox, eps_bc: float = 1e-100, c: Optional[float] = None,
            x0: float = 1.0, growth: float = 1.25, cap: float = 1e4) -> float:
    """Crossing of ``|b^a_0x / b^a_1x| = eps_bc`` located by a geometric scan, then pinned by brentq."""
    c = box.c_hi if c is None else c
    a = box.a_lo
    x = x0
    while x <= cap:
        r = float(_xa_ratio(p, x, a, c))
        if r < eps_bc:
            tail = _xa_ratio(p, x * growth ** np.arange(1, 9), a, c)
            if np.all(tail < eps_bc):
                if x == x0:
                    return x
                # pin the crossing inside the last scan cell so x_a varies smoothly in c
                f = lambda t: math.log(float(_xa_ratio(p, t, a, c))) - math.log(eps_bc)
                return float(brentq(f, x / growth, x, xtol=1e-12, rtol=1e-12))
        x *= growth
    raise NoValidXaError(f"ratio never fell below {eps_bc} before x = {cap}")


# ---------------------------------------------------------------------------
# B-functions and ODE right-hand sides


@dataclass(frozen=True)
class BTerms:
    """Everything the two ODEs need at one point ``(zeta, a, c)`` for one family (``'a'`` or ``'c'``)."""

    b0: float
    b1: float
    b0x: float
    b1x: float
    b0xx: float
    b1xx: float
    b0px: float
    b1px: float

    @property
    def core1(self) -> float:
        return (self.b1x * self.b0xx - self.b0x * self.b1xx) / self.b1x**2

    @property
    def mixed(self) -> float:
        return (self.b1x * self.b0px - self.b0x * self.b1px) / self.b1x**2

    @property
    def k_implicit(self) -> float:
        return -self.b0x / self.b1x


def _scalar_all(p: ModelParams, x: float, a, c):
    """Orders 0, 1, 2 of all four b-functions at one point, without numpy overhead.

    Accepts complex ``a`` or ``c`` (complex step); falls back to the series
    branch of :func:`_bvals` near ``x = 0``.
    """
    cplx = isinstance(a, complex) or isinstance(c, complex)
    m = cmath if cplx else math
    s2 = p.sigma**2 * a * a
    B = p.b + c - p.mu * a
    D = m.sqrt(B * B + 2.0 * p.q * s2)
    if B.real >= 0:
        t1, t2 = (B + D) / s2, -2.0 * p.q / (B + D)
    else:
        t1, t2 = 2.0 * p.q / (D - B), (B - D) / s2
    dl = t1 - t2
    if abs((dl * x).real) < _SERIES_CUTOFF:
        return tuple(tuple(complex(v) if cplx else float(v) for v in _bvals(p, x, a, c, k)) for k in range(3))
    sg = p.sigma**2
    d1c, d2c = t1 / D, -t2 / D
    d1a = -(sg * a * t1 * t1 + p.mu * t1) / D
    d2a = (sg * a * t2 * t2 + p.mu * t2) / D
    cq = c / p.q
    u = m.exp(-dl * x)
    sv = 1.0 / -(m.exp(-dl * x) - 1.0) if cplx else 1.0 / -math.expm1(-dl * x)
    e1m = m.exp(-t1 * x)
    us2 = u * sv * sv
    f3 = u * sv
    f0 = e1m * sv
    f3p = -dl * us2
    f0p = e1m * (-t1 * sv - dl * us2)
    w = 1.0 + 2.0 * u * sv
    f3pp = dl * dl * us2 * w
    f0pp = e1m * (t1 * t1 * sv + 2.0 * t1 * dl * us2 + dl * dl * us2 * w)
    F = ((x * f3, x * sv, f3 - f0),
         (f3 + x * f3p, sv - dl * x * us2, f3p - f0p),
         (2.0 * f3p + x * f3pp, -2.0 * dl * us2 + dl * dl * x * us2 * w, f3pp - f0pp))
    al = ((cq * d2a, 0.0, 0.0), (d2a, -d1a, 0.0), (cq * d2c, 0.0, 1.0 / p.q), (d2c, -d1c, 0.0))
    return tuple(tuple(c1 * F1 + c2 * F2 + c3 * F3 for (c1, c2, c3) in al) for (F1, F2, F3) in F)


def b_terms(p: ModelParams, family: str, x: float, a: float, c: float) -> BTerms:
    i0, i1 = (0, 1) if family == "a" else (2, 3)
    x = float(x)
    v0, v1, v2 = _scalar_all(p, x, float(a), float(c))
    if family == "a":
        mx = _scalar_all(p, x, complex(a, _CSTEP), float(c))[1]
    else:
        mx = _scalar_all(p, x, float(a), complex(c, _CSTEP))[1]
    return BTerms(v0[i0], v0[i1], v1[i0], v1[i1], v2[i0], v2[i1],
                  mx[i0].imag / _CSTEP, mx[i1].imag / _CSTEP)


def big_B(p: ModelParams, which: str, x: float, a: float, c: float, weight: float = 0.0,
          dzeta_integral: float = 0.0) -> float:
    """One of ``B^c_0, B^c_1, B^a_0, B^a_1``.

    ``weight`` is ``M(a) exp(int b^c_1)`` (resp. ``N(c) exp(int b^a_1)``) and
    ``dzeta_integral`` the derivative of that integral under a uniform shift
    of the curve.  With ``weight = 0`` the formulas reduce to their b-only parts.
    """
    family, kind = which[0], which[1]
    if family not in "ac" or kind not in "01":
        raise ValueError("which must be one of c0, c1, a0, a1")
    t = b_terms(p, family, x, a, c)
    if kind == "1":
        return t.core1 - weight * dzeta_integral
    return t.b0 + t.b1 * (t.k_implicit + weight) + t.mixed - weight * t.b1


class _SignFlip(Exception):
    pass


def _ray_rhs(p, family, fixed, weight_fn, sign0):
    """RHS in the ray parameter for state ``(zeta, I, J)``.

    c-rays run backwards from ``c_hi`` (parameter ``s = c_hi - c``); a-rays run
    forwards from ``a_lo`` (parameter ``s = a - a_lo``).  ``I`` accumulates
    ``int b_1`` and ``J`` accumulates ``int d/dx b_1`` along the ray.
    """

    def rhs(var, y):
        zeta, I, J = y
        if not (np.isfinite(zeta) and zeta > 0):
            raise _SignFlip(var)
        if family == "c":
            a, c = fixed, var
        else:
            a, c = var, fixed
        t = b_terms(p, family, zeta, a, c)
        w, dz = weight_fn(I, J)
        B1 = t.core1 - w * dz
        if B1 == 0 or (sign0 != 0 and np.sign(B1) != sign0):
            raise _SignFlip(var)
        B0 = t.b0 + t.b1 * (t.k_implicit + w) + t.mixed - w * t.b1
        dz_dvar = -B0 / B1
        if family == "c":
            # d/ds = -d/dc
            return np.array([-dz_dvar, t.b1, t.b1x])
        return np.array([dz_dvar, t.b1, t.b1x])

    return rhs


def _rk4(rhs, var_of_s, y0, s_nodes, n_sub):
    ys = [np.array(y0, dtype=float)]
    fine_s = [s_nodes[0]]
    fine_y = [ys[0]]
    y = ys[0]
    for k in range(len(s_nodes) - 1):
        h = (s_nodes[k + 1] - s_nodes[k]) / n_sub
        s = s_nodes[k]
        for _ in range(n_sub):
            try:
                k1 = rhs(var_of_s(s), y)
                k2 = rhs(var_of_s(s + h / 2), y + h / 2 * k1)
                k3 = rhs(var_of_s(s + h / 2), y + h / 2 * k2)
                k4 = rhs(var_of_s(s + h), y + h * k3)
            except _SignFlip as exc:
                raise _SignFlip(exc.args[0], np.array(ys)) from None
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            s = s + h
            fine_s.append(s)
            fine_y.append(y)
        ys.append(y)
    return np.array(ys), np.array(fine_s), np.array(fine_y)


@dataclass(frozen=True)
class Ray:
    """One integrated ray: tabulated ``zeta`` plus the fine RK4 trajectory."""

    family: str
    fixed: float
    nodes: np.ndarray          # a or c values at tabulation nodes
    zeta: np.ndarray
    fine_var: np.ndarray
    fine_zeta: np.ndarray
    fine_I: np.ndarray
    fine_J: np.ndarray
    n_sub: int
    refinement_change: float
    weight_const: float
    I_total: float = 0.0
    J_total: float = 0.0
    k_start: float = 0.0


def _integrate_ray(p, family, fixed, zeta0, nodes, weight_const, tol, max_sub, I_total=0.0,
                   J_total=0.0):
    """RK4 with step halving until successive tabulations agree to ``tol`` (relative)."""
    nodes = np.asarray(nodes, dtype=float)
    start = nodes[0]
    if family == "c":
        s_nodes = start - nodes      # nodes run downwards from c_hi
        var_of_s = lambda s: start - s

        def weight_fn(I, J):
            if weight_const == 0.0:
                return 0.0, 0.0
            return weight_const * math.exp(I_total - I), J_total - J
    else:
        s_nodes = nodes - start
        var_of_s = lambda s: start + s

        def weight_fn(I, J):
            if weight_const == 0.0:
                return 0.0, 0.0
            return weight_const * math.exp(I), J

    t0 = b_terms(p, family, zeta0, *((fixed, start) if family == "c" else (start, fixed)))
    w0, dz0 = weight_fn(0.0, 0.0)
    sign0 = np.sign(t0.core1 - w0 * dz0)
    rhs = _ray_rhs(p, family, fixed, weight_fn, sign0)
    n_sub = 4
    prev = None
    change = math.inf
    while True:
        try:
            ys, fs, fy = _rk4(rhs, var_of_s, [zeta0, 0.0, 0.0], s_nodes, n_sub)
        except _SignFlip as exc:
            if n_sub < max_sub:
                # an RK4 stage may overshoot on a coarse step; only a persistent flip counts
                n_sub *= 2
                prev = None
                continue
            done = exc.args[1] if len(exc.args) > 1 else np.empty((0, 3))
            raise ValidityDomainExceeded(
                f"curve left its validity domain (B_1 sign change or zeta <= 0) near "
                f"{family}={exc.args[0]:.6g} on the ray with fixed {'a' if family == 'c' else 'c'}={fixed}",
                partial={"boundary": float(exc.args[0]), "family": family, "fixed": fixed,
                         "nodes": nodes[: len(done)].tolist(), "zeta": done[:, 0].tolist()},
            ) from None
        if not np.all(np.isfinite(ys)):
            raise ValidityDomainExceeded(f"ray at {fixed} blew up", partial=None)
        if prev is not None:
            change = float(np.max(np.abs(ys[:, 0] - prev[:, 0]) / np.maximum(np.abs(ys[:, 0]), 1e-300)))
            if change < tol:
                break
        if n_sub >= max_sub:
            break
        prev = ys
        n_sub *= 2
    return Ray(family, float(fixed), nodes, ys[:, 0], np.array([var_of_s(s) for s in fs]),
               fy[:, 0], fy[:, 1], fy[:, 2], n_sub, change, weight_const, I_total, J_total)


def _solve_c_ray(p, a, nodes_desc, m_a, tol, max_sub, picard_tol=1e-12):
    zeta0 = find_xc_at(p, a, nodes_desc[0])
    if m_a == 0.0:
        return _integrate_ray(p, "c", a, zeta0, nodes_desc, 0.0, tol, max_sub)
    base = _integrate_ray(p, "c", a, zeta0, nodes_desc, 0.0, tol, max_sub)
    # the weight couples to totals over the whole ray, so solve for them as a fixed point
    def gap(v):
        ray = _integrate_ray(p, "c", a, zeta0, nodes_desc, m_a, tol, max_sub, v[0], v[1])
        return [ray.fine_I[-1] - v[0], ray.fine_J[-1] - v[1]]

    sol = root(gap, [base.fine_I[-1], base.fine_J[-1]], method="hybr", tol=picard_tol)
    if not sol.success or max(abs(g) for g in gap(sol.x)) > 1e-9 * (1 + max(abs(sol.x))):
        raise ValidityDomainExceeded(f"no self-consistent curve for the supplied M at a={a}")
    return _integrate_ray(p, "c", a, zeta0, nodes_desc, m_a, tol, max_sub, *sol.x)


def find_xc_at(p: ModelParams, a: float, c: float) -> float:
    """Root of ``d/dx b^c_0(., a, c)`` for a general ``(a, c)``."""
    box = IntervalBox(a, min(1.0, a + 1e-9) if a < 1.0 else 1.0, 0.0, c) if a < 1.0 else None
    if box is None:
        box = IntervalBox(a - 1e-9, a, 0.0, c)
        return find_xc(p, box, a=a, c=c)
    return find_xc(p, box)


def _k_along_c_ray(ray: Ray, p: ModelParams):
    """``K(c) = -e^{-I(c)} int_c^{c_hi} e^{I(t)} b0(t) dt + M E(c)`` on the fine grid (Simpson)."""
    a = ray.fixed
    cs, zs, Ib = ray.fine_var, ray.fine_zeta, ray.fine_I
    b0 = np.array([_bvals(p, z, a, c, 0)[2] for z, c in zip(zs, cs)])
    # cs decreases, s = c_hi - c increases; Ib(s) = int_c^{c_hi} b1
    s = cs[0] - cs
    integral = cumulative_simpson(np.exp(Ib) * b0, x=s, initial=0.0)
    K = -np.exp(-Ib) * integral
    if ray.weight_const:
        K = K + ray.weight_const * np.exp(ray.I_total - Ib)
    return K


def _k_along_a_ray(ray: Ray, p: ModelParams):
    """``K(a) = int_{a_lo}^a e^{I(a) - I(t)} b0(t) dt + N E(a)`` on the fine grid (Simpson)."""
    c = ray.fixed
    as_, zs, Ia = ray.fine_var, ray.fine_zeta, ray.fine_I
    b0 = np.array([_bvals(p, z, a, c, 0)[0] for z, a in zip(zs, as_)])
    integral = cumulative_simpson(np.exp(-Ia) * b0, x=as_, initial=0.0)
    # k_start is the implicit K at x_a: the anchor value up to the eps_bc tolerance.
    # Starting there matters because this linear ODE amplifies any offset by e^{int b1}.
    return np.exp(Ia) * (integral + ray.weight_const + ray.k_start)


def _tabulate_fine(ray: Ray, values: np.ndarray) -> np.ndarray:
    step = ray.n_sub
    return values[::step]


# ---------------------------------------------------------------------------
# tabulation


@dataclass(frozen=True)
class CurveConfig:
    n_a: int = 9
    n_c: int = 9
    eps_bc: float = 1e-100
    ode_tol: float = 1e-8
    max_sub: int = 1024
    grow_start: float = 1.0 / 32.0
    shrink: float = 0.9
    M_of_a: Optional[Callable[[float], float]] = None
    N_of_c: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.n_a < 2 or self.n_c < 2:
            raise ValidationError("need at least two nodes per direction")
        if not 0 < self.eps_bc < 1:
            raise ValidationError("eps_bc must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"n_a": self.n_a, "n_c": self.n_c, "eps_bc": self.eps_bc, "ode_tol": self.ode_tol,
                "max_sub": self.max_sub, "grow_start": self.grow_start, "shrink": self.shrink,
                "M_of_a": "custom" if self.M_of_a else "zero",
                "N_of_c": "custom" if self.N_of_c else "zero"}


@dataclass(frozen=True)
class CurveSolution:
    params: ModelParams
    box: IntervalBox
    eps_box: IntervalBox
    a_nodes: np.ndarray
    c_nodes: np.ndarray             # increasing
    zeta_A: np.ndarray              # shape (n_a, n_c)
    zeta_C: np.ndarray
    K: np.ndarray
    K_C: np.ndarray
    K_A: np.ndarray
    M_of_a: np.ndarray
    N_of_c: np.ndarray
    x_c: float
    x_a: float
    regime: np.ndarray              # 'A', 'C' or '=' per node
    c_rays: tuple = field(repr=False, default=())
    a_rays: tuple = field(repr=False, default=())
    aborted: Optional[str] = None

    def __post_init__(self):
        # dense splines along each integrated ray, used whenever a query sits on a ray
        n_c = len(self.c_nodes)
        ray_sp = {"C": {}, "A": {}}
        for i, ray in enumerate(self.c_rays):
            stop = (n_c - 1) * ray.n_sub + 1
            v = ray.fine_var[:stop][::-1]
            ray_sp["C"][i] = (CubicSpline(v, ray.fine_zeta[:stop][::-1]),
                              CubicSpline(v, _k_along_c_ray(ray, self.params)[:stop][::-1]))
        for j, ray in enumerate(self.a_rays):
            ray_sp["A"][j] = (CubicSpline(ray.fine_var, ray.fine_zeta),
                              CubicSpline(ray.fine_var, _k_along_a_ray(ray, self.params)))
        object.__setattr__(self, "_ray_sp", ray_sp)

    def _node(self, nodes, v):
        k = np.flatnonzero(np.abs(nodes - v) <= 1e-14)
        return int(k[0]) if k.size else None

    def _across(self, family: str, which: int, a, c, log: bool = False) -> np.ndarray:
        """Evaluate every ray of ``family`` along its own direction, then interpolate across rays."""
        if family == "C":
            along, across, nodes = c, a, self.a_nodes
            rays = [self._ray_sp["C"][i][which] for i in range(len(nodes))]
        else:
            along, across, nodes = a, c, self.c_nodes
            rays = [self._ray_sp["A"][j][which] for j in range(len(nodes))]
        vals = np.array([r(along) for r in rays])
        if log and np.all(vals > 0):
            return np.exp(CubicSpline(nodes, np.log(vals), axis=0)(across))
        return CubicSpline(nodes, vals, axis=0)(across)

    def zeta_line(self, kind: str, a, c) -> np.ndarray:
        """``zeta`` along a line where one of ``a``, ``c`` is a scalar and the other may be an array."""
        if kind == "C":
            i = self._node(self.a_nodes, a) if np.ndim(a) == 0 else None
            if i is not None:
                return np.asarray(self._ray_sp["C"][i][0](c), dtype=float)
            return np.asarray(self._across("C", 0, a, c), dtype=float)
        j = self._node(self.c_nodes, c) if np.ndim(c) == 0 else None
        if j is not None:
            return np.asarray(self._ray_sp["A"][j][0](a), dtype=float)
        return np.asarray(self._across("A", 0, a, c), dtype=float)

    def K_at(self, family: str, a: float, c: float) -> float:
        if family == "C":
            i = self._node(self.a_nodes, a)
            if i is not None:
                return float(self._ray_sp["C"][i][1](c))
        else:
            j = self._node(self.c_nodes, c)
            if j is not None:
                return float(self._ray_sp["A"][j][1](a))
        return float(self._across(family, 1, a, c, log=True))

    def inside(self, a: float, c: float, slack: float = 1e-12) -> bool:
        e = self.eps_box
        return (e.a_lo - slack <= a <= e.a_hi + slack) and (e.c_lo - slack <= c <= e.c_hi + slack)

    def _need(self, a, c):
        if not self.inside(a, c):
            raise DomainError(f"(a, c) = ({a}, {c}) outside the validity box {self.eps_box}")

    def zeta(self, kind: str, a: float, c: float) -> float:
        self._need(a, c)
        return float(np.reshape(self.zeta_line(kind, a, c), -1)[0])

    def rows(self):
        """``(a, c, zeta_A, zeta_C, K, regime)`` per node."""
        for i, a in enumerate(self.a_nodes):
            for j, c in enumerate(self.c_nodes):
                yield (float(a), float(c), float(self.zeta_A[i, j]), float(self.zeta_C[i, j]),
                       float(self.K[i, j]), str(self.regime[i, j]))


def integrate_zeta_C(p: ModelParams, box: IntervalBox, cfg: CurveConfig | None = None,
                     a: Optional[float] = None, c_nodes=None) -> Ray:
    """``zeta_C(a, .)`` from ``c_hi`` downwards; ``c_nodes`` must start at ``c_hi`` and decrease."""
    cfg = cfg or CurveConfig()
    a = box.a_lo if a is None else a
    if c_nodes is None:
        c_nodes = np.linspace(box.c_hi, box.c_lo, cfg.n_c)
    ok, bound = corner_condition(p, box)
    if not ok:
        raise ConditionNotMetError(f"corner hypothesis fails: c_hi <= {bound}")
    m_a = _weight(cfg.M_of_a, a, box.a_lo, "M")
    return _solve_c_ray(p, a, np.asarray(c_nodes, float), m_a, cfg.ode_tol, cfg.max_sub)


def integrate_zeta_A(p: ModelParams, box: IntervalBox, cfg: CurveConfig | None = None,
                     c: Optional[float] = None, a_nodes=None) -> Ray:
    """``zeta_A(., c)`` from ``a_lo`` upwards, started at the scan point ``x_a(c)``."""
    cfg = cfg or CurveConfig()
    c = box.c_hi if c is None else c
    if a_nodes is None:
        a_nodes = np.linspace(box.a_lo, box.a_hi, cfg.n_a)
    n_c = _weight(cfg.N_of_c, c, box.c_hi, "N")
    x_a = find_xa(p, box, cfg.eps_bc, c=c)
    ray = _integrate_ray(p, "a", c, x_a, np.asarray(a_nodes, float), n_c, cfg.ode_tol, cfg.max_sub)
    k0 = b_terms(p, "a", x_a, box.a_lo, c).k_implicit
    return dataclasses.replace(ray, k_start=k0)


def _weight(fn, at, anchor, name):
    if fn is None:
        return 0.0
    if abs(fn(anchor)) > 1e-14:
        raise ValidationError(f"{name} must vanish at its anchor, got {fn(anchor)}")
    return float(fn(at))


def _build(p, box, cfg, e1, e2):
    a_nodes = np.linspace(box.a_lo, box.a_lo + e1, cfg.n_a)
    c_desc = np.linspace(box.c_hi, box.c_hi - e2, cfg.n_c)
    sub = IntervalBox(box.a_lo, box.a_lo + e1, box.c_hi - e2, box.c_hi)
    c_rays = []
    for a in a_nodes:
        if cfg.M_of_a is not None and box.c_hi - e2 > box.c_lo:
            # the M-weight integrates from c_lo, so the ray must reach it
            nodes = np.concatenate([c_desc, np.linspace(box.c_hi - e2, box.c_lo, 3)[1:]])
        else:
            nodes = c_desc
        c_rays.append(integrate_zeta_C(p, box, cfg, a=a, c_nodes=nodes))
    a_rays = [integrate_zeta_A(p, box, cfg, c=c, a_nodes=a_nodes) for c in c_desc[::-1]]
    return sub, a_nodes, c_rays, a_rays


def solve_curves(p: ModelParams, box: IntervalBox, cfg: CurveConfig | None = None) -> CurveSolution:
    """Grow an epsilon-box from the corner until a ray leaves its validity domain, then tabulate."""
    cfg = cfg or CurveConfig()
    ok, bound = corner_condition(p, box)
    if not ok:
        raise ConditionNotMetError(
            f"c_hi={box.c_hi} does not exceed q sigma^2 a_lo^2 / (2(mu a_lo - b)) = {bound}"
        )
    wa, wc = box.a_hi - box.a_lo, box.c_hi - box.c_lo
    coarse = CurveConfig(n_a=3, n_c=3, eps_bc=cfg.eps_bc, ode_tol=1e-6, max_sub=64,
                         M_of_a=cfg.M_of_a, N_of_c=cfg.N_of_c)
    f1 = f2 = cfg.grow_start
    last_good, reason = None, None
    grow_a = grow_c = True
    try:
        _build(p, box, coarse, f1 * wa, f2 * wc)
        last_good = (f1, f2)
    except (ValidityDomainExceeded, ConditionNotMetError, NoValidXaError) as exc:
        raise ValidityDomainExceeded(f"no valid box even at the starting size: {exc}") from exc
    while grow_a or grow_c:
        for axis in ("a", "c"):
            if (axis == "a" and not grow_a) or (axis == "c" and not grow_c):
                continue
            t1 = min(1.0, f1 * 2) if axis == "a" else f1
            t2 = min(1.0, f2 * 2) if axis == "c" else f2
            try:
                _build(p, box, coarse, t1 * wa, t2 * wc)
                f1, f2 = t1, t2
                last_good = (f1, f2)
                if axis == "a" and f1 >= 1.0:
                    grow_a = False
                if axis == "c" and f2 >= 1.0:
                    grow_c = False
            except (ValidityDomainExceeded, ConditionNotMetError, NoValidXaError) as exc:
                reason = str(exc)
                if axis == "a":
                    grow_a = False
                else:
                    grow_c = False
    f1, f2 = last_good
    if reason is not None:
        f1, f2 = f1 * cfg.shrink, f2 * cfg.shrink
    return tabulate_curves(p, box, cfg, f1 * wa, f2 * wc, aborted=reason)


def tabulate_curves(p: ModelParams, box: IntervalBox, cfg: CurveConfig, e1: float, e2: float,
                    aborted: Optional[str] = None) -> CurveSolution:
    sub, a_nodes, c_rays, a_rays = _build(p, box, cfg, e1, e2)
    n_a, n_c = cfg.n_a, cfg.n_c
    c_nodes = np.linspace(box.c_hi - e2, box.c_hi, n_c)
    zC = np.empty((n_a, n_c))
    zA = np.empty((n_a, n_c))
    KC = np.empty((n_a, n_c))
    KA = np.empty((n_a, n_c))
    for i, ray in enumerate(c_rays):
        zC[i] = ray.zeta[:n_c][::-1]
        kf = _k_along_c_ray(ray, p)
        KC[i] = _tabulate_fine(ray, kf)[:n_c][::-1]
    for j, ray in enumerate(a_rays):
        zA[:, j] = ray.zeta
        kf = _k_along_a_ray(ray, p)
        KA[:, j] = _tabulate_fine(ray, kf)
    regime = np.where(np.isclose(zA, zC, rtol=1e-9, atol=0), "=", np.where(zC < zA, "C", "A"))
    K = np.where(regime == "A", KA, KC)
    M = np.array([0.0 if cfg.M_of_a is None else cfg.M_of_a(a) for a in a_nodes])
    N = np.array([0.0 if cfg.N_of_c is None else cfg.N_of_c(c) for c in c_nodes])
    return CurveSolution(
        params=p, box=box, eps_box=sub, a_nodes=a_nodes, c_nodes=c_nodes,
        zeta_A=zA, zeta_C=zC, K=K, K_C=KC, K_A=KA, M_of_a=M, N_of_c=N,
        x_c=float(c_rays[0].zeta[0]), x_a=float(a_rays[-1].zeta[0]), regime=regime,
        c_rays=tuple(c_rays), a_rays=tuple(a_rays), aborted=aborted,
    )


# ---------------------------------------------------------------------------
# value function on the box


def K_along_curve(curve: CurveSolution, a: float, c: float) -> float:
    curve._need(a, c)
    i = np.flatnonzero(np.isclose(curve.a_nodes, a, rtol=0, atol=1e-14))
    j = np.flatnonzero(np.isclose(curve.c_nodes, c, rtol=0, atol=1e-14))
    if i.size and j.size:
        # exact node value: H multiplies K by e^{theta1 x}, so spline rounding would be amplified
        return float(curve.K[i[0], j[0]])
    binding = "C" if curve.zeta("C", a, c) <= curve.zeta("A", a, c) else "A"
    return curve.K_at(binding, a, c)


def H_value(p: ModelParams, K: float, x, a: float, c: float, order: int = 0):
    t1, t2 = theta_roots(p, a, c)
    x = np.asarray(x, dtype=float)
    cq = c / p.q
    e1, e2 = np.exp(t1 * x), np.exp(t2 * x)
    if order == 0:
        return -cq * np.expm1(t2 * x) + K * e2 * np.expm1((t1 - t2) * x)
    if order == 1:
        return -cq * t2 * e2 + K * (t1 * e1 - t2 * e2)
    return -cq * t2 * t2 * e2 + K * (t1 * t1 * e1 - t2 * t2 * e2)


def _c_map(curve, x, a, c):
    """Largest ``h`` in ``[c, c_hi]`` with ``zeta_C(a, d) <= x`` on ``[c, h)``."""
    top = curve.eps_box.c_hi
    ds = np.linspace(c, top, 401)
    z = curve.zeta_line("C", a, ds)
    above = np.nonzero(z > x)[0]
    above = above[above > 0]
    if not above.size:
        return top
    k = int(above[0])
    f = lambda d: float(curve.zeta_line("C", a, d)) - x
    return float(brentq(f, ds[k - 1], ds[k], xtol=1e-14))


def _a_map(curve, x, a, c):
    """Smallest ``h`` in ``[a_lo, a]`` with ``zeta_A(d, c) <= x`` on ``(h, a]``."""
    bottom = curve.eps_box.a_lo
    ds = np.linspace(a, bottom, 401)
    z = curve.zeta_line("A", ds, c)
    above = np.nonzero(z > x)[0]
    above = above[above > 0]
    if not above.size:
        return bottom
    k = int(above[0])
    f = lambda d: float(curve.zeta_line("A", d, c)) - x
    return float(brentq(f, ds[k], ds[k - 1], xtol=1e-14))


def landing_state(curve: CurveSolution, x: float, a: float, c: float) -> tuple[float, float]:
    """Action pair in force at reserve ``x`` after the region maps have acted."""
    for _ in range(64):
        moved = False
        if c < curve.eps_box.c_hi and x >= curve.zeta("C", a, c):
            c2 = _c_map(curve, x, a, c)
            moved |= c2 != c
            c = c2
        if a > curve.eps_box.a_lo and x >= curve.zeta("A", a, c):
            a2 = _a_map(curve, x, a, c)
            moved |= a2 != a
            a = a2
        if not moved:
            break
    return a, c


def eval_W_curve(curve: CurveSolution, x: float, a: float, c: float, order: int = 0) -> float:
    """``W^zeta(x, a, c)``: ``H`` at the landing state."""
    curve._need(a, c)
    if x < 0:
        raise DomainError("reserve must be nonnegative")
    a2, c2 = landing_state(curve, x, a, c)
    return float(H_value(curve.params, K_along_curve(curve, a2, c2), x, a2, c2, order))


# ---------------------------------------------------------------------------
# checks


def implicit_residuals(curve: CurveSolution) -> dict:
    """Plug-back of ``K = -b0x/b1x + weight`` along each ray.

    Errors are measured against the ray's own K scale (sup norm); near the
    corner K decays to 1e-20 and pointwise ratios there only measure rounding.
    """
    p = curve.params
    out = {"C": 0.0, "A": 0.0}
    for ray in curve.c_rays:
        out["C"] = max(out["C"], _ray_plugback(p, ray, _k_along_c_ray(ray, p)))
    for ray in curve.a_rays:
        out["A"] = max(out["A"], _ray_plugback(p, ray, _k_along_a_ray(ray, p)))
    return out


def _ray_plugback(p, ray, K):
    fam = ray.family
    ref = np.empty_like(K)
    for k in range(len(K)):
        if fam == "c":
            t = b_terms(p, "c", ray.fine_zeta[k], ray.fixed, ray.fine_var[k])
            w = ray.weight_const * math.exp(ray.I_total - ray.fine_I[k]) if ray.weight_const else 0.0
        else:
            t = b_terms(p, "a", ray.fine_zeta[k], ray.fine_var[k], ray.fixed)
            w = ray.weight_const * math.exp(ray.fine_I[k]) if ray.weight_const else 0.0
        ref[k] = t.k_implicit + w
    scale = max(float(np.max(np.abs(ref))), np.finfo(float).tiny)
    return float(np.max(np.abs(K - ref)) / scale)


def quadrature_change(p: ModelParams, ray: Ray) -> float:
    """Relative change of the Simpson K when the fine grid is coarsened by two."""
    K = _k_along_c_ray(ray, p) if ray.family == "c" else _k_along_a_ray(ray, p)
    half = dataclasses.replace(ray, fine_var=ray.fine_var[::2], fine_zeta=ray.fine_zeta[::2],
                               fine_I=ray.fine_I[::2], fine_J=ray.fine_J[::2],
                               n_sub=max(ray.n_sub // 2, 1))
    Kh = _k_along_c_ray(half, p) if ray.family == "c" else _k_along_a_ray(half, p)
    scale = max(float(np.max(np.abs(K))), np.finfo(float).tiny)
    return float(np.max(np.abs(K[::2] - Kh)) / scale)


@dataclass(frozen=True)
class CurveOptimalityReport:
    L_at_zeta_A: float
    Wx_at_zeta_C: float
    Wa_min: float
    Wc_max: float
    K_corner: float
    K_min_interior: float
    M_positive: bool
    N_condition: bool
    conditions_met: bool
    worst: dict

    def to_dict(self) -> dict:
        return {k: (v if not isinstance(v, (np.floating, np.bool_)) else v.item())
                for k, v in self.__dict__.items()}


def verify_curve_optimality(curve: CurveSolution, tol: float = 1e-6, n_x: int = 25,
                            h: float = 1e-5) -> CurveOptimalityReport:
    """Sample the verification conditions on the tabulation; never raises on failure."""
    p = curve.params
    e = curve.eps_box
    worst = {}
    L_max, wx_max, wa_min, wc_max = -math.inf, -math.inf, math.inf, -math.inf
    for i, a in enumerate(curve.a_nodes):
        for j, c in enumerate(curve.c_nodes):
            zA, zC = curve.zeta_A[i, j], curve.zeta_C[i, j]
            # generator at the a-curve, evaluated just inside the change region
            if a > e.a_lo:
                x = zA * (1 + 1e-6)
                hx = 1e-3 * max(1.0, x)
                w0 = eval_W_curve(curve, x, a, c)
                wp, wm = eval_W_curve(curve, x + hx, a, c), eval_W_curve(curve, x - hx, a, c)
                w1 = (wp - wm) / (2 * hx)
                w2 = (wp - 2 * w0 + wm) / hx**2
                L = 0.5 * p.sigma**2 * a * a * w2 + (p.mu * a - p.b - c) * w1 - p.q * w0 + c
                if L > L_max:
                    L_max, worst["L"] = L, (a, c, x)
            if c < e.c_hi:
                wx = eval_W_curve(curve, zC, a, c, order=1)
                if wx > wx_max:
                    wx_max, worst["Wx"] = wx, (a, c, zC)
            xs = np.linspace(0.0, min(zA, zC), n_x + 1)[1:-1]
            for x in xs:
                if a - h >= e.a_lo and a + h <= e.a_hi:
                    wa = (eval_W_curve(curve, x, a + h, c) - eval_W_curve(curve, x, a - h, c)) / (2 * h)
                    if wa < wa_min:
                        wa_min, worst["Wa"] = wa, (a, c, x)
                if c - h >= e.c_lo and c + h <= e.c_hi:
                    wc = (eval_W_curve(curve, x, a, c + h) - eval_W_curve(curve, x, a, c - h)) / (2 * h)
                    if wc > wc_max:
                        wc_max, worst["Wc"] = wc, (a, c, x)
    K_corner = float(curve.K[0, -1])
    interior = curve.K.copy()
    interior[0, -1] = np.inf
    M_pos = bool(np.all(curve.M_of_a[1:] > 0))
    n_ok = True
    for j, c in enumerate(curve.c_nodes):
        for i, a in enumerate(curve.a_nodes):
            d = float(_bvals(p, curve.zeta_A[i, j], a, c, 1)[1]) * curve.N_of_c[j]
            strict = not (p.mu * a - 2 * (p.b + c) < 0
                          and p.sigma < math.sqrt(-p.mu * (p.mu * a - 2 * (p.b + c)) / (2 * p.q * a)))
            if (strict and not d > 0) or (not strict and not d >= 0):
                n_ok = False
    ok, _ = corner_condition(p, curve.box)
    return CurveOptimalityReport(
        L_at_zeta_A=L_max, Wx_at_zeta_C=wx_max, Wa_min=wa_min, Wc_max=wc_max,
        K_corner=K_corner, K_min_interior=float(interior.min()),
        M_positive=M_pos, N_condition=n_ok, conditions_met=bool(ok and M_pos and n_ok),
        worst=worst,
    )
