"""Model primitives: diffusion parameters, action grids and the characteristic roots.

Between action switches the reserve is a Brownian motion with drift
``mu*a - b - c`` and volatility ``sigma*a``.  The discounted value of holding
``(a, c)`` until ruin solves the linear ODE

    0.5*sigma^2*a^2*W'' + (mu*a - b - c)*W' - q*W + c = 0,

whose homogeneous solutions are ``exp(theta1*x)`` and ``exp(theta2*x)`` with
``theta2 < 0 < theta1`` the roots of ``0.5*sigma^2*a^2*t^2 + (mu*a-b-c)*t - q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateDiffusionError, DomainError, ValidationError

__all__ = [
    "ActionGrid",
    "CLPrimitives",
    "ModelParams",
    "PremiumPrinciple",
    "ThetaPair",
    "ThetaPartials",
    "ThetaSecond",
    "params_from_cl",
    "singleton_value",
    "singleton_value_deterministic",
    "theta_partials",
    "theta_roots",
    "theta_second_partials",
]


@dataclass(frozen=True)
class ModelParams:
    """Drift ``mu`` per retained unit, volatility ``sigma``, drift drag ``b``, discount ``q``."""

    mu: float
    sigma: float
    b: float
    q: float

    def __post_init__(self):
        for name in ("mu", "sigma", "b", "q"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValidationError(f"{name} must be a finite number, got {v!r}")
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.q <= 0:
            raise ValidationError(f"q must be positive, got {self.q}")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "b": self.b, "q": self.q}


class PremiumPrinciple(str, Enum):
    EXPECTED_VALUE = "expected-value"
    STANDARD_DEVIATION = "standard-deviation"
    MODIFIED_VARIANCE = "modified-variance"


@dataclass(frozen=True)
class CLPrimitives:
    """Cramér-Lundberg inputs: claim intensity, claim moments and the two loadings."""

    lam: float
    mu0: float
    sigma0_sq: float
    theta: float
    gamma: float
    principle: PremiumPrinciple = PremiumPrinciple.EXPECTED_VALUE

    def __post_init__(self):
        for name in ("lam", "mu0", "sigma0_sq", "theta", "gamma"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                raise ValidationError(f"{name} must be a positive finite number, got {v!r}")
        try:
            object.__setattr__(self, "principle", PremiumPrinciple(self.principle))
        except ValueError:
            raise ValidationError(f"unknown premium principle {self.principle!r}") from None

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "mu0": self.mu0,
            "sigma0_sq": self.sigma0_sq,
            "theta": self.theta,
            "gamma": self.gamma,
            "principle": self.principle.value,
        }


def params_from_cl(prim: CLPrimitives, q: float) -> ModelParams:
    """Diffusion approximation of the reinsured Cramér-Lundberg reserve."""
    sigma = math.sqrt(prim.lam * prim.sigma0_sq)
    if prim.principle is PremiumPrinciple.EXPECTED_VALUE:
        unit = prim.lam * prim.mu0
    elif prim.principle is PremiumPrinciple.STANDARD_DEVIATION:
        unit = sigma
    else:
        unit = prim.sigma0_sq / prim.mu0
    return ModelParams(
        mu=prim.theta * unit, sigma=sigma, b=(prim.theta - prim.gamma) * unit, q=q
    )


@dataclass(frozen=True)
class ActionGrid:
    """Retention levels ``a_1 > ... > a_m`` and dividend rates ``c_1 < ... < c_n``."""

    retentions: tuple[float, ...]
    dividends: tuple[float, ...]

    def __init__(self, retentions: Sequence[float], dividends: Sequence[float]):
        r = tuple(float(v) for v in retentions)
        d = tuple(float(v) for v in dividends)
        if not r or not d:
            raise ValidationError("grid needs at least one retention and one dividend level")
        if any(not (0.0 <= v <= 1.0) for v in r):
            raise ValidationError(f"retentions must lie in [0, 1], got {r}")
        if any(v < 0 or not math.isfinite(v) for v in d):
            raise ValidationError(f"dividend rates must be finite and >= 0, got {d}")
        if any(r[k] <= r[k + 1] for k in range(len(r) - 1)):
            raise ValidationError(f"retentions must be strictly decreasing, got {r}")
        if any(d[k] >= d[k + 1] for k in range(len(d) - 1)):
            raise ValidationError(f"dividend rates must be strictly increasing, got {d}")
        object.__setattr__(self, "retentions", r)
        object.__setattr__(self, "dividends", d)

    @property
    def m(self) -> int:
        return len(self.retentions)

    @property
    def n(self) -> int:
        return len(self.dividends)

    @property
    def c_max(self) -> float:
        return self.dividends[-1]

    def retention_index(self, a: float) -> int:
        """Index of ``max{a_i : a_i <= a}``."""
        if a < self.retentions[-1] - 1e-15 or a > self.retentions[0] + 1e-15:
            raise DomainError(f"retention {a} outside grid hull {self.retentions[-1]}..{self.retentions[0]}")
        for i, ai in enumerate(self.retentions):
            if ai <= a + 1e-15:
                return i
        return self.m - 1

    def dividend_index(self, c: float) -> int:
        """Index of ``min{c_j : c_j >= c}``."""
        if c < self.dividends[0] - 1e-15 or c > self.dividends[-1] + 1e-15:
            raise DomainError(f"dividend rate {c} outside grid hull {self.dividends[0]}..{self.dividends[-1]}")
        for j, cj in enumerate(self.dividends):
            if cj >= c - 1e-15:
                return j
        return self.n - 1

    def to_dict(self) -> dict:
        return {"retentions": list(self.retentions), "dividends": list(self.dividends)}


class ThetaPair(NamedTuple):
    theta1: float
    theta2: float


class ThetaPartials(NamedTuple):
    d1_da: float
    d2_da: float
    d1_dc: float
    d2_dc: float


class ThetaSecond(NamedTuple):
    d1_daa: float
    d2_daa: float
    d1_dcc: float
    d2_dcc: float


def _roots(p: ModelParams, a, c):
    """Roots without validation; accepts numpy arrays and complex ``a``/``c``."""
    s2 = p.sigma**2 * a * a
    B = p.b + c - p.mu * a
    D = np.sqrt(B * B + 2.0 * p.q * s2)
    pos = np.real(B) >= 0
    # pick the cancellation-free expression for each root, close the other with Vieta
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(pos, (B + D) / s2, 2.0 * p.q / (D - B))
        t2 = np.where(pos, -2.0 * p.q / (B + D), (B - D) / s2)
    if np.ndim(t1) == 0:
        t1, t2 = t1[()], t2[()]
    return t1, t2, D


def _first_partials(p: ModelParams, a, c, t1, t2, D):
    # implicit differentiation of f(t) = 0.5*s^2 a^2 t^2 + (mu a - b - c) t - q,
    # f_t(theta1) = D, f_t(theta2) = -D
    s2 = p.sigma**2
    d1c = t1 / D
    d2c = -t2 / D
    d1a = -(s2 * a * t1 * t1 + p.mu * t1) / D
    d2a = (s2 * a * t2 * t2 + p.mu * t2) / D
    return d1a, d2a, d1c, d2c


def _check_a(a: float) -> None:
    if a <= 0:
        raise DegenerateDiffusionError(
            f"retention a={a} leaves no diffusion; characteristic roots are undefined"
        )


def theta_roots(p: ModelParams, a: float, c: float) -> ThetaPair:
    _check_a(a)
    t1, t2, _ = _roots(p, a, c)
    return ThetaPair(float(t1), float(t2))


def theta_partials(p: ModelParams, a: float, c: float) -> ThetaPartials:
    """Closed-form ``(d theta1/da, d theta2/da, d theta1/dc, d theta2/dc)``.

    Equivalent to the textbook expressions, e.g.
    ``d theta1/dc = (1 + B/D) / (sigma^2 a^2)`` with ``B = b + c - mu a``.
    """
    _check_a(a)
    t1, t2, D = _roots(p, a, c)
    return ThetaPartials(*(float(v) for v in _first_partials(p, a, c, t1, t2, D)))


def _second_partials(p: ModelParams, a, c, t1, t2, D):
    s2 = p.sigma**2
    B = p.b + c - p.mu * a
    d1a, d2a, d1c, d2c = _first_partials(p, a, c, t1, t2, D)
    Dc = B / D
    Da = (-p.mu * B + 2.0 * p.q * s2 * a) / D
    d1cc = (d1c * D - t1 * Dc) / (D * D)
    d2cc = -(d2c * D - t2 * Dc) / (D * D)
    n1 = s2 * a * t1 * t1 + p.mu * t1
    n2 = s2 * a * t2 * t2 + p.mu * t2
    n1a = s2 * t1 * t1 + 2.0 * s2 * a * t1 * d1a + p.mu * d1a
    n2a = s2 * t2 * t2 + 2.0 * s2 * a * t2 * d2a + p.mu * d2a
    d1aa = -(n1a * D - n1 * Da) / (D * D)
    d2aa = (n2a * D - n2 * Da) / (D * D)
    return d1aa, d2aa, d1cc, d2cc


def theta_second_partials(p: ModelParams, a: float, c: float) -> ThetaSecond:
    _check_a(a)
    t1, t2, D = _roots(p, a, c)
    return ThetaSecond(*(float(v) for v in _second_partials(p, a, c, t1, t2, D)))


def singleton_value_deterministic(p: ModelParams, c: float, x):
    """Value of paying ``c`` forever with full reinsurance (``a = 0``).

    The reserve moves deterministically at speed ``-(b + c)``: it never ruins
    when that speed is nonnegative, otherwise it hits zero at ``x/(b + c)``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("reserve must be nonnegative")
    speed = p.b + c
    if speed <= 0:
        out = np.full_like(x, c / p.q)
    else:
        out = -(c / p.q) * np.expm1(-p.q * x / speed)
    return out[()] if out.ndim == 0 else out


def singleton_value(p: ModelParams, a: float, c: float, x):
    """``(c/q) * (1 - exp(theta2 * x))``: hold ``(a, c)`` until ruin."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("reserve must be nonnegative")
    if a == 0:
        return singleton_value_deterministic(p, c, x)
    _check_a(a)
    _, t2 = theta_roots(p, a, c)
    out = -(c / p.q) * np.expm1(t2 * x)
    return out[()] if out.ndim == 0 else out
