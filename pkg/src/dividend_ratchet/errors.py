"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RatchetError(Exception):
    """Base class for all package errors."""


class ValidationError(RatchetError, ValueError):
    """Invalid parameter, grid or configuration."""


class DegenerateDiffusionError(RatchetError, ValueError):
    """Retention a = 0 removes the Brownian part; the root-based formulas collapse."""


class DomainError(RatchetError, ValueError):
    """Argument outside the domain of a closed-form expression."""


class ConditionNotMetError(RatchetError):
    """A structural hypothesis required by a construction does not hold."""


class ValidityDomainExceeded(RatchetError):
    """An ODE ray left the region where its right-hand side is defined."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class NoValidXaError(RatchetError):
    """The geometric scan for the a-curve boundary point hit its cap."""


class ContractViolation(RatchetError):
    """A strategy returned actions that break the ratchet constraints."""
