"""Optimal dividend ratcheting with irreversible proportional reinsurance."""

from __future__ import annotations

__version__ = "0.1.0"
