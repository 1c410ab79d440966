"""Stratified epidemic nowcasting: dose-stratified transmission model, multi-stream
likelihood and adaptive block MCMC."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import StratumSpec, Calendar, ContactSchedule, validate_state  # noqa: E402

__all__ = ["__version__", "StratumSpec", "Calendar", "ContactSchedule", "validate_state"]
