"""Strata, state layout and time discretisation shared by every other module.

The state of one region at one half-day step is a dense array indexed
``(age, dose, disease_state)``; the full model state stacks regions on the
outermost axis so that regional blocks can be processed independently.
"""
from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# disease-state axis
S, E1, E2, I1, I2, RP, RM, W, WS = range(9)
N_STATES = 9
STATE_NAMES = ("S", "E1", "E2", "I1", "I2", "R+", "R-", "W", "WS")

EIGHT_AGE_BANDS = ("<1", "1-4", "5-14", "15-24", "25-44", "45-64", "65-74", "75+")


class HorizonError(ValueError):
    """A date or step falls outside the analysis horizon."""


@dataclass(frozen=True)
class StratumSpec:
    """Shape of the stratified state and the time grid.

    Parameters
    ----------
    n_regions, n_ages : int
        Number of independent regions and age bands.
    max_dose : int
        Highest vaccine dose tracked; dose strata run ``0..max_dose``.
    dt : float
        Step length in days. ``1/dt`` must be an integer.
    horizon_days : int
        Length of the analysis window in days.
    """

    n_regions: int
    n_ages: int
    max_dose: int = 4
    dt: float = 0.5
    horizon_days: int = 0

    def __post_init__(self):
        if self.n_regions < 1 or self.n_ages < 1:
            raise ValueError("n_regions and n_ages must be >= 1")
        if self.max_dose < 0:
            raise ValueError("max_dose must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        inv = 1.0 / self.dt
        if abs(inv - round(inv)) > 1e-9:
            raise ValueError(f"1/dt must be an integer, got 1/{self.dt} = {inv}")
        if self.horizon_days < 0:
            raise ValueError("horizon_days must be >= 0")

    @property
    def steps_per_day(self) -> int:
        return int(round(1.0 / self.dt))

    @property
    def n_doses(self) -> int:
        return self.max_dose + 1

    @property
    def n_steps(self) -> int:
        """Number of half-day steps K covering the horizon."""
        return self.horizon_days * self.steps_per_day

    @property
    def region_shape(self) -> tuple[int, int, int]:
        return (self.n_ages, self.n_doses, N_STATES)

    @property
    def state_shape(self) -> tuple[int, int, int, int]:
        return (self.n_regions, self.n_ages, self.n_doses, N_STATES)

    def index_of(self, day: int) -> int:
        """First step of ``day`` (days counted from the start date)."""
        day = int(day)
        if day < 0 or day > self.horizon_days:
            raise HorizonError(f"day {day} outside horizon [0, {self.horizon_days}]")
        return day * self.steps_per_day

    def day_of(self, step: int) -> int:
        step = int(step)
        if step < 0 or step > self.n_steps:
            raise HorizonError(f"step {step} outside [0, {self.n_steps}]")
        return step // self.steps_per_day


@dataclass
class Calendar:
    """Maps calendar dates to day offsets from ``start``."""

    start: _dt.date
    horizon_days: int

    def day(self, value) -> int:
        """Day offset of an ISO date, ``date`` or integer offset."""
        if isinstance(value, (int, np.integer)):
            return int(value)
        if isinstance(value, str):
            value = _dt.date.fromisoformat(value)
        if isinstance(value, _dt.datetime):
            value = value.date()
        return (value - self.start).days

    def date(self, day: int) -> _dt.date:
        return self.start + _dt.timedelta(days=int(day))

    def in_horizon(self, day: int) -> bool:
        return 0 <= day <= self.horizon_days


@dataclass
class ContactSchedule:
    """Time-indexed region-specific age-mixing matrices.

    ``matrices[r]`` has shape ``(n_breakpoints_r, A, A)`` and
    ``breakpoints[r]`` holds the day each matrix becomes active.
    """

    breakpoints: list[np.ndarray]
    matrices: list[np.ndarray]

    def __post_init__(self):
        for r, (bp, mats) in enumerate(zip(self.breakpoints, self.matrices)):
            bp = np.asarray(bp)
            if bp.size == 0:
                raise ValueError(f"region {r}: no contact matrices")
            if np.any(np.diff(bp) <= 0):
                raise ValueError(f"region {r}: breakpoints must be strictly increasing")
            if bp[0] > 0:
                raise ValueError(f"region {r}: first contact breakpoint must be on or before day 0")
            if mats.shape[0] != bp.size:
                raise ValueError(f"region {r}: {mats.shape[0]} matrices for {bp.size} breakpoints")
            if np.any(mats < 0) or not np.all(np.isfinite(mats)):
                raise ValueError(f"region {r}: contact entries must be finite and >= 0")

    def step_index(self, region: int, spec: StratumSpec) -> np.ndarray:
        """Active matrix index for every step ``k = 0..K-1``."""
        days = np.arange(spec.n_steps) // spec.steps_per_day
        return (np.searchsorted(self.breakpoints[region], days, side="right") - 1).astype(np.int64)


@dataclass
class Violation:
    region: int
    age: int
    dose: int | None
    state: str | None
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "ok"
        return "\n".join(
            f"(r={v.region}, a={v.age}, dose={v.dose}, state={v.state}): {v.message}"
            for v in self.violations
        )


def validate_state(values: np.ndarray, spec: StratumSpec, populations: np.ndarray,
                   rtol: float = 1e-9) -> ValidationReport:
    """Check nonnegativity and per-(region, age) population conservation.

    Every violated cell is listed in the returned report.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != spec.state_shape:
        raise ValueError(f"state shape {values.shape} != {spec.state_shape}")
    populations = np.asarray(populations, dtype=float)
    report = ValidationReport()
    for r, a, q, c in zip(*np.nonzero(~(values >= 0))):
        report.violations.append(
            Violation(int(r), int(a), int(q), STATE_NAMES[c], f"negative count {values[r, a, q, c]:g}"))
    totals = values.sum(axis=(2, 3))
    bad = np.abs(totals - populations) > rtol * populations
    for r, a in zip(*np.nonzero(bad)):
        report.violations.append(Violation(
            int(r), int(a), None, None,
            f"population {totals[r, a]:.12g} != N = {populations[r, a]:.12g}"))
    return report


def age_group_matrix(groups: dict[str, Sequence[str]], age_bands: Sequence[str],
                     cover: bool = True) -> tuple[list[str], np.ndarray]:
    """0/1 aggregation matrix of shape ``(n_groups, n_ages)`` from a band partition."""
    names = list(groups)
    mat = np.zeros((len(names), len(age_bands)))
    index = {b: i for i, b in enumerate(age_bands)}
    seen: dict[str, str] = {}
    for g, bands in enumerate(groups.values()):
        for b in bands:
            if b not in index:
                raise ValueError(f"unknown age band {b!r} in group {names[g]!r}")
            if b in seen:
                raise ValueError(f"age band {b!r} in both {seen[b]!r} and {names[g]!r}")
            seen[b] = names[g]
            mat[g, index[b]] = 1.0
    if cover and len(seen) != len(age_bands):
        missing = [b for b in age_bands if b not in seen]
        raise ValueError(f"age groups do not cover bands {missing}")
    return names, mat
