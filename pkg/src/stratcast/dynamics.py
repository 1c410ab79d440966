"""Deterministic half-day stepping of the dose-stratified SEEIIR+R-WWs system.

Within a step every flow is computed from the start-of-step occupancies
(explicit Euler).  Per-step transition probabilities are ``2 dt/d_L`` for
each latent stage, ``2 dt/d_I`` for each infectious stage, ``dt/d_R`` out of
R+ and ``2 dt/d_w`` for each of the two waning stages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import E1, E2, I1, I2, N_STATES, S, StratumSpec

log = logging.getLogger(__name__)

MRNA, NON_MRNA = 0, 1


class ConfigurationError(ValueError):
    """Rates too large for the chosen step length."""


# --------------------------------------------------------------------------
# force of infection

def pairwise_infection_prob(beta, m_a, c_entry, n_source, dt=1.0):
    """Probability that one infective of the source age infects a given susceptible.

    ``b = 1 - exp(-beta * m_a * c_entry * dt / n_source)``.  With the default
    ``dt = 1`` this is the per-day probability used by the dynamics.
    """
    beta, m_a, c_entry, n_source = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (beta, m_a, c_entry, n_source)))
    if np.any((n_source == 0) & (c_entry > 0)):
        raise ValueError("zero source population with positive contact rate")
    if np.any(beta < 0) or np.any(m_a < 0) or np.any(c_entry < 0) or np.any(n_source < 0):
        raise ValueError("inputs must be >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        hazard = np.where(c_entry > 0, beta * m_a * c_entry * dt / np.where(n_source > 0, n_source, 1.0), 0.0)
    b = -np.expm1(-hazard)
    b = np.minimum(b, np.nextafter(1.0, 0.0))
    return b if b.ndim else float(b)


def infection_probability(b, infectious):
    """``1 - prod_a' (1 - b[a, a'])**I[a']`` evaluated in log space.

    ``b`` may be a single row (one susceptible age) or an ``(A, A')`` matrix.
    """
    b = np.asarray(b, dtype=float)
    infectious = np.asarray(infectious, dtype=float)
    if np.any(b >= 1.0) or np.any(b < 0.0):
        raise ValueError("pairwise probabilities must lie in [0, 1)")
    if np.any(infectious < 0):
        raise ValueError("infectious counts must be >= 0")
    log_escape = np.log1p(-b) @ infectious
    lam = -np.expm1(log_escape)
    return lam if np.ndim(lam) else float(lam)


def dose_stratified_foi(lambda0, pi_q):
    """Force of infection on each dose stratum, ``(1 - pi_q) * lambda0``."""
    pi_q = np.asarray(pi_q, dtype=float)
    if np.any(pi_q < 0) or np.any(pi_q > 1):
        raise ValueError("efficacies must lie in [0, 1]")
    lam = np.asarray(lambda0, dtype=float)
    if lam.ndim and pi_q.ndim > lam.ndim:
        lam = lam[..., None]
    out = (1.0 - pi_q) * lam
    return out if out.ndim else float(out)


def new_infections(susceptible, waned, foi, dt):
    """New infections per dose from S and Ws, capped at the source occupancy.

    Returns ``(per_dose, total)`` where ``per_dose`` sums both sources.
    """
    susceptible = np.asarray(susceptible, dtype=float)
    waned = np.asarray(waned, dtype=float)
    frac = np.minimum(np.asarray(foi, dtype=float) * dt, 1.0)
    per_dose = (susceptible + waned) * frac
    return per_dose, float(np.sum(per_dose))


# --------------------------------------------------------------------------
# vaccination

@dataclass
class VaccinationFeed:
    """Daily counts of newly effective doses for one region.

    ``counts[d, a, q, t]`` is the number of ``(q+1)``-th doses of vaccine type
    ``t`` (0 = mRNA, 1 = non-mRNA) counted on day ``d`` for age ``a``.
    Dates are already shifted by the immune-response lag.
    """

    counts: np.ndarray
    start_day: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.ndim != 4 or self.counts.shape[3] != 2:
            raise ValueError("counts must have shape (days, ages, doses, 2)")
        if np.any(self.counts < 0):
            raise ValueError("vaccination counts must be >= 0")
        cum = self.totals.cumsum(axis=0)
        if np.any(cum[:, :, 1:] > cum[:, :, :-1] * (1 + 1e-12) + 1e-9):
            raise ValueError("cumulative q-th doses exceed cumulative (q-1)-th doses")

    @property
    def totals(self) -> np.ndarray:
        """Counts summed over vaccine type, shape ``(days, ages, doses)``."""
        return self.counts.sum(axis=3)

    @classmethod
    def empty(cls, n_days: int, n_ages: int, max_dose: int) -> "VaccinationFeed":
        return cls(np.zeros((n_days, n_ages, max(max_dose, 0), 2)))


def vaccination_denominators(totals: np.ndarray, populations: np.ndarray) -> np.ndarray:
    """People eligible for each dose at the start of each day.

    ``totals[d, a, q]`` counts ``(q+1)``-th doses.  Dose 1 draws from the
    never-vaccinated, dose ``q > 1`` from those holding exactly ``q-1``.
    """
    prior = np.cumsum(totals, axis=0) - totals  # doses given before day d
    denom = np.empty_like(prior)
    denom[:, :, 0] = populations[None, :] - prior[:, :, 0]
    denom[:, :, 1:] = prior[:, :, :-1] - prior[:, :, 1:]
    return denom


def daily_fraction_to_rate(v_star, dt):
    """Invert ``v* = 1 - (1 - v dt)**(1/dt)`` for the per-step rate ``v``."""
    v_star = np.asarray(v_star, dtype=float)
    return -np.expm1(dt * np.log1p(-v_star)) / dt


def rate_to_daily_fraction(v, dt):
    v = np.asarray(v, dtype=float)
    return -np.expm1(np.log1p(-v * dt) / dt)


def vaccination_rates(feed: VaccinationFeed, populations, dt: float) -> np.ndarray:
    """Per-day model rates ``v[d, a, q]`` for moving to dose ``q+1``.

    Daily fractions above one (more doses than eligible people) are clamped
    to the full denominator and logged.
    """
    populations = np.asarray(populations, dtype=float)
    totals = feed.totals
    denom = vaccination_denominators(totals, populations)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_star = np.where(totals > 0, totals / np.where(denom > 0, denom, np.nan), 0.0)
    over = ~(v_star <= 1.0)
    if np.any(over):
        d, a, q = np.argwhere(over)[0]
        log.warning("vaccination feed: %d cells exceed their denominator (first: day %d, age %d, dose %d); clamped",
                    int(over.sum()), d, a, q + 1)
        v_star = np.where(over, 1.0, v_star)
    return daily_fraction_to_rate(v_star, dt)


def efficacy_mix(cumulative_mrna, cumulative_total, pi_mrna, pi_az):
    """Cumulative-uptake weighted average of mRNA and non-mRNA efficacies."""
    cumulative_mrna = np.asarray(cumulative_mrna, dtype=float)
    cumulative_total = np.asarray(cumulative_total, dtype=float)
    if np.any(cumulative_mrna > cumulative_total * (1 + 1e-12)):
        raise ValueError("cumulative mRNA doses exceed the total")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(cumulative_total > 0, cumulative_mrna / np.where(cumulative_total > 0, cumulative_total, 1.0), 0.0)
    out = w * pi_mrna + (1.0 - w) * pi_az
    return out if np.ndim(out) else float(out)


@dataclass
class EfficacyTable:
    """Piecewise-constant efficacies by variant era.

    Arrays have shape ``(n_eras, max_dose)``; column ``q`` holds the
    efficacy of ``q+1`` doses.  Days outside every era get zero efficacy.
    """

    starts: np.ndarray
    ends: np.ndarray
    pi_mrna: np.ndarray
    pi_az: np.ndarray
    alpha_mrna: np.ndarray
    alpha_az: np.ndarray

    def era_index(self, days: np.ndarray) -> np.ndarray:
        days = np.asarray(days)
        idx = np.searchsorted(self.starts, days, side="right") - 1
        valid = (idx >= 0) & (days < self.ends[np.maximum(idx, 0)])
        return np.where(valid, idx, -1)

    @classmethod
    def zero(cls, max_dose: int) -> "EfficacyTable":
        z = np.zeros((1, max(max_dose, 0)))
        return cls(np.array([0]), np.array([np.iinfo(np.int64).max]), z, z, z.copy(), z.copy())


def efficacy_by_step(feed: VaccinationFeed, table: EfficacyTable, spec: StratumSpec,
                     horizon_days: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-step ``pi`` and ``alpha`` arrays of shape ``(K, A, Q+1)``; dose 0 is zero."""
    n_days = spec.horizon_days if horizon_days is None else horizon_days
    A, D = spec.n_ages, spec.n_doses
    K = n_days * spec.steps_per_day
    pi = np.zeros((K, A, D))
    alpha = np.zeros((K, A, D))
    if D == 1:
        return pi, alpha
    counts = _pad_days(feed.counts, n_days)
    cum = counts.cumsum(axis=0)  # inclusive of the current day
    days = np.arange(n_days)
    era = table.era_index(days)
    valid = era >= 0
    e = np.maximum(era, 0)
    pdays = np.zeros((n_days, A, D))
    adays = np.zeros((n_days, A, D))
    mix_pi = efficacy_mix(cum[..., MRNA], cum.sum(axis=3),
                          table.pi_mrna[e][:, None, :], table.pi_az[e][:, None, :])
    mix_alpha = efficacy_mix(cum[..., MRNA], cum.sum(axis=3),
                             table.alpha_mrna[e][:, None, :], table.alpha_az[e][:, None, :])
    pdays[:, :, 1:] = np.where(valid[:, None, None], mix_pi, 0.0)
    adays[:, :, 1:] = np.where(valid[:, None, None], mix_alpha, 0.0)
    rep = spec.steps_per_day
    return np.repeat(pdays, rep, axis=0), np.repeat(adays, rep, axis=0)


def vaccination_by_step(feed: VaccinationFeed, populations, spec: StratumSpec,
                        horizon_days: int | None = None) -> np.ndarray:
    """Per-step rates ``vacc[k, a, q]`` of moving from dose ``q`` to ``q+1``."""
    n_days = spec.horizon_days if horizon_days is None else horizon_days
    out = np.zeros((n_days, spec.n_ages, spec.n_doses))
    if spec.n_doses > 1:
        padded = VaccinationFeed(_pad_days(feed.counts, n_days), feed.start_day)
        out[:, :, :-1] = vaccination_rates(padded, populations, spec.dt)
    return np.repeat(out, spec.steps_per_day, axis=0)


def _pad_days(counts: np.ndarray, n_days: int) -> np.ndarray:
    if counts.shape[0] >= n_days:
        return counts[:n_days]
    pad = np.zeros((n_days - counts.shape[0],) + counts.shape[1:])
    return np.concatenate([counts, pad], axis=0)


# --------------------------------------------------------------------------
# waning

def waning_by_step(schedule: list[tuple[int, float]], spec: StratumSpec,
                   horizon_days: int | None = None) -> np.ndarray:
    """Per-stage, per-step waning probability ``2 dt / d_w(t)``.

    ``schedule`` is a list of ``(start_day, mean_days)``; ``inf`` disables waning.
    """
    n_days = spec.horizon_days if horizon_days is None else horizon_days
    starts = np.array([s for s, _ in schedule])
    if np.any(np.diff(starts) <= 0):
        raise ValueError("waning schedule start days must be strictly increasing")
    means = np.array([m for _, m in schedule], dtype=float)
    days = np.arange(n_days * spec.steps_per_day) // spec.steps_per_day
    idx = np.searchsorted(starts, days, side="right") - 1
    with np.errstate(divide="ignore"):
        rate = np.where(idx >= 0, 2.0 * spec.dt / means[np.maximum(idx, 0)], 0.0)
    return rate


def waning_retention(mean_days: float, days: float) -> float:
    """Probability that Erlang-2 waning with the given mean is still incomplete."""
    x = 2.0 * days / mean_days
    return math.exp(-x) * (1.0 + x)


# --------------------------------------------------------------------------
# stepping

@dataclass
class Rates:
    """Per-step transition probabilities for the disease progression."""

    sigma: float
    gamma: float
    rho: float

    @classmethod
    def from_durations(cls, d_L: float, d_I: float, d_R: float, dt: float) -> "Rates":
        return cls(2.0 * dt / d_L, 2.0 * dt / d_I, dt / d_R)

    def check(self, wane: np.ndarray | None = None):
        for name, v in (("latent", self.sigma), ("infectious", self.gamma), ("R+", self.rho)):
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} transition probability {v:.4g} per step exceeds 1; dt too coarse")
        if wane is not None and np.any(wane > 1.0):
            raise ConfigurationError("waning probability per step exceeds 1; dt too coarse")


@dataclass
class Trajectory:
    """Simulated history of one region.

    ``states`` has shape ``(K+1, A, D, 9)``; ``infections[k, a, q, src]``
    holds new infections during step ``k`` from S (``src=0``) and Ws (``src=1``).
    """

    states: np.ndarray
    infections: np.ndarray
    dt: float

    @property
    def steps_per_day(self) -> int:
        return int(round(1.0 / self.dt))

    @property
    def n_days(self) -> int:
        return self.infections.shape[0] // self.steps_per_day

    def incidence(self) -> np.ndarray:
        """New infections per step and dose, ``(K, A, D)``."""
        return self.infections.sum(axis=3)

    def daily(self, per_step: np.ndarray) -> np.ndarray:
        """Sum a per-step series (leading axis K) into days."""
        n = self.steps_per_day
        days = per_step.shape[0] // n
        return per_step[: days * n].reshape((days, n) + per_step.shape[1:]).sum(axis=1)

    def day_states(self) -> np.ndarray:
        """State at the start of each day ``0..n_days``."""
        return self.states[:: self.steps_per_day]


def step(state, beta, contact_hazard, pi, vacc, wane, rates: Rates, dt: float):
    """Advance one region by one step.

    Parameters
    ----------
    state : ndarray (A, D, 9)
    beta : float
        Transmission multiplier for this step.
    contact_hazard : ndarray (A, A)
        Per-day hazard coefficient of one source infective on one susceptible
        (already including susceptibility modifiers and normalisation).
    pi, vacc : ndarray (A, D)
        Infection efficacy and rate of moving to the next dose.
    wane : float
        Per-stage waning probability for this step.

    Returns
    -------
    next_state, infections
        ``infections`` has shape ``(A, D, 2)`` (from S, from Ws).
    """
    rates.check(np.array([wane]))
    state = np.asarray(state, dtype=float)
    A, D, _ = state.shape
    states = np.empty((2, A, D, N_STATES))
    inf = np.empty((1, A, D, 2))
    kernels.simulate_region(
        state, np.array([float(beta)]), np.zeros(1, dtype=np.int64),
        np.ascontiguousarray(contact_hazard, dtype=float)[None],
        np.asarray(pi, dtype=float)[None], np.asarray(vacc, dtype=float)[None],
        np.array([float(wane)]), rates.sigma, rates.gamma, rates.rho, dt, states, inf)
    return states[1], inf[0]


def simulate(x0, beta, cidx, contact_hazard, pi, vacc, wane, rates: Rates, dt: float) -> Trajectory:
    """Iterate :func:`step` over ``K = len(beta)`` steps from ``x0``."""
    rates.check(wane)
    x0 = np.ascontiguousarray(x0, dtype=float)
    K = len(beta)
    A, D, _ = x0.shape
    states = np.empty((K + 1, A, D, N_STATES))
    infections = np.empty((K, A, D, 2))
    kernels.simulate_region(
        x0, np.ascontiguousarray(beta, dtype=float), np.ascontiguousarray(cidx, dtype=np.int64),
        np.ascontiguousarray(contact_hazard, dtype=float), np.ascontiguousarray(pi, dtype=float),
        np.ascontiguousarray(vacc, dtype=float), np.ascontiguousarray(wane, dtype=float),
        rates.sigma, rates.gamma, rates.rho, dt, states, infections)
    return Trajectory(states, infections, dt)


# --------------------------------------------------------------------------
# initial conditions

def growth_stage_proportions(psi: float, rates: Rates, dt: float) -> np.ndarray:
    """Relative (E1, E2, I1, I2) occupancy in discrete exponential growth at rate psi.

    Normalised so that ``I1 + I2 = 1``.
    """
    g = math.exp(psi * dt) - 1.0
    s, c = rates.sigma, rates.gamma
    i1 = 1.0
    i2 = c * i1 / (g + c)
    e2 = (g + c) * i1 / s
    e1 = (g + s) * e2 / s
    tot = i1 + i2
    return np.array([e1, e2, i1, i2]) / tot


def initial_state(populations, seed_infectious: float, psi: float, rates: Rates, dt: float,
                  n_doses: int) -> np.ndarray:
    """Region state at t0: ``seed_infectious`` in I1+I2, E stages in growth proportion.

    Seeds are spread over ages in proportion to population; everybody is unvaccinated.
    """
    populations = np.asarray(populations, dtype=float)
    A = populations.size
    x = np.zeros((A, n_doses, N_STATES))
    share = populations / populations.sum()
    prop = growth_stage_proportions(psi, rates, dt)
    seeds = seed_infectious * share[:, None] * prop[None, :]
    # never seed more than a small fraction of any age band
    total = seeds.sum(axis=1)
    cap = 0.5 * populations
    scale = np.where(total > cap, cap / np.where(total > 0, total, 1.0), 1.0)
    seeds *= scale[:, None]
    x[:, 0, [E1, E2, I1, I2]] = seeds
    x[:, 0, S] = populations - seeds.sum(axis=1)
    return x


__all__ = [
    "ConfigurationError", "EfficacyTable", "Rates", "Trajectory", "VaccinationFeed",
    "daily_fraction_to_rate", "dose_stratified_foi", "efficacy_by_step", "efficacy_mix",
    "growth_stage_proportions", "infection_probability", "initial_state", "new_infections",
    "pairwise_infection_prob", "rate_to_daily_fraction", "simulate", "step",
    "vaccination_by_step", "vaccination_denominators", "vaccination_rates",
    "waning_by_step", "waning_retention",
]
