"""Infection-to-severe-event mapping: severity schedule, discounting, delay convolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from . import kernels


@dataclass
class DelayDistribution:
    """Probability mass of the infection-to-event delay per half-day lag."""

    mass: np.ndarray
    dt: float = 0.5

    def __post_init__(self):
        self.mass = np.ascontiguousarray(self.mass, dtype=float)
        if self.mass.ndim != 1 or self.mass.size == 0:
            raise ValueError("delay mass must be a non-empty vector")
        if np.any(self.mass < 0):
            raise ValueError("delay mass must be >= 0")
        if abs(self.mass.sum() - 1.0) > 1e-9:
            raise ValueError(f"delay mass sums to {self.mass.sum():.12g}, not 1")

    @classmethod
    def gamma(cls, mean_days: float, sd_days: float, dt: float = 0.5,
              coverage: float = 0.9999) -> "DelayDistribution":
        """Gamma delay discretised onto lags ``[k dt, (k+1) dt)``."""
        shape = (mean_days / sd_days) ** 2
        scale = sd_days ** 2 / mean_days
        top = stats.gamma.ppf(coverage, shape, scale=scale)
        n = int(np.ceil(top / dt)) + 1
        cdf = stats.gamma.cdf(np.arange(n + 1) * dt, shape, scale=scale)
        mass = np.diff(cdf)
        return cls(mass / mass.sum(), dt)

    @classmethod
    def from_table(cls, lag_days, mass, dt: float = 0.5) -> "DelayDistribution":
        lag_days = np.asarray(lag_days, dtype=float)
        steps = lag_days / dt
        if np.any(np.abs(steps - np.round(steps)) > 1e-9) or np.any(steps < 0):
            raise ValueError("lags must be nonnegative multiples of dt")
        out = np.zeros(int(np.round(steps.max())) + 1)
        np.add.at(out, np.round(steps).astype(int), np.asarray(mass, dtype=float))
        return cls(out, dt)

    @property
    def mean_days(self) -> float:
        return float(np.sum(np.arange(self.mass.size) * self.mass) * self.dt)


@dataclass
class SeveritySchedule:
    """Baseline severity per age with logit-scale adjustments at changepoints."""

    changepoints: np.ndarray  # days
    window_days: float = 30.0

    def __post_init__(self):
        self.changepoints = np.asarray(self.changepoints, dtype=float).reshape(-1)
        if np.any(np.diff(self.changepoints) <= 0):
            raise ValueError("severity changepoints must be strictly increasing")
        if not self.window_days > 0:
            raise ValueError("transition window must be positive")

    def ramp_matrix(self, times_days) -> np.ndarray:
        """``g((t - t'_s) / window)`` for every time and changepoint."""
        t = np.asarray(times_days, dtype=float)
        return ramp((t[:, None] - self.changepoints[None, :]) / self.window_days)


def ramp(x):
    """0 below zero, linear on [0, 1], 1 above."""
    return np.clip(x, 0.0, 1.0)


def severity_at(times_days, p0, zeta, schedule: SeveritySchedule):
    """Unvaccinated severity ratio ``p[t, a]``.

    ``logit p = logit p0_a + sum_s g((t - t'_s)/30) zeta[a, s]``.
    """
    p0 = np.asarray(p0, dtype=float)
    zeta = np.asarray(zeta, dtype=float).reshape(p0.size, -1)
    g = schedule.ramp_matrix(np.atleast_1d(times_days))
    out = expit(logit(p0)[None, :] + g @ zeta.T)
    return out if np.ndim(times_days) else out[0]


def discounted_infections(flows, alpha):
    """``sum_q (1 - alpha_q) Delta_q`` over the trailing dose axis."""
    flows = np.asarray(flows, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("severity efficacies must lie in [0, 1]")
    return np.sum((1.0 - alpha) * flows, axis=-1)


def expected_events(delta_star, p, delay: DelayDistribution):
    """Delay convolution ``mu_k = sum_{l<=k} f_{k-l} p_l Delta*_l``.

    Inputs are aligned on the step grid with shape ``(K,)`` or ``(K, A)``.
    """
    x = np.asarray(delta_star, dtype=float) * np.asarray(p, dtype=float)
    squeeze = x.ndim == 1
    x = np.ascontiguousarray(x.reshape(x.shape[0], -1))
    out = np.empty_like(x)
    kernels.convolve_delay(x, delay.mass, out)
    return out[:, 0] if squeeze else out


def population_severity(flows, p_by_dose):
    """Infection-weighted severity across dose strata; NaN where no infections."""
    flows = np.asarray(flows, dtype=float)
    p_by_dose = np.asarray(p_by_dose, dtype=float)
    total = flows.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        # normalise before weighting so subnormal flows do not underflow
        weights = flows / np.where(total > 0, total, 1.0)[..., None]
        out = np.where(total > 0, np.sum(p_by_dose * weights, axis=-1), np.nan)
    return out if np.ndim(out) else float(out)


def dose_severity(p_unvaccinated, alpha):
    """``p_q = (1 - alpha_q) p_0``; ``p_unvaccinated`` broadcasts over the dose axis."""
    return (1.0 - np.asarray(alpha, dtype=float)) * np.asarray(p_unvaccinated, dtype=float)[..., None]
