"""Surveillance streams and their log-likelihoods."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import kernels
from .core import I1, I2, RP

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
ASSAYS = ("EuroImmun", "Roche-N")
STREAMS = ("counts", "serology", "prevalence")


@dataclass
class CountSeries:
    """Daily severe-event counts per region and observation age group."""

    region: np.ndarray
    day: np.ndarray
    group: np.ndarray
    count: np.ndarray
    group_names: list[str]
    aggregation: np.ndarray  # (n_groups, n_ages) 0/1
    kind: str = "admissions"

    def __post_init__(self):
        self.region = np.asarray(self.region, dtype=np.int64)
        self.day = np.asarray(self.day, dtype=np.int64)
        self.group = np.asarray(self.group, dtype=np.int64)
        self.count = np.asarray(self.count, dtype=float)
        if np.any(self.count < 0) or np.any(self.count != np.round(self.count)):
            raise ValueError("counts must be nonnegative integers")
        cover = self.aggregation.sum(axis=0)
        if np.any(cover != 1):
            raise ValueError("observation age groups must partition the model age bands")

    def __len__(self):
        return self.count.size

    def subset(self, mask) -> "CountSeries":
        mask = np.asarray(mask, dtype=bool)
        return CountSeries(self.region[mask], self.day[mask], self.group[mask], self.count[mask],
                           self.group_names, self.aggregation, self.kind)


@dataclass
class SerologySamples:
    """Blood-donor serology; ``day`` is already shifted by the antibody lag."""

    region: np.ndarray
    day: np.ndarray
    assay: np.ndarray  # index into ASSAYS
    n_tested: np.ndarray
    n_positive: np.ndarray

    def __post_init__(self):
        self.region = np.asarray(self.region, dtype=np.int64)
        self.day = np.asarray(self.day, dtype=np.int64)
        self.assay = np.asarray(self.assay, dtype=np.int64)
        self.n_tested = np.asarray(self.n_tested, dtype=float)
        self.n_positive = np.asarray(self.n_positive, dtype=float)
        if np.any(self.n_positive < 0) or np.any(self.n_positive > self.n_tested):
            raise ValueError("serology requires 0 <= n_positive <= n_tested")

    def __len__(self):
        return self.day.size

    def subset(self, mask) -> "SerologySamples":
        mask = np.asarray(mask, dtype=bool)
        return SerologySamples(self.region[mask], self.day[mask], self.assay[mask],
                               self.n_tested[mask], self.n_positive[mask])


@dataclass
class PrevalenceEstimates:
    """Externally modelled log-counts of PCR positives with their standard deviations."""

    region: np.ndarray
    day: np.ndarray
    group: np.ndarray
    log_mean: np.ndarray
    log_sd: np.ndarray
    group_names: list[str]
    aggregation: np.ndarray

    def __post_init__(self):
        self.region = np.asarray(self.region, dtype=np.int64)
        self.day = np.asarray(self.day, dtype=np.int64)
        self.group = np.asarray(self.group, dtype=np.int64)
        self.log_mean = np.asarray(self.log_mean, dtype=float)
        self.log_sd = np.asarray(self.log_sd, dtype=float)
        if np.any(~(self.log_sd > 0)):
            raise ValueError("prevalence standard deviations must be positive")

    def __len__(self):
        return self.day.size

    def subset(self, mask) -> "PrevalenceEstimates":
        mask = np.asarray(mask, dtype=bool)
        return PrevalenceEstimates(self.region[mask], self.day[mask], self.group[mask],
                                   self.log_mean[mask], self.log_sd[mask],
                                   self.group_names, self.aggregation)


@dataclass
class ObservationSet:
    counts: CountSeries | None = None
    serology: SerologySamples | None = None
    prevalence: PrevalenceEstimates | None = None
    enabled: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(STREAMS, True))

    def active(self, stream: str) -> bool:
        return bool(self.enabled.get(stream, False)) and getattr(self, stream) is not None \
            and len(getattr(self, stream)) > 0


# --------------------------------------------------------------------------
# count stream

def nb_logpmf(y, mu, eta):
    """Negative-binomial log-mass with mean ``mu`` and variance ``mu + mu**2/eta``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore"):
        out = (gammaln(y + eta) - gammaln(eta) - gammaln(y + 1.0)
               + eta * (np.log(eta) - np.log(eta + mu)) + y * (np.log(mu) - np.log(eta + mu)))
    out = np.where(mu <= 0, np.where(y > 0, -np.inf, 0.0), out)
    return out if out.ndim else float(out)


def nb_loglik(observed, expected, eta: float) -> float:
    """Summed negative-binomial log-likelihood; ``mu = 0`` with ``y > 0`` gives ``-inf``."""
    if not eta > 0:
        raise ValueError("overdispersion must be positive")
    y = np.ascontiguousarray(observed, dtype=float).ravel()
    mu = np.ascontiguousarray(expected, dtype=float).ravel()
    if np.any(mu < 0):
        raise ValueError("expected counts must be >= 0")
    return float(kernels.nb_loglik(y, mu, float(eta)))


# --------------------------------------------------------------------------
# serology

def positive_probability(pi_inf, sens, spec):
    """Chance that a sample tests positive given the ever-infected fraction."""
    pi_inf = np.asarray(pi_inf, dtype=float)
    return sens * pi_inf + (1.0 - spec) * (1.0 - pi_inf)


def binomial_loglik(k, n, p) -> float:
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.where(k > 0, k * np.log(p), 0.0) + np.where(n - k > 0, (n - k) * np.log1p(-p), 0.0)
    lc = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    return float(np.sum(lc + lp))


def serology_loglik(samples: SerologySamples, ever_infected, sens, spec) -> float:
    """Binomial log-likelihood of the serology samples.

    ``ever_infected[i]`` is the modelled ever-infected fraction of the eligible
    population on sample ``i``'s (shifted) date; ``sens``/``spec`` are indexed
    by assay.
    """
    sens = np.asarray(sens, dtype=float)[samples.assay]
    spec = np.asarray(spec, dtype=float)[samples.assay]
    p = positive_probability(ever_infected, sens, spec)
    return binomial_loglik(samples.n_positive, samples.n_tested, p)


# --------------------------------------------------------------------------
# prevalence melding

def thin_prevalence(est: PrevalenceEstimates, every_days: int = 14) -> np.ndarray:
    """Mask keeping one estimate per ``every_days`` for each (region, group).

    Anchored on the first available date of each stratum; afterwards the next
    estimate at least ``every_days`` after the last kept one is retained.
    """
    keep = np.zeros(len(est), dtype=bool)
    order = np.lexsort((est.day, est.group, est.region))
    last_key = None
    last_day = None
    for i in order:
        key = (est.region[i], est.group[i])
        if key != last_key:
            last_key, last_day = key, est.day[i]
            keep[i] = True
        elif est.day[i] >= last_day + every_days:
            last_day = est.day[i]
            keep[i] = True
    return keep


def modelled_log_prevalence(states, floor: float = 1e-6):
    """``log sum_d (I1 + I2 + R+)`` over doses, trailing shape ``(A, D, 9)`` -> ``(A,)``."""
    states = np.asarray(states, dtype=float)
    positive = (states[..., I1] + states[..., I2] + states[..., RP]).sum(axis=-1)
    return np.log(np.maximum(positive, floor))


def gaussian_logpdf(x, mean, sd):
    x = np.asarray(x, dtype=float)
    z = (x - mean) / sd
    return -np.log(sd) - LOG_SQRT_2PI - 0.5 * z * z


def melding_loglik(log_mean, log_sd, nu) -> float:
    """Gaussian log-density of the estimates around the modelled log-prevalence."""
    return float(np.sum(gaussian_logpdf(log_mean, nu, log_sd)))


def total_loglik(terms: dict[str, float], enabled: dict[str, bool] | None = None) -> float:
    """Sum of the enabled stream log-likelihoods."""
    if enabled is None:
        return float(sum(terms.values()))
    return float(sum(v for k, v in terms.items() if enabled.get(k, False)))
