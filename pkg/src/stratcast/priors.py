"""Prior densities on the constrained parameter scale.

Gamma distributions are shape-rate throughout (mean = shape / rate).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .parameters import ParameterLayout

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GammaPrior:
    shape: float
    rate: float
    offset: float = 0.0

    def logpdf(self, x: float) -> float:
        y = x - self.offset
        if not y > 0:
            return -math.inf
        a, b = self.shape, self.rate
        return a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(y) - b * y

    @property
    def mean(self) -> float:
        return self.offset + self.shape / self.rate


@dataclass
class BetaPrior:
    a: float
    b: float

    def logpdf(self, x: float) -> float:
        if not 0.0 < x < 1.0:
            return -math.inf
        a, b = self.a, self.b
        return ((a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x)
                - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)))

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


def default_assays() -> dict[str, dict[str, BetaPrior]]:
    return {
        "EuroImmun": {"sens": BetaPrior(52.9, 17.9), "spec": BetaPrior(314.0, 3.18)},
        "Roche-N": {"sens": BetaPrior(457.0, 13.2), "spec": BetaPrior(672.0, 1.35)},
    }


@dataclass
class PriorSet:
    """Hyperparameters of every prior; defaults follow the published model."""

    d_I: GammaPrior = field(default_factory=lambda: GammaPrior(1.43, 0.549, offset=2.0))
    d_R: GammaPrior = field(default_factory=lambda: GammaPrior(32.2, 2.6, offset=1.0))
    psi: GammaPrior = field(default_factory=lambda: GammaPrior(31.36, 224.0))
    eta: GammaPrior = field(default_factory=lambda: GammaPrior(1.0, 0.2))
    sigma_beta: GammaPrior = field(default_factory=lambda: GammaPrior(1.0, 100.0))
    assays: dict[str, dict[str, BetaPrior]] = field(default_factory=default_assays)
    m_log_mean: float = 0.0
    m_log_sd: float = 0.5
    zeta_sd: float = 10.0
    I0_range: tuple[float, float] = (1.0, 1e6)
    p0_mean: np.ndarray | float = 0.02
    p0_logit_sd: float = 1.0


def normal_logpdf(x, mean, sd):
    x = np.asarray(x, dtype=float)
    z = (x - mean) / sd
    return np.sum(-0.5 * z * z - math.log(sd) - LOG_SQRT_2PI)


def lognormal_logpdf(x, log_mean, log_sd) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        return -math.inf
    lx = np.log(x)
    return float(normal_logpdf(lx, log_mean, log_sd) - np.sum(lx))


def log_uniform_logpdf(x, lo, hi) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(~((x >= lo) & (x <= hi))):
        return -math.inf
    return float(-np.sum(np.log(x)) - x.size * math.log(math.log(hi / lo)))


def logit_normal_logpdf(p, logit_mean, logit_sd) -> float:
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        return -math.inf
    z = np.log(p) - np.log1p(-p)
    return float(normal_logpdf(z, logit_mean, logit_sd) - np.sum(np.log(p) + np.log1p(-p)))


def random_walk_logpdf(log_beta, sigma_beta: float, start: float = 0.0) -> float:
    """Gaussian increments of a log random walk starting from ``start``."""
    if not sigma_beta > 0:
        return -math.inf
    steps = np.diff(np.concatenate([[start], np.asarray(log_beta, dtype=float)]))
    return float(normal_logpdf(steps, 0.0, sigma_beta))


def global_log_prior(theta, layout: ParameterLayout, priors: PriorSet, assays) -> float:
    """Density of the global block (random-walk terms excluded)."""
    get = layout.get
    out = (priors.d_I.logpdf(get(theta, "d_I")) + priors.d_R.logpdf(get(theta, "d_R"))
           + priors.eta.logpdf(get(theta, "eta")) + priors.sigma_beta.logpdf(get(theta, "sigma_beta")))
    if out == -math.inf:
        return out
    for assay in assays:
        pr = priors.assays[assay]
        out += pr["sens"].logpdf(get(theta, f"sens[{assay}]"))
        out += pr["spec"].logpdf(get(theta, f"spec[{assay}]"))
    p0 = get(theta, "p0")
    mean = np.broadcast_to(np.asarray(priors.p0_mean, dtype=float), p0.shape)
    out += logit_normal_logpdf(p0, np.log(mean) - np.log1p(-mean), priors.p0_logit_sd)
    if "zeta" in layout.slices:
        out += float(normal_logpdf(get(theta, "zeta"), 0.0, priors.zeta_sd))
    return float(out)


def region_log_prior(theta, layout: ParameterLayout, priors: PriorSet, r: int) -> float:
    """Density of region ``r``'s block including its random-walk term."""
    get = layout.get
    out = priors.psi.logpdf(get(theta, f"psi[{r}]"))
    out += log_uniform_logpdf(get(theta, f"I0[{r}]"), *priors.I0_range)
    out += lognormal_logpdf(get(theta, f"m[{r}]"), priors.m_log_mean, priors.m_log_sd)
    if f"log_beta[{r}]" in layout.slices:
        out += random_walk_logpdf(get(theta, f"log_beta[{r}]"), get(theta, "sigma_beta"))
    return float(out)


def log_prior(theta, layout: ParameterLayout, priors: PriorSet, assays=()) -> float:
    """Joint prior density on the constrained scale; ``-inf`` outside the support."""
    out = global_log_prior(theta, layout, priors, assays)
    for r in range(layout.n_regions):
        if out == -math.inf:
            break
        out += region_log_prior(theta, layout, priors, r)
    return float(out)
