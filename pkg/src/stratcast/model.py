"""Assembled model: configuration + data -> per-region simulation and likelihood.

Everything that does not depend on the parameters (contact indices,
vaccination rates, efficacies, observation indices) is precomputed once per
region so that a likelihood evaluation costs one simulation plus a few
vectorised reductions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from . import observation as obs
from .config import RunConfig
from .core import RP, I1, I2, S, StratumSpec, age_group_matrix
from .data import Dataset
from .dynamics import (ConfigurationError, EfficacyTable, Rates, Trajectory, efficacy_by_step, initial_state,
                       simulate, vaccination_by_step, waning_by_step)
from .parameters import ParameterLayout, build_layout
from .priors import PriorSet, global_log_prior, region_log_prior
from .repro import Normaliser, contact_tilde, effective_susceptibles, normaliser, r0_from_growth
from .severity import DelayDistribution, SeveritySchedule, discounted_infections, expected_events

log = logging.getLogger(__name__)


@dataclass
class RegionInputs:
    """Parameter-free inputs of one region."""

    populations: np.ndarray   # (A,)
    contacts: np.ndarray      # (B, A, A) raw contact rates
    cidx: np.ndarray          # (K,)
    vacc: np.ndarray          # (K, A, D)
    pi: np.ndarray            # (K, A, D)
    alpha: np.ndarray         # (K, A, D)
    # observations restricted to this region and the horizon
    count_day: np.ndarray
    count_group: np.ndarray
    count_value: np.ndarray
    sero_day: np.ndarray
    sero_assay: np.ndarray
    sero_n: np.ndarray
    sero_k: np.ndarray
    prev_day: np.ndarray
    prev_group: np.ndarray
    prev_mean: np.ndarray
    prev_sd: np.ndarray


@dataclass
class RegionRun:
    """One region's simulated trajectory with the derived quantities the likelihood needs."""

    traj: Trajectory
    beta: np.ndarray        # (K,)
    hazard: np.ndarray      # (B, A, A) normalised contact hazard
    ctilde: np.ndarray      # (B, A, A) m_a C_ab / N_b
    norm: Normaliser
    severity: np.ndarray    # (K, A) unvaccinated severity ratio
    events: np.ndarray      # (K, A) expected severe events per step
    pi: np.ndarray
    alpha: np.ndarray


class Model:
    """Simulation and log-density of the full stratified model."""

    def __init__(self, cfg: RunConfig, ds: Dataset):
        self.cfg = cfg
        self.ds = ds
        A = len(cfg.age_bands)
        R = len(cfg.regions)
        self.spec = StratumSpec(R, A, cfg.max_dose, cfg.dt, cfg.horizon_days)
        self.K = self.spec.n_steps
        self.spd = self.spec.steps_per_day
        self.priors: PriorSet = cfg.priors.build()
        self.modifier_map = cfg.modifier_map

        # beta walk: weekly changepoints; value 0 (log beta = 0) before the first
        self.beta_change_days = np.asarray(cfg.beta_change_days(), dtype=np.int64)
        step_days = np.arange(self.K) // self.spd
        self.beta_index = np.searchsorted(self.beta_change_days, step_days, side="right").astype(np.int64)

        # severity
        sev = cfg.severity
        self.severity_schedule = SeveritySchedule(np.array([cfg.day(d) for d in sev.changepoints], dtype=float),
                                                  sev.window_days)
        self.ramp = self.severity_schedule.ramp_matrix(np.arange(self.K) * cfg.dt)  # (K, S)
        if sev.delay.mean_days is not None:
            self.delay = DelayDistribution.gamma(sev.delay.mean_days, sev.delay.sd_days, cfg.dt)
        else:
            self.delay = DelayDistribution.from_table(sev.delay.lag_days, sev.delay.mass, cfg.dt)
        self.count_groups, self.count_agg = age_group_matrix(cfg.severity_groups(), cfg.age_bands)
        self.prev_groups, self.prev_agg = age_group_matrix(cfg.prevalence_groups(), cfg.age_bands, cover=False)
        elig = set(cfg.eligible_bands())
        self.eligible = np.array([b in elig for b in cfg.age_bands])

        # efficacy eras and waning
        eras = sorted(cfg.efficacy, key=lambda e: cfg.day(e.start))
        if eras:
            far = np.iinfo(np.int64).max
            self.efficacy = EfficacyTable(
                np.array([cfg.day(e.start) for e in eras]),
                np.array([cfg.day(e.end) if e.end is not None else far for e in eras]),
                *(np.array([getattr(e, n) for e in eras], dtype=float).reshape(len(eras), cfg.max_dose)
                  for n in ("pi_mrna", "pi_az", "alpha_mrna", "alpha_az")))
        else:
            self.efficacy = EfficacyTable.zero(cfg.max_dose)
        self.wane = waning_by_step([(cfg.day(w.start), w.mean_days) for w in cfg.waning], self.spec)

        # observation streams present in the data and switched on in this configuration
        o = ds.observations
        toggles = cfg.streams.model_dump()
        self.streams = {name: o.active(name) and bool(toggles.get(name, True)) for name in obs.STREAMS}
        self.assays = sorted({obs.ASSAYS[i] for i in np.unique(o.serology.assay)}, key=obs.ASSAYS.index) \
            if self.streams["serology"] else []
        self.assay_slots = {obs.ASSAYS.index(a): j for j, a in enumerate(self.assays)}
        prev_keep = self._prevalence_mask()

        feeds = ds.feeds(cfg)
        self.regions: list[RegionInputs] = []
        for r in range(R):
            pops = ds.populations[r]
            pi, alpha = efficacy_by_step(feeds[r], self.efficacy, self.spec)
            self.regions.append(RegionInputs(
                populations=pops,
                contacts=np.ascontiguousarray(ds.contacts.matrices[r], dtype=float),
                cidx=ds.contacts.step_index(r, self.spec),
                vacc=vaccination_by_step(feeds[r], pops, self.spec),
                pi=pi, alpha=alpha,
                **self._region_observations(r, prev_keep)))

        self.layout: ParameterLayout = build_layout(
            R, cfg.age_bands, cfg.n_modifiers, len(self.beta_change_days),
            len(self.severity_schedule.changepoints), self.assays, cfg.fixed)
        unknown = [k for k in cfg.fixed if k not in self.layout.slices]
        if unknown:
            raise ConfigurationError(f"fixed parameters not in the model: {unknown}")
        self.d_L = cfg.latent_period
        self._walks = self._shifted_walks()

    # ------------------------------------------------------------ observations
    def _prevalence_mask(self):
        p = self.ds.observations.prevalence
        if p is None or len(p) == 0:
            return None
        keep = (p.day >= 0) & (p.day < self.cfg.horizon_days)
        trunc = self.cfg.prevalence.truncate_days
        if trunc and keep.any():
            last = p.day[keep].max()
            keep &= p.day <= last - trunc
        thinned = np.zeros(len(p), dtype=bool)
        if keep.any():
            thinned[np.flatnonzero(keep)] = obs.thin_prevalence(p.subset(keep), self.cfg.prevalence.thin_days)
        return thinned

    def _region_observations(self, r, prev_keep) -> dict:
        o = self.ds.observations
        H = self.cfg.horizon_days
        out = {}
        c = o.counts
        if c is not None and len(c):
            m = (c.region == r) & (c.day >= 0) & (c.day < H)
            out.update(count_day=c.day[m], count_group=c.group[m], count_value=c.count[m])
        else:
            out.update(count_day=np.zeros(0, int), count_group=np.zeros(0, int), count_value=np.zeros(0))
        s = o.serology
        if s is not None and len(s):
            m = (s.region == r) & (s.day >= 0) & (s.day <= H)
            out.update(sero_day=s.day[m], sero_assay=np.array([self.assay_slots.get(int(i), 0) for i in s.assay[m]],
                                                              dtype=np.int64),
                       sero_n=s.n_tested[m], sero_k=s.n_positive[m])
        else:
            z = np.zeros(0, int)
            out.update(sero_day=z, sero_assay=z, sero_n=np.zeros(0), sero_k=np.zeros(0))
        p = o.prevalence
        if p is not None and len(p):
            m = (p.region == r) & prev_keep
            out.update(prev_day=p.day[m], prev_group=p.group[m], prev_mean=p.log_mean[m], prev_sd=p.log_sd[m])
        else:
            z = np.zeros(0, int)
            out.update(prev_day=z, prev_group=z, prev_mean=np.zeros(0), prev_sd=np.zeros(0))
        return out

    # ------------------------------------------------------------ parameters
    @property
    def n_regions(self) -> int:
        return self.spec.n_regions

    def default_theta(self) -> np.ndarray:
        """A central starting point on the constrained scale."""
        L = self.layout
        th = np.zeros(L.size)
        pr = self.priors
        L.set(th, "d_I", pr.d_I.mean)
        L.set(th, "d_R", pr.d_R.mean)
        L.set(th, "eta", pr.eta.mean)
        L.set(th, "sigma_beta", max(pr.sigma_beta.mean, 1e-3))
        for a in self.assays:
            L.set(th, f"sens[{a}]", pr.assays[a]["sens"].mean)
            L.set(th, f"spec[{a}]", pr.assays[a]["spec"].mean)
        L.set(th, "p0", np.broadcast_to(np.asarray(pr.p0_mean, dtype=float), (self.spec.n_ages,)))
        for r in range(self.n_regions):
            L.set(th, f"psi[{r}]", pr.psi.mean)
            L.set(th, f"I0[{r}]", math.sqrt(pr.I0_range[0] * pr.I0_range[1]))
            L.set(th, f"m[{r}]", np.full(self.cfg.n_modifiers, math.exp(pr.m_log_mean)))
        return L.apply_fixed(th)

    # ------------------------------------------------------------ sampling coordinates
    def _shifted_walks(self) -> list[tuple[int, slice]]:
        if self.cfg.mcmc.walk_coordinates != "log_baseline_r":
            return []
        L = self.layout
        out = []
        for r in range(self.n_regions):
            sl = L.slices.get(f"log_beta[{r}]")
            if sl is not None and L.free[sl].all():
                out.append((r, sl))
        return out

    def walk_offset(self, theta, r: int) -> float:
        """``log R0`` implied by region ``r``'s initial growth rate and ``d_I``."""
        L = self.layout
        try:
            return math.log(r0_from_growth(float(L.get(theta, f"psi[{r}]")), self.d_L,
                                           float(L.get(theta, "d_I")), self.cfg.dt))
        except (ValueError, OverflowError, ZeroDivisionError):
            return math.nan

    def to_theta(self, z) -> np.ndarray:
        """Constrained parameters from sampling coordinates.

        With ``walk_coordinates = log_baseline_r`` the walk entries of ``z``
        hold ``log beta + log R0``, the log reproduction number at full
        susceptibility and initial contacts.  The shift has unit Jacobian.
        """
        theta = self.layout.to_constrained(z)
        for r, sl in self._walks:
            theta[sl] -= self.walk_offset(theta, r)
        return theta

    def to_z(self, theta) -> np.ndarray:
        """Inverse of :meth:`to_theta`."""
        z = self.layout.to_unconstrained(theta)
        for r, sl in self._walks:
            z[sl] += self.walk_offset(theta, r)
        return z

    # ------------------------------------------------------------ simulation
    def region_beta(self, theta, r) -> np.ndarray:
        L = self.layout
        name = f"log_beta[{r}]"
        walk = np.concatenate([[0.0], L.get(theta, name)]) if name in L.slices else np.zeros(1)
        return np.exp(walk[self.beta_index])

    def simulate_region(self, theta, r: int, zero_efficacy: bool = False) -> RegionRun:
        """Forward run of region ``r`` at constrained parameters ``theta``."""
        L = self.layout
        ri = self.regions[r]
        dt = self.cfg.dt
        d_I = L.get(theta, "d_I")
        d_R = L.get(theta, "d_R")
        psi = L.get(theta, f"psi[{r}]")
        I0 = L.get(theta, f"I0[{r}]")
        m = L.get(theta, f"m[{r}]")[self.modifier_map]
        rates = Rates.from_durations(self.d_L, d_I, d_R, dt)
        pi, alpha = (np.zeros_like(ri.pi), np.zeros_like(ri.alpha)) if zero_efficacy else (ri.pi, ri.alpha)
        beta = self.region_beta(theta, r)
        ctilde = contact_tilde(ri.contacts, m, ri.populations)
        x0 = initial_state(ri.populations, I0, psi, rates, dt, self.spec.n_doses)
        norm = normaliser(psi, self.d_L, d_I, dt, beta[0], effective_susceptibles(x0, pi[0]),
                          ctilde[ri.cidx[0]])
        hazard = norm.factor * ctilde
        traj = simulate(x0, beta, ri.cidx, hazard, pi, ri.vacc, self.wane, rates, dt)
        p = self.severity_ratio(theta)
        delta_star = discounted_infections(traj.incidence(), alpha)
        events = expected_events(delta_star, p, self.delay)
        return RegionRun(traj, beta, hazard, ctilde, norm, p, events, pi, alpha)

    def severity_ratio(self, theta) -> np.ndarray:
        """Unvaccinated severity per step and age, ``(K, A)``."""
        L = self.layout
        lp = logit(L.get(theta, "p0"))
        if "zeta" in L.slices:
            return expit(lp[None, :] + self.ramp @ L.get(theta, "zeta").T)
        return np.broadcast_to(expit(lp), (self.K, lp.size))

    # ------------------------------------------------------------ likelihood
    def daily_events(self, run: RegionRun) -> np.ndarray:
        """Expected severe events per day and observation group, ``(days, G)``."""
        return run.traj.daily(run.events) @ self.count_agg.T

    def region_loglik_terms(self, theta, r: int, run: RegionRun | None = None) -> dict[str, float]:
        if run is None:
            run = self.simulate_region(theta, r)
        L = self.layout
        ri = self.regions[r]
        out = {}
        if self.streams["counts"]:
            mu = self.daily_events(run)[ri.count_day, ri.count_group]
            out["counts"] = obs.nb_loglik(ri.count_value, mu, L.get(theta, "eta"))
        states = run.traj.states
        if self.streams["serology"] and ri.sero_day.size:
            sus = (states[ri.sero_day * self.spd, :, :, S] @ np.ones(self.spec.n_doses)) @ self.eligible
            ever = 1.0 - sus / ri.populations[self.eligible].sum()
            sens = np.array([L.get(theta, f"sens[{a}]") for a in self.assays])
            spec = np.array([L.get(theta, f"spec[{a}]") for a in self.assays])
            p = obs.positive_probability(ever, sens[ri.sero_assay], spec[ri.sero_assay])
            out["serology"] = obs.binomial_loglik(ri.sero_k, ri.sero_n, p)
        if self.streams["prevalence"] and ri.prev_day.size:
            x = states[ri.prev_day * self.spd]
            positive = (x[..., I1] + x[..., I2] + x[..., RP]).sum(axis=2)  # (n, A)
            grouped = np.einsum("na,na->n", positive, self.prev_agg[ri.prev_group])
            nu = np.log(np.maximum(grouped, self.cfg.prevalence.floor))
            out["prevalence"] = obs.melding_loglik(ri.prev_mean, ri.prev_sd, nu)
        return out

    def region_loglik(self, theta, r: int) -> float:
        try:
            terms = self.region_loglik_terms(theta, r)
        except (ConfigurationError, FloatingPointError, ValueError) as exc:
            log.debug("region %d: simulation failed (%s); treated as zero likelihood", r, exc)
            return -math.inf
        total = sum(terms.values())
        return total if np.isfinite(total) else -math.inf

    def loglik(self, theta) -> float:
        return float(sum(self.region_loglik(theta, r) for r in range(self.n_regions)))

    # ------------------------------------------------------------ priors
    def global_log_prior(self, theta) -> float:
        return global_log_prior(theta, self.layout, self.priors, self.assays)

    def region_log_prior(self, theta, r) -> float:
        return region_log_prior(theta, self.layout, self.priors, r)

    def log_posterior(self, theta) -> float:
        lp = self.global_log_prior(theta)
        for r in range(self.n_regions):
            if lp == -math.inf:
                return lp
            lp += self.region_log_prior(theta, r)
        if lp == -math.inf:
            return lp
        return lp + self.loglik(theta)


class ModelTarget:
    """Block-structured log-density on the unconstrained scale for the sampler.

    ``parts[0]`` holds the global prior and the global Jacobian; ``parts[1 + r]``
    holds region ``r``'s prior (including its random-walk term), likelihood
    and Jacobian.  A global update touches every part; a regional update only
    its own.
    """

    def __init__(self, model: Model):
        self.model = model
        self.layout = model.layout
        self.blocks = self.layout.block_indices()
        self.block_names = self.layout.block_names()
        self.dim = self.layout.size

    def _global(self, z, theta) -> float:
        lp = self.model.global_log_prior(theta)
        return lp + self.layout.log_jacobian(z, self.blocks[0]) if np.isfinite(lp) else -math.inf

    def _region(self, z, theta, r) -> float:
        lp = self.model.region_log_prior(theta, r)
        if not np.isfinite(lp):
            return -math.inf
        ll = self.model.region_loglik(theta, r)
        if ll == -math.inf:
            return ll
        return lp + ll + self.layout.log_jacobian(z, self.blocks[1 + r])

    def init(self, z) -> np.ndarray:
        theta = self.model.to_theta(z)
        parts = np.empty(len(self.blocks))
        parts[0] = self._global(z, theta)
        for r in range(self.model.n_regions):
            parts[1 + r] = self._region(z, theta, r)
        return parts

    def update(self, z, block: int, parts: np.ndarray) -> np.ndarray:
        if block == 0:
            return self.init(z)
        theta = self.model.to_theta(z)
        out = parts.copy()
        out[block] = self._region(z, theta, block - 1)
        return out

    def part(self, z, block: int) -> float:
        """One entry of :meth:`init` computed on its own."""
        theta = self.model.to_theta(z)
        return self._global(z, theta) if block == 0 else self._region(z, theta, block - 1)

    def log_density(self, z) -> float:
        return float(np.sum(self.init(z)))
