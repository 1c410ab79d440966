"""Posterior post-processing: snapshots, attack rates, severity, R, counterfactuals and peaks.

Every product is computed per posterior draw by deterministic re-simulation
and summarised by the 5%, 50% and 95% quantiles.  The never-infected
population is the ``S`` compartment itself: recovered individuals return
to susceptibility only through ``Ws``, so ``S`` never receives previously
infected mass.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .core import E1, E2, I1, I2, RM, RP, S, W, WS
from .data import Dataset
from .model import Model, RegionRun
from .repro import reproduction_series
from .severity import dose_severity

log = logging.getLogger(__name__)

QUANTILES = (0.05, 0.5, 0.95)
SNAPSHOT_GROUPS = {
    "susceptible_never_infected": (S,),
    "susceptible_previously_infected": (WS,),
    "latent": (E1, E2),
    "infectious": (I1, I2),
    "infection_immunity": (RP, RM, W),
}
PRODUCT_COLUMNS = ["quantity", "region", "age", "dose", "date", "q05", "q50", "q95"]
R_COLUMNS = ["region", "date", "variant", "q05", "q50", "q95"]
LEVELS = ("full", "minus8", "none")


# ---------------------------------------------------------------- per-trajectory products

def snapshot(state) -> np.ndarray:
    """Population fractions by age, state group and dose.

    Parameters
    ----------
    state : ndarray, shape (A, D, 9)
        Occupancy of one region at one time.

    Returns
    -------
    ndarray, shape (A, G, D)
        Fractions over ``SNAPSHOT_GROUPS`` and dose; each age sums to one.
    """
    state = np.asarray(state, dtype=float)
    groups = np.stack([state[..., list(idx)].sum(axis=-1) for idx in SNAPSHOT_GROUPS.values()], axis=1)
    total = state.sum(axis=(1, 2))
    return groups / total[:, None, None]


@dataclass
class InfectionHistory:
    """Daily infection bookkeeping of one region, all ages combined unless stated."""

    cumulative: np.ndarray       # (days,) infections up to the end of each day, seeds included
    first: np.ndarray            # (days,) cumulative first infections
    attack: np.ndarray           # (days,) ever-infected fraction at the end of each day
    reinfection: np.ndarray      # (days,) share of the day's infections that are reinfections, NaN if none
    attack_by_age: np.ndarray    # (days, A)


def cumulative_and_attack(traj, populations) -> InfectionHistory:
    """Running infection totals, attack rate and reinfection share.

    Mass placed outside ``S`` by the initial seeding counts as infections on
    day 0, so cumulative first infections equal ``N - S`` at every day.
    """
    populations = np.asarray(populations, dtype=float)
    flows = traj.daily(traj.infections)                      # (days, A, D, 2)
    n_days = flows.shape[0]
    never = traj.day_states()[1: n_days + 1][..., S].sum(axis=2)  # (days, A)
    seeded = populations - traj.states[0][..., S].sum(axis=1)     # (A,)
    first_daily = flows[..., 0].sum(axis=(1, 2))
    re_daily = flows[..., 1].sum(axis=(1, 2))
    total_daily = first_daily + re_daily
    cumulative = seeded.sum() + np.cumsum(total_daily)
    first = seeded.sum() + np.cumsum(first_daily)
    with np.errstate(invalid="ignore", divide="ignore"):
        reinf = np.where(total_daily > 0, re_daily / np.where(total_daily > 0, total_daily, 1.0), np.nan)
    attack_by_age = 1.0 - never / populations
    attack = 1.0 - never.sum(axis=1) / populations.sum()
    return InfectionHistory(cumulative, first, attack, reinf, attack_by_age)


def severity_trajectories(run: RegionRun, traj=None):
    """Daily dose-specific and population severity ratios.

    Returns
    -------
    by_dose : ndarray, shape (days, A, D)
        Severity of an infection in each dose stratum (start-of-day value).
    population : ndarray, shape (days, A)
        Infection-weighted average over doses; NaN on days without infections.
    """
    traj = traj or run.traj
    p_dose = dose_severity(run.severity, run.alpha)          # (K, A, D)
    flows = traj.incidence()                                 # (K, A, D)
    spd = traj.steps_per_day
    days = flows.shape[0] // spd
    daily_flow = traj.daily(flows)
    weighted = traj.daily(p_dose * flows)
    with np.errstate(invalid="ignore", divide="ignore"):
        total = daily_flow.sum(axis=-1)
        pop = np.where(total > 0, weighted.sum(axis=-1) / np.where(total > 0, total, 1.0), np.nan)
    return p_dose[: days * spd: spd], pop


def peak_extract(incidence, reference_days, window_days: int = 14):
    """Peak timing and size near each reference date.

    Parameters
    ----------
    incidence : ndarray, shape (n, days)
        Daily incidence per sample.
    reference_days : sequence of int
        Reference peak days.
    window_days : int
        Half-width of the search window.

    Returns
    -------
    dict
        ``{"days": (n, W), "sizes": (n, W), "waves": [...], "notes": [...]}``
        for the ``W`` reference dates whose window meets the horizon.  Ties
        resolve to the earliest day.
    """
    x = np.atleast_2d(np.asarray(incidence, dtype=float))
    n_days = x.shape[1]
    days, sizes, waves, notes = [], [], [], []
    for ref in reference_days:
        lo, hi = int(ref) - window_days, int(ref) + window_days
        if hi < 0 or lo >= n_days:
            notes.append(f"reference day {ref}: window outside the horizon; skipped")
            continue
        lo, hi = max(lo, 0), min(hi, n_days - 1)
        seg = x[:, lo: hi + 1]
        k = np.argmax(seg, axis=1)     # first maximum
        days.append(lo + k)
        sizes.append(seg[np.arange(x.shape[0]), k])
        waves.append(int(ref))
    shape = (x.shape[0], len(waves))
    return {"days": np.array(days).T.reshape(shape), "sizes": np.array(sizes).T.reshape(shape),
            "waves": waves, "notes": notes}


def posterior_mode_day(days) -> int:
    """Most frequent value of an integer sample; ties go to the earliest."""
    days = np.asarray(days, dtype=int)
    values, counts = np.unique(days, return_counts=True)
    return int(values[np.argmax(counts)])


# ---------------------------------------------------------------- sample handling

def select_draws(samples: np.ndarray, max_samples: int) -> np.ndarray:
    """Evenly spaced subset of the pooled draws."""
    draws = samples.reshape(-1, samples.shape[-1])
    if len(draws) <= max_samples:
        return draws
    return draws[np.linspace(0, len(draws) - 1, max_samples).round().astype(int)]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def quantile_rows(quantity: str, values, dates, region="", age="", dose="") -> list[dict]:
    """Quantile rows of ``values`` shaped ``(samples, len(dates))``; NaNs are ignored."""
    values = np.asarray(values, dtype=float)
    rows = []
    for j, date in enumerate(dates):
        col = values[:, j]
        col = col[np.isfinite(col)]
        q = np.quantile(col, QUANTILES) if col.size else [np.nan] * 3
        rows.append({"quantity": quantity, "region": region, "age": age, "dose": dose, "date": date,
                     "q05": q[0], "q50": q[1], "q95": q[2]})
    return rows


def write_rows(path: Path, rows: list[dict], columns: list[str]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- nowcast products

@dataclass
class Products:
    """Tables of quantile rows keyed by product name."""

    tables: dict[str, list[dict]] = field(default_factory=dict)
    r_rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, rows in self.tables.items():
            paths.append(out / f"{name}.csv")
            write_rows(paths[-1], rows, PRODUCT_COLUMNS)
        if self.r_rows:
            paths.append(out / "r_decomposition.csv")
            write_rows(paths[-1], self.r_rows, R_COLUMNS)
        return paths


def nowcast(model: Model, draws: np.ndarray, threads: int = 1) -> Products:
    """Snapshot, cumulative, attack, reinfection, severity and R products.

    Parameters
    ----------
    model : Model
    draws : ndarray, shape (n, dim)
        Constrained parameter draws.
    threads : int
        Worker threads used across draws.
    """
    cfg = model.cfg
    R, A, D = model.n_regions, model.spec.n_ages, model.spec.n_doses
    days = cfg.horizon_days
    dates = [cfg.calendar().date(d).isoformat() for d in range(days)]
    snap_days = sorted({cfg.day(d) for d in cfg.analysis.snapshot_days} | {days - 1})
    every = cfg.analysis.r_every_days
    r_days = list(range(0, days, every))
    spd = model.spd

    def one(theta):
        out = []
        for r in range(R):
            run = model.simulate_region(theta, r)
            ri = model.regions[r]
            hist = cumulative_and_attack(run.traj, ri.populations)
            by_dose, pop_sev = severity_trajectories(run)
            rs = reproduction_series(run.traj.states, run.pi, run.beta, ri.cidx, run.ctilde, ri.populations,
                                     model.layout.get(theta, "d_I"), run.norm, every=every * spd)
            snaps = np.stack([snapshot(run.traj.states[d * spd]) for d in snap_days])
            out.append((hist, by_dose, pop_sev, rs, snaps, run.traj.daily(run.traj.incidence()).sum(axis=(1, 2))))
        return out

    per = _map(one, list(draws), threads)
    prod = Products()
    names = list(cfg.regions)
    ages = list(cfg.age_bands)
    t = prod.tables
    for key in ("snapshot", "cumulative", "attack", "reinfection", "ihr", "pihr"):
        t[key] = []
    for r in range(R):
        reg = names[r]
        H = [p[r][0] for p in per]
        t["cumulative"] += quantile_rows("infections_cumulative", [h.cumulative for h in H], dates, reg)
        t["cumulative"] += quantile_rows("infections_daily", [p[r][5] for p in per], dates, reg)
        t["attack"] += quantile_rows("attack_rate", [h.attack for h in H], dates, reg)
        for a in range(A):
            t["attack"] += quantile_rows("attack_rate", [h.attack_by_age[:, a] for h in H], dates, reg, ages[a])
        t["reinfection"] += quantile_rows("reinfection_fraction", [h.reinfection for h in H], dates, reg)
        for a in range(A):
            t["pihr"] += quantile_rows("pihr", [p[r][2][:, a] for p in per], dates, reg, ages[a])
            for q in range(D):
                t["ihr"] += quantile_rows("ihr", [p[r][1][:, a, q] for p in per], dates, reg, ages[a], q)
        for i, d in enumerate(snap_days):
            for g, gname in enumerate(SNAPSHOT_GROUPS):
                for a in range(A):
                    for q in range(D):
                        t["snapshot"] += quantile_rows(gname, [[p[r][4][i, a, g, q]] for p in per], [dates[d]],
                                                       reg, ages[a], q)
        for variant in ("effective", "control", "baseline"):
            vals = np.array([getattr(p[r][3], variant) for p in per])
            for row in quantile_rows(variant, vals, [dates[d] for d in r_days], reg):
                prod.r_rows.append({"region": reg, "date": row["date"], "variant": variant,
                                    "q05": row["q05"], "q50": row["q50"], "q95": row["q95"]})
        for a in range(A):
            vals = np.array([p[r][3].age_specific[:, a] for p in per])
            for row in quantile_rows("age", vals, [dates[d] for d in r_days], reg):
                prod.r_rows.append({"region": reg, "date": row["date"], "variant": f"age:{ages[a]}",
                                    "q05": row["q05"], "q50": row["q50"], "q95": row["q95"]})
    total = np.sum([[p[r][0].cumulative for r in range(R)] for p in per], axis=1)
    t["cumulative"] += quantile_rows("infections_cumulative", total, dates, "all")
    return prod


# ---------------------------------------------------------------- counterfactual

@dataclass
class Counterfactual:
    """Paired factual and no-vaccine-effect runs summarised over draws."""

    prevented_infections: np.ndarray    # (n, days) cumulative, all regions
    prevented_events: np.ndarray        # (n, days) cumulative, all regions
    factual_events: np.ndarray          # (n, days) daily
    counterfactual_events: np.ndarray   # (n, days) daily
    cutoff: int

    def rows(self, dates) -> list[dict]:
        n = self.cutoff + 1
        rows = quantile_rows("prevented_infections", self.prevented_infections[:, :n], dates[:n], "all")
        rows += quantile_rows("prevented_events", self.prevented_events[:, :n], dates[:n], "all")
        rows += quantile_rows("factual_events", self.factual_events[:, :n], dates[:n], "all")
        rows += quantile_rows("counterfactual_events", self.counterfactual_events[:, :n], dates[:n], "all")
        return rows


def counterfactual_no_vaccine(model: Model, draws: np.ndarray, cutoff: int | None = None,
                              threads: int = 1) -> Counterfactual:
    """Re-simulate every draw with all vaccine efficacies set to zero.

    Dose transitions still happen but change nothing.  Prevented quantities
    are counterfactual minus factual, accumulated from day 0 up to ``cutoff``.
    """
    days = model.cfg.horizon_days
    cutoff = days - 1 if cutoff is None else min(int(cutoff), days - 1)

    def one(theta):
        inf = np.zeros((2, days))
        ev = np.zeros((2, days))
        for r in range(model.n_regions):
            for j, zero in enumerate((False, True)):
                run = model.simulate_region(theta, r, zero_efficacy=zero)
                inf[j] += run.traj.daily(run.traj.incidence()).sum(axis=(1, 2))
                ev[j] += run.traj.daily(run.events).sum(axis=1)
        return inf, ev

    res = _map(one, list(draws), threads)
    inf = np.array([x[0] for x in res])
    ev = np.array([x[1] for x in res])
    mask = np.arange(days) <= cutoff
    return Counterfactual(np.cumsum((inf[:, 1] - inf[:, 0]) * mask, axis=1),
                          np.cumsum((ev[:, 1] - ev[:, 0]) * mask, axis=1),
                          ev[:, 0], ev[:, 1], cutoff)


# ---------------------------------------------------------------- predictive checks

def predictive_coverage(model: Model, draws: np.ndarray, seed: int = 0, level: float = 0.95) -> dict[str, float]:
    """Share of included observations inside their posterior-predictive interval."""
    rng = np.random.default_rng(seed)
    L = model.layout
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    sims: dict[str, list] = {}
    observed: dict[str, np.ndarray] = {}
    for theta in draws:
        per: dict[str, list] = {}
        for r in range(model.n_regions):
            ri = model.regions[r]
            run = model.simulate_region(theta, r)
            if model.streams["counts"] and ri.count_day.size:
                mu = model.daily_events(run)[ri.count_day, ri.count_group]
                eta = L.get(theta, "eta")
                per.setdefault("counts", []).append(rng.negative_binomial(eta, eta / (eta + np.maximum(mu, 1e-12))))
                observed.setdefault(f"counts{r}", ri.count_value)
            if model.streams["serology"] and ri.sero_day.size:
                states = run.traj.states
                sus = (states[ri.sero_day * model.spd, :, :, S] @ np.ones(model.spec.n_doses)) @ model.eligible
                ever = 1.0 - sus / ri.populations[model.eligible].sum()
                sens = np.array([L.get(theta, f"sens[{a}]") for a in model.assays])[ri.sero_assay]
                spec = np.array([L.get(theta, f"spec[{a}]") for a in model.assays])[ri.sero_assay]
                p = sens * ever + (1 - spec) * (1 - ever)
                per.setdefault("serology", []).append(rng.binomial(ri.sero_n.astype(np.int64), np.clip(p, 0, 1)))
                observed.setdefault(f"serology{r}", ri.sero_k)
            if model.streams["prevalence"] and ri.prev_day.size:
                x = run.traj.states[ri.prev_day * model.spd]
                pos = (x[..., I1] + x[..., I2] + x[..., RP]).sum(axis=2)
                nu = np.log(np.maximum(np.einsum("na,na->n", pos, model.prev_agg[ri.prev_group]),
                                       model.cfg.prevalence.floor))
                per.setdefault("prevalence", []).append(nu + rng.normal(0.0, ri.prev_sd))
                observed.setdefault(f"prevalence{r}", ri.prev_mean)
        for k, v in per.items():
            sims.setdefault(k, []).append(np.concatenate(v))
    out = {}
    for k, v in sims.items():
        y = np.concatenate([observed[f"{k}{r}"] for r in range(model.n_regions) if f"{k}{r}" in observed])
        lo, hi = np.quantile(np.array(v), [lo_q, hi_q], axis=0)
        out[k] = float(np.mean((y >= lo) & (y <= hi)))
    return out


# ---------------------------------------------------------------- sensitivity harness

def level_config(cfg: RunConfig, level: str) -> RunConfig:
    """Configuration of one prevalence level: all, last 56 days dropped, or none."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")
    new = cfg.model_copy(deep=True)
    new._base_dir = cfg._base_dir
    if level == "minus8":
        new.prevalence = new.prevalence.model_copy(update={"truncate_days": 56})
    elif level == "none":
        new.streams = new.streams.model_copy(update={"prevalence": False})
    return new


def national_incidence(model: Model, draws: np.ndarray, threads: int = 1) -> np.ndarray:
    """Daily infections summed over regions, ``(n, days)``."""
    def one(theta):
        return sum(run.traj.daily(run.traj.incidence()).sum(axis=(1, 2))
                   for run in (model.simulate_region(theta, r) for r in range(model.n_regions)))
    return np.array(_map(one, list(draws), threads))


@dataclass
class SensitivityReport:
    fits: dict                     # level -> FitResult
    peaks: dict                    # level -> peak_extract output
    mode_days: dict                # level -> posterior-mode peak day of the whole-horizon maximum
    reference: list[int]
    notes: list[str] = field(default_factory=list)

    def rows(self, calendar) -> list[dict]:
        rows = []
        for level, pk in self.peaks.items():
            for w, ref in enumerate(pk["waves"]):
                d = pk["days"][:, w]
                s = pk["sizes"][:, w]
                qd = np.quantile(d, QUANTILES)
                qs = np.quantile(s, QUANTILES)
                rows.append({"level": level, "reference": calendar.date(ref).isoformat(),
                             "peak_day_q05": calendar.date(int(round(qd[0]))).isoformat(),
                             "peak_day_q50": calendar.date(int(round(qd[1]))).isoformat(),
                             "peak_day_q95": calendar.date(int(round(qd[2]))).isoformat(),
                             "peak_day_mode": calendar.date(self.mode_days[level]).isoformat(),
                             "peak_size_q05": qs[0], "peak_size_q50": qs[1], "peak_size_q95": qs[2]})
        return rows


def sensitivity_harness(cfg: RunConfig, ds: Dataset, seed: int = 0, threads: int = 1,
                        reference_days=None, levels=LEVELS, out_dir=None) -> SensitivityReport:
    """Fit each prevalence level and compare incidence peaks.

    Reference peaks default to the posterior-mode peak day of the "full" fit.
    """
    from .pipeline import fit

    if ds.observations.prevalence is None or len(ds.observations.prevalence) == 0:
        raise ValueError("the sensitivity harness needs a prevalence stream")
    fits, inc, mode = {}, {}, {}
    for level in levels:
        lcfg = level_config(cfg, level)
        sub = None if out_dir is None else Path(out_dir) / level
        fits[level] = fit(lcfg, ds, seed=seed, threads=threads, out_dir=sub)
        draws = select_draws(fits[level].samples, cfg.analysis.max_samples)
        inc[level] = national_incidence(fits[level].model, draws, threads)
        mode[level] = posterior_mode_day(np.argmax(inc[level], axis=1))
    if reference_days is None:
        reference_days = [mode[levels[0]]]
    peaks = {lv: peak_extract(inc[lv], reference_days, cfg.analysis.peak_window_days) for lv in levels}
    notes = sorted({n for pk in peaks.values() for n in pk["notes"]})
    return SensitivityReport(fits, peaks, mode, list(reference_days), notes)
