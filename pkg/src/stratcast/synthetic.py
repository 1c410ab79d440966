"""Desk-scale synthetic datasets simulated from known parameters.

Two regions, three age bands, two vaccine doses and a 200-day horizon by
default, with admissions, Roche-N serology and daily prevalence estimates.
"""
from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig
from .core import ContactSchedule, I1, I2, RP, S
from .data import Dataset, VaccinationRecords, export
from .observation import ASSAYS, CountSeries, ObservationSet, PrevalenceEstimates, SerologySamples

AGE_BANDS = ["0-14", "15-64", "65+"]
REGIONS = ["North", "South"]
BASE_CONTACTS = np.array([[7.0, 5.0, 1.0],
                          [3.0, 10.0, 2.0],
                          [1.0, 3.5, 3.0]])


@dataclass
class Scenario:
    """Knobs of a synthetic dataset."""

    seed: int = 0
    horizon_days: int = 200
    start_date: _dt.date = _dt.date(2020, 3, 1)
    populations: tuple = ((1.2e6, 4.0e6, 1.0e6), (0.8e6, 2.6e6, 0.7e6))
    contact_breaks: tuple = ((0, 1.0), (45, 0.5), (100, 0.85))
    vaccination_start: int = 120
    d_I: float = 4.0
    d_R: float = 12.0
    eta: float = 10.0
    sigma_beta: float = 0.025
    psi: tuple = (0.12, 0.11)
    I0: tuple = (100.0, 80.0)
    m_log_sd: float = 0.15
    p0: tuple = (0.002, 0.012, 0.08)
    beta_start: int = 21
    beta_drop: dict | None = None       # {"day": int, "log_change": float, "weeks": int}
    counts_until: int | None = None     # last day of admissions/serology data
    serology_n: int = 1000
    serology_every: int = 7
    serology_from: int = 20
    prevalence_from: int = 20
    prevalence_sd: float = 0.1
    mcmc: dict = field(default_factory=dict)


def scenario_config(sc: Scenario) -> dict:
    """YAML-ready configuration matching a scenario."""
    cfg = {
        "start_date": sc.start_date.isoformat(),
        "horizon_days": sc.horizon_days,
        "dt": 0.5,
        "max_dose": 2,
        "regions": list(REGIONS),
        "age_bands": list(AGE_BANDS),
        "latent_period": 2.0,
        "data_dir": "data",
        "waning": [{"start": 0, "mean_days": 534.0}],
        "efficacy": [{"start": 0, "pi_mrna": [0.6, 0.85], "pi_az": [0.5, 0.7],
                      "alpha_mrna": [0.5, 0.6], "alpha_az": [0.4, 0.5]}],
        "beta_walk": {"start": sc.beta_start, "interval_days": 7},
        "severity": {"kind": "admissions", "delay": {"mean_days": 10.0, "sd_days": 5.0},
                     "age_groups": {"0-64": ["0-14", "15-64"], "65+": ["65+"]}},
        "serology": {"eligible_bands": ["15-64"]},
        "priors": {"p0_mean": [0.005, 0.01, 0.05], "I0_range": [1.0, 1.0e5]},
        "mcmc": {"iterations": 30000, "burn_in": 10000, "thin": 20, "curvature": "throughout", "joint_every": 1,
                 "walk_coordinates": "log_baseline_r", **sc.mcmc},
    }
    return cfg


def truth_dict(sc: Scenario, n_beta: int, rng: np.random.Generator) -> dict:
    """True parameter values keyed by layout entry name."""
    truth = {"d_I": sc.d_I, "d_R": sc.d_R, "eta": sc.eta, "sigma_beta": sc.sigma_beta,
             "sens[Roche-N]": 457.0 / (457.0 + 13.2), "spec[Roche-N]": 672.0 / (672.0 + 1.35),
             "p0": list(sc.p0)}
    for r in range(len(REGIONS)):
        truth[f"psi[{r}]"] = sc.psi[r]
        truth[f"I0[{r}]"] = sc.I0[r]
        truth[f"m[{r}]"] = list(np.exp(rng.normal(0.0, sc.m_log_sd, len(AGE_BANDS))))
        steps = rng.normal(0.0, sc.sigma_beta, n_beta)
        if sc.beta_drop:
            first = (sc.beta_drop["day"] - sc.beta_start) // 7
            for w in range(sc.beta_drop.get("weeks", 1)):
                if 0 <= first + w < n_beta:
                    steps[first + w] += sc.beta_drop["log_change"] / sc.beta_drop.get("weeks", 1)
        truth[f"log_beta[{r}]"] = list(np.cumsum(steps))
    return truth


def theta_from_dict(layout, values: dict) -> np.ndarray:
    theta = np.zeros(layout.size)
    for name in layout.slices:
        if name not in values:
            raise KeyError(f"no value for {name}")
        layout.set(theta, name, values[name])
    return layout.apply_fixed(theta)


def _vaccinations(sc: Scenario, rng) -> VaccinationRecords:
    """Age-prioritised roll-out: 65+ first, then 15-64; second doses 28 days later."""
    rows = []
    H = sc.horizon_days
    for r, pops in enumerate(sc.populations):
        for a, start, rate in ((2, sc.vaccination_start, 0.012), (1, sc.vaccination_start + 21, 0.006)):
            given = 0.0
            for d in range(start, H):
                n = min(rate * pops[a], 0.85 * pops[a] - given)
                if n <= 0:
                    break
                n = float(np.floor(n * rng.uniform(0.9, 1.1)))
                given += n
                mrna = float(np.floor(0.6 * n))
                rows.append((d, r, a, 1, 0, mrna))
                rows.append((d, r, a, 1, 1, n - mrna))
                if d + 28 < H:
                    rows.append((d + 28, r, a, 2, 0, mrna))
                    rows.append((d + 28, r, a, 2, 1, n - mrna))
    if not rows:
        return VaccinationRecords.empty()
    rows.sort(key=lambda t: (t[0], t[1], t[2], t[3], t[4]))
    cols = list(zip(*rows))
    return VaccinationRecords(*(np.array(c, dtype=np.int64) for c in cols[:5]), np.array(cols[5], dtype=float))


def build(sc: Scenario):
    """Simulate a scenario; returns ``(cfg, dataset, truth)`` without touching disk."""
    from .model import Model

    rng = np.random.default_rng(sc.seed)
    cfg = RunConfig.model_validate(scenario_config(sc))
    pops = np.array(sc.populations, dtype=float)
    R, A = pops.shape
    breaks = np.array([b for b, _ in sc.contact_breaks])
    mats, files = [], []
    for r in range(R):
        jitter = np.exp(rng.normal(0.0, 0.05, (A, A)))
        base = BASE_CONTACTS * jitter
        mats.append(np.array([np.round(base * s, 6) for _, s in sc.contact_breaks]))
        files.append([f"{REGIONS[r].lower()}_{b:03d}.csv" for b in breaks])
    contacts = ContactSchedule([breaks.copy() for _ in range(R)], mats)
    vacc = _vaccinations(sc, rng)
    # vaccination rows are stored on their effective dates; shift so the recorded date is the roll-out date
    vacc.day = vacc.day + cfg.lags.vaccination_days
    ds = Dataset(pops, contacts, files, vacc, ObservationSet())
    model = Model(cfg, ds)
    truth = truth_dict(sc, len(model.beta_change_days), rng)
    theta = theta_from_dict(model.layout, truth)

    H = sc.horizon_days
    last = H - 1 if sc.counts_until is None else min(sc.counts_until, H - 1)
    names = list(cfg.severity_groups())
    counts, sero, prev = [[], [], [], []], [[], [], [], [], []], [[], [], [], [], []]
    runs = [model.simulate_region(theta, r) for r in range(R)]
    sens, spec = truth["sens[Roche-N]"], truth["spec[Roche-N]"]
    elig = model.eligible
    for d in range(H):
        for r in range(R):
            mu = model.daily_events(runs[r])[d]
            if d <= last:
                for g, name in enumerate(names):
                    y = rng.negative_binomial(sc.eta, sc.eta / (sc.eta + mu[g])) if mu[g] > 0 else 0
                    for col, v in zip(counts, (r, d, g, int(y))):
                        col.append(v)
            sd = d + cfg.lags.serology_days  # date the sample represents after the lag
            if (d >= sc.serology_from and (d - sc.serology_from) % sc.serology_every == 0
                    and sd < H and d <= last):
                x = runs[r].traj.states[sd * model.spd]
                ever = 1.0 - x[elig][..., S].sum() / pops[r, elig].sum()
                p = sens * ever + (1 - spec) * (1 - ever)
                k = rng.binomial(sc.serology_n, p)
                for col, v in zip(sero, (r, sd, ASSAYS.index("Roche-N"), sc.serology_n, int(k))):
                    col.append(v)
            if d >= sc.prevalence_from:
                x = runs[r].traj.states[d * model.spd]
                positive = (x[..., I1] + x[..., I2] + x[..., RP]).sum(axis=1)
                for a in range(A):
                    nu = np.log(max(positive[a], 1e-6))
                    z = round(float(nu + rng.normal(0.0, sc.prevalence_sd)), 6)
                    for col, v in zip(prev, (r, d, a, z, sc.prevalence_sd)):
                        col.append(v)
    _, cagg = model.count_groups, model.count_agg
    ds.observations = ObservationSet(
        counts=CountSeries(*(np.array(c) for c in counts), names, cagg, kind="admissions"),
        serology=SerologySamples(*(np.array(c) for c in sero)),
        prevalence=PrevalenceEstimates(*(np.array(c) for c in prev), list(AGE_BANDS), np.eye(A)),
        enabled=cfg.streams.model_dump())
    truth_out = {k: (list(map(float, v)) if isinstance(v, (list, np.ndarray)) else float(v))
                 for k, v in truth.items()}
    incidence = sum(run.traj.daily(run.traj.incidence()).sum(axis=(1, 2)) for run in runs)
    truth_out["peak_day"] = int(np.argmax(incidence))
    truth_out["beta_change_days"] = [int(d) for d in model.beta_change_days]
    return cfg, ds, truth_out


def generate(out_dir, sc: Scenario | None = None) -> Path:
    """Write ``config.yaml``, ``data/`` and ``truth.json`` for a scenario."""
    sc = sc or Scenario()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg, ds, truth = build(sc)
    (out / "config.yaml").write_text(yaml.safe_dump(scenario_config(sc), sort_keys=False))
    export(ds, cfg, out / "data")
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    return out


def peak_scenario(seed: int) -> Scenario:
    """Wave turned over by a drop in transmission; admissions and serology stop before the peak."""
    return Scenario(seed=seed, contact_breaks=((0, 1.0), (45, 0.5), (90, 0.9)),
                    beta_drop={"day": 140, "log_change": -0.6, "weeks": 2},
                    vaccination_start=400, counts_until=130)
