"""Dataset ingestion, validation and export.

A dataset directory holds::

    populations.csv          region, age_band, population
    contacts/manifest.csv    region, date, file
    contacts/<file>          age_band column then one column per age band
    vaccinations.csv         date, region, age_band, dose_number, vaccine_type, count
    counts.csv               date, region, age_group, count
    serology.csv             date, region, assay, n_tested, n_positive
    prevalence.csv           date, region, age_band, log_mean, log_sd

Only ``populations.csv`` and the contact manifest are mandatory.  Serology
and vaccination dates are shifted forward by the configured lags on the way
in and back on the way out, so ingest followed by export reproduces the
files byte for byte.
"""
from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .core import ContactSchedule, age_group_matrix
from .dynamics import VaccinationFeed
from .observation import ASSAYS, CountSeries, ObservationSet, PrevalenceEstimates, SerologySamples

VACCINE_TYPES = ("mRNA", "non-mRNA")


class DataError(ValueError):
    """A dataset file failed validation; carries the file and row."""

    def __init__(self, message: str, file: str | None = None, row: int | None = None):
        where = f"{file}:{row}: " if file and row else (f"{file}: " if file else "")
        super().__init__(where + message)
        self.file = file
        self.row = row

    def to_dict(self) -> dict:
        return {"error": "DataError", "message": str(self), "file": self.file, "row": self.row}


@dataclass
class VaccinationRecords:
    """Row-level vaccination counts; ``day`` already includes the lag."""

    day: np.ndarray
    region: np.ndarray
    age: np.ndarray
    dose: np.ndarray   # 1-based dose number
    vtype: np.ndarray  # index into VACCINE_TYPES
    count: np.ndarray

    def __len__(self):
        return len(self.day)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, np.zeros(0))

    def feed(self, region: int, n_days: int, n_ages: int, max_dose: int) -> VaccinationFeed:
        counts = np.zeros((n_days, n_ages, max(max_dose, 0), 2))
        sel = (self.region == region) & (self.day >= 0) & (self.day < n_days) & (self.dose <= max_dose)
        np.add.at(counts, (self.day[sel], self.age[sel], self.dose[sel] - 1, self.vtype[sel]), self.count[sel])
        return VaccinationFeed(counts)


@dataclass
class Dataset:
    populations: np.ndarray            # (R, A)
    contacts: ContactSchedule
    contact_files: list[list[str]]
    vaccinations: VaccinationRecords
    observations: ObservationSet
    notes: list[str] = field(default_factory=list)

    def feeds(self, cfg: RunConfig) -> list[VaccinationFeed]:
        return [self.vaccinations.feed(r, cfg.horizon_days, len(cfg.age_bands), cfg.max_dose)
                for r in range(len(cfg.regions))]


# ---------------------------------------------------------------- helpers

def _read(path: Path, columns: list[str]):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != columns:
            raise DataError(f"expected columns {columns}, found {reader.fieldnames}", path.name, 1)
        for i, row in enumerate(reader, start=2):
            yield i, row


def _num(text: str, kind, file: str, row: int, name: str):
    try:
        v = kind(text)
    except ValueError:
        raise DataError(f"{name} {text!r} is not a valid {kind.__name__}", file, row) from None
    if kind is float and not np.isfinite(v):
        raise DataError(f"{name} must be finite", file, row)
    return v


def _date(text: str, file: str, row: int) -> _dt.date:
    try:
        return _dt.date.fromisoformat(text)
    except ValueError:
        raise DataError(f"bad ISO date {text!r}", file, row) from None


def _lookup(value: str, table: dict, what: str, file: str, row: int) -> int:
    if value not in table:
        raise DataError(f"unknown {what} {value!r}", file, row)
    return table[value]


def fmt(x) -> str:
    """Shortest round-trip text for a number; integral floats print without a point."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


# ---------------------------------------------------------------- ingest

def ingest(cfg: RunConfig, data_dir=None) -> Dataset:
    """Read and cross-validate a dataset directory against the configuration."""
    root = Path(data_dir) if data_dir is not None else cfg.data_path
    if not root.is_dir():
        raise DataError(f"dataset directory {root} not found")
    regions = {n: i for i, n in enumerate(cfg.regions)}
    bands = {n: i for i, n in enumerate(cfg.age_bands)}
    R, A = len(regions), len(bands)
    start = cfg.start_date

    # populations
    pops = np.full((R, A), np.nan)
    for i, row in _read(root / "populations.csv", ["region", "age_band", "population"]):
        r = _lookup(row["region"], regions, "region", "populations.csv", i)
        a = _lookup(row["age_band"], bands, "age band", "populations.csv", i)
        v = _num(row["population"], float, "populations.csv", i, "population")
        if not v > 0:
            raise DataError("population must be positive", "populations.csv", i)
        if not np.isnan(pops[r, a]):
            raise DataError("duplicate population entry", "populations.csv", i)
        pops[r, a] = v
    if np.isnan(pops).any():
        r, a = np.argwhere(np.isnan(pops))[0]
        raise DataError(f"missing population for {cfg.regions[r]}/{cfg.age_bands[a]}", "populations.csv")

    # contacts
    cdir = root / "contacts"
    bps: list[list[int]] = [[] for _ in range(R)]
    mats: list[list[np.ndarray]] = [[] for _ in range(R)]
    files: list[list[str]] = [[] for _ in range(R)]
    for i, row in _read(cdir / "manifest.csv", ["region", "date", "file"]):
        r = _lookup(row["region"], regions, "region", "contacts/manifest.csv", i)
        bps[r].append((_date(row["date"], "contacts/manifest.csv", i) - start).days)
        mats[r].append(read_matrix(cdir / row["file"], cfg.age_bands))
        files[r].append(row["file"])
    for r in range(R):
        if not bps[r]:
            raise DataError(f"no contact matrix for region {cfg.regions[r]}", "contacts/manifest.csv")
    try:
        contacts = ContactSchedule([np.array(b) for b in bps], [np.array(m) for m in mats])
    except ValueError as exc:
        raise DataError(str(exc), "contacts/manifest.csv") from None

    # vaccinations
    vacc = VaccinationRecords.empty()
    path = root / "vaccinations.csv"
    if path.exists():
        rows = []
        types = {n: i for i, n in enumerate(VACCINE_TYPES)}
        for i, row in _read(path, ["date", "region", "age_band", "dose_number", "vaccine_type", "count"]):
            f = "vaccinations.csv"
            day = (_date(row["date"], f, i) - start).days + cfg.lags.vaccination_days
            r = _lookup(row["region"], regions, "region", f, i)
            a = _lookup(row["age_band"], bands, "age band", f, i)
            q = _num(row["dose_number"], int, f, i, "dose_number")
            if q < 1:
                raise DataError("dose_number must be >= 1", f, i)
            t = _lookup(row["vaccine_type"], types, "vaccine type", f, i)
            c = _num(row["count"], float, f, i, "count")
            if c < 0:
                raise DataError("count must be >= 0", f, i)
            rows.append((day, r, a, q, t, c))
        if rows:
            arr = list(zip(*rows))
            vacc = VaccinationRecords(*(np.array(col, dtype=np.int64) for col in arr[:5]),
                                      np.array(arr[5], dtype=float))

    obs = ObservationSet(enabled=cfg.streams.model_dump())

    # severe-event counts
    path = root / "counts.csv"
    if path.exists():
        names, agg = age_group_matrix(cfg.severity_groups(), cfg.age_bands)
        gidx = {n: i for i, n in enumerate(names)}
        cols = [[], [], [], []]
        for i, row in _read(path, ["date", "region", "age_group", "count"]):
            f = "counts.csv"
            cols[0].append(_lookup(row["region"], regions, "region", f, i))
            cols[1].append((_date(row["date"], f, i) - start).days)
            cols[2].append(_lookup(row["age_group"], gidx, "age group", f, i))
            c = _num(row["count"], int, f, i, "count")
            if c < 0:
                raise DataError("count must be a nonnegative integer", f, i)
            cols[3].append(c)
        obs.counts = CountSeries(*(np.array(c) for c in cols), names, agg, kind=cfg.severity.kind)

    # serology
    path = root / "serology.csv"
    if path.exists():
        assays = {n: i for i, n in enumerate(ASSAYS)}
        cols = [[], [], [], [], []]
        for i, row in _read(path, ["date", "region", "assay", "n_tested", "n_positive"]):
            f = "serology.csv"
            cols[0].append(_lookup(row["region"], regions, "region", f, i))
            cols[1].append((_date(row["date"], f, i) - start).days + cfg.lags.serology_days)
            cols[2].append(_lookup(row["assay"], assays, "assay", f, i))
            n = _num(row["n_tested"], int, f, i, "n_tested")
            k = _num(row["n_positive"], int, f, i, "n_positive")
            if not 0 <= k <= n:
                raise DataError(f"n_positive = {k} outside [0, n_tested = {n}]", f, i)
            cols[3].append(n)
            cols[4].append(k)
        obs.serology = SerologySamples(*(np.array(c) for c in cols))

    # prevalence
    path = root / "prevalence.csv"
    if path.exists():
        names, agg = age_group_matrix(cfg.prevalence_groups(), cfg.age_bands, cover=False)
        gidx = {n: i for i, n in enumerate(names)}
        cols = [[], [], [], [], []]
        for i, row in _read(path, ["date", "region", "age_band", "log_mean", "log_sd"]):
            f = "prevalence.csv"
            cols[0].append(_lookup(row["region"], regions, "region", f, i))
            cols[1].append((_date(row["date"], f, i) - start).days)
            cols[2].append(_lookup(row["age_band"], gidx, "age band", f, i))
            cols[3].append(_num(row["log_mean"], float, f, i, "log_mean"))
            sd = _num(row["log_sd"], float, f, i, "log_sd")
            if not sd > 0:
                raise DataError("log_sd must be positive", f, i)
            cols[4].append(sd)
        obs.prevalence = PrevalenceEstimates(*(np.array(c) for c in cols), names, agg)

    ds = Dataset(pops, contacts, files, vacc, obs)
    _check_horizon(ds, cfg)
    return ds


def _check_horizon(ds: Dataset, cfg: RunConfig):
    H = cfg.horizon_days
    o = ds.observations
    for name in ("counts", "serology", "prevalence"):
        s = getattr(o, name)
        if s is None or len(s) == 0:
            continue
        bad = (s.day < 0) | (s.day >= H)
        if np.any(bad):
            ds.notes.append(f"{name}: {int(bad.sum())} rows outside the horizon are ignored by the fit")


def read_matrix(path: Path, age_bands) -> np.ndarray:
    A = len(age_bands)
    out = np.empty((A, A))
    seen = []
    for i, row in _read(path, ["age_band", *age_bands]):
        if row["age_band"] not in age_bands:
            raise DataError(f"unknown age band {row['age_band']!r}", path.name, i)
        a = list(age_bands).index(row["age_band"])
        out[a] = [_num(row[b], float, path.name, i, "contact rate") for b in age_bands]
        if np.any(out[a] < 0):
            raise DataError("contact rates must be >= 0", path.name, i)
        seen.append(a)
    if sorted(seen) != list(range(A)):
        raise DataError("matrix must have exactly one row per age band", path.name)
    return out


# ---------------------------------------------------------------- export

def _write(path: Path, header: list[str], rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def write_matrix(path: Path, matrix, age_bands):
    _write(path, ["age_band", *age_bands],
           ([age_bands[a], *(fmt(v) for v in matrix[a])] for a in range(len(age_bands))))


def export(ds: Dataset, cfg: RunConfig, out_dir) -> Path:
    """Write a dataset directory in the ingest schema, undoing the date lags."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = cfg.start_date
    date = lambda d: (start + _dt.timedelta(days=int(d))).isoformat()  # noqa: E731
    R, A = ds.populations.shape
    _write(out / "populations.csv", ["region", "age_band", "population"],
           ([cfg.regions[r], cfg.age_bands[a], fmt(ds.populations[r, a])] for r in range(R) for a in range(A)))
    rows = []
    for r in range(R):
        for j, day in enumerate(ds.contacts.breakpoints[r]):
            name = ds.contact_files[r][j]
            rows.append([cfg.regions[r], date(day), name])
            write_matrix(out / "contacts" / name, ds.contacts.matrices[r][j], cfg.age_bands)
    _write(out / "contacts" / "manifest.csv", ["region", "date", "file"], rows)
    v = ds.vaccinations
    if v.day.size:
        lag = cfg.lags.vaccination_days
        _write(out / "vaccinations.csv", ["date", "region", "age_band", "dose_number", "vaccine_type", "count"],
               ([date(v.day[i] - lag), cfg.regions[v.region[i]], cfg.age_bands[v.age[i]], str(v.dose[i]),
                 VACCINE_TYPES[v.vtype[i]], fmt(v.count[i])] for i in range(v.day.size)))
    o = ds.observations
    if o.counts is not None:
        c = o.counts
        _write(out / "counts.csv", ["date", "region", "age_group", "count"],
               ([date(c.day[i]), cfg.regions[c.region[i]], c.group_names[c.group[i]], fmt(c.count[i])]
                for i in range(len(c))))
    if o.serology is not None:
        s = o.serology
        lag = cfg.lags.serology_days
        _write(out / "serology.csv", ["date", "region", "assay", "n_tested", "n_positive"],
               ([date(s.day[i] - lag), cfg.regions[s.region[i]], ASSAYS[s.assay[i]], fmt(s.n_tested[i]),
                 fmt(s.n_positive[i])] for i in range(len(s))))
    if o.prevalence is not None:
        p = o.prevalence
        _write(out / "prevalence.csv", ["date", "region", "age_band", "log_mean", "log_sd"],
               ([date(p.day[i]), cfg.regions[p.region[i]], p.group_names[p.group[i]], fmt(p.log_mean[i]),
                 fmt(p.log_sd[i])] for i in range(len(p))))
    return out
