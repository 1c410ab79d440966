"""Command-line interface.

Subcommands::

    stratcast validate CONFIG
    stratcast simulate CONFIG [--params FILE]
    stratcast simulate --synthetic DIR [--scenario default|peak]
    stratcast fit CONFIG
    stratcast nowcast CONFIG --chain DIR
    stratcast counterfactual CONFIG --chain DIR [--cutoff DATE]
    stratcast sensitivity CONFIG [--reference DATE ...]

Global flags ``--seed``, ``--threads`` and ``--out`` precede the subcommand.
Failures exit with status 1 (2 for usage errors) and print one JSON object
on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .core import STATE_NAMES
from .data import DataError, ingest

log = logging.getLogger("stratcast")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def _load(path) -> tuple[RunConfig, object]:
    cfg = load_config(path)
    return cfg, ingest(cfg)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _params(model, path) -> np.ndarray:
    """Constrained parameters from a JSON mapping of names to values; missing names use defaults."""
    theta = model.default_theta()
    if path is None:
        return theta
    values = json.loads(Path(path).read_text())
    L = model.layout
    unknown = [k for k in values if k not in L.slices and k not in ("peak_day", "beta_change_days")]
    if unknown:
        raise UsageError(f"unknown parameters in {path}: {unknown}")
    for name in L.slices:
        if name in values:
            L.set(theta, name, values[name])
    return L.apply_fixed(theta)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------- subcommands

def cmd_validate(args) -> dict:
    from .model import Model

    cfg, ds = _load(args.config)
    model = Model(cfg, ds)
    obs = ds.observations
    report = {"status": "ok", "config_hash": cfg.config_hash(), "regions": list(cfg.regions),
              "age_bands": list(cfg.age_bands), "parameters": model.layout.size,
              "free_parameters": int(model.layout.free.sum()),
              "rows": {"counts": len(obs.counts) if obs.counts is not None else 0,
                       "serology": len(obs.serology) if obs.serology is not None else 0,
                       "prevalence": len(obs.prevalence) if obs.prevalence is not None else 0,
                       "vaccinations": len(ds.vaccinations)},
              "notes": list(ds.notes)}
    print(json.dumps(report, indent=1))
    return report


def cmd_simulate(args) -> dict:
    from .model import Model
    from .pipeline import manifest, write_json
    from .synthetic import Scenario, generate, peak_scenario

    if args.synthetic:
        sc = peak_scenario(args.seed) if args.scenario == "peak" else Scenario(seed=args.seed)
        out = generate(args.synthetic, sc)
        log.info("synthetic dataset written to %s", out)
        return {"synthetic": str(out)}
    if not args.config:
        raise UsageError("simulate needs CONFIG or --synthetic DIR")
    cfg, ds = _load(args.config)
    model = Model(cfg, ds)
    theta = _params(model, args.params)
    out = _out(args)
    cal = cfg.calendar()
    days = cfg.horizon_days
    state_rows, event_rows = [], []
    groups = list(cfg.severity_groups())
    for r, region in enumerate(cfg.regions):
        run = model.simulate_region(theta, r)
        x = run.traj.day_states()[:days]
        inc = run.traj.daily(run.traj.incidence())
        ev = model.daily_events(run)
        for d in range(days):
            date = cal.date(d).isoformat()
            for a, band in enumerate(cfg.age_bands):
                for q in range(model.spec.n_doses):
                    state_rows.append([region, band, q, date, *(_g(v) for v in x[d, a, q]), _g(inc[d, a, q])])
            for g, name in enumerate(groups):
                event_rows.append([region, name, date, _g(ev[d, g])])
    _write_csv(out / "states.csv", ["region", "age", "dose", "date", *STATE_NAMES, "new_infections"], state_rows)
    _write_csv(out / "expected_events.csv", ["region", "group", "date", "expected"], event_rows)
    write_json(out / "manifest.json", manifest(cfg, "simulate", None, parameters=dict(
        zip(model.layout.names, map(float, theta)))))
    return {"out": str(out)}


def cmd_fit(args) -> dict:
    from .pipeline import fit, write_chain

    cfg, ds = _load(args.config)
    out = _out(args)
    result = fit(cfg, ds, seed=args.seed, threads=args.threads, out_dir=out)
    write_chain(result, cfg, out)
    return {"out": str(out), "acceptance": result.acceptance.tolist(), "seconds": round(result.seconds, 2)}


def _chain(args):
    from .model import Model
    from .pipeline import read_chain

    cfg, ds = _load(args.config)
    model = Model(cfg, ds)
    return cfg, model, read_chain(args.chain, model)


def cmd_nowcast(args) -> dict:
    from .analysis import nowcast, select_draws
    from .pipeline import manifest, write_json

    cfg, model, chain = _chain(args)
    draws = select_draws(chain.samples, cfg.analysis.max_samples)
    products = nowcast(model, draws, threads=args.threads)
    out = _out(args)
    paths = products.write(out)
    write_json(out / "manifest.json", manifest(cfg, "nowcast", chain.seed, chain=str(args.chain),
                                               draws=len(draws), products=[p.name for p in paths]))
    return {"out": str(out), "products": [p.name for p in paths]}


def cmd_counterfactual(args) -> dict:
    from .analysis import PRODUCT_COLUMNS, counterfactual_no_vaccine, select_draws, write_rows
    from .pipeline import manifest, write_json

    cfg, model, chain = _chain(args)
    cutoff = args.cutoff if args.cutoff is not None else cfg.analysis.counterfactual_cutoff
    cutoff = None if cutoff is None else cfg.calendar().day(cutoff)
    draws = select_draws(chain.samples, cfg.analysis.max_samples)
    cf = counterfactual_no_vaccine(model, draws, cutoff, threads=args.threads)
    cal = cfg.calendar()
    dates = [cal.date(d).isoformat() for d in range(cfg.horizon_days)]
    out = _out(args)
    write_rows(out / "counterfactual.csv", cf.rows(dates), PRODUCT_COLUMNS)
    write_json(out / "manifest.json", manifest(cfg, "counterfactual", chain.seed, chain=str(args.chain),
                                               draws=len(draws), cutoff=dates[cf.cutoff]))
    return {"out": str(out), "cutoff": dates[cf.cutoff]}


def cmd_sensitivity(args) -> dict:
    from .analysis import predictive_coverage, select_draws, sensitivity_harness
    from .pipeline import manifest, write_chain, write_json

    cfg, ds = _load(args.config)
    cal = cfg.calendar()
    refs = [cal.day(r) for r in args.reference] if args.reference else None
    out = _out(args)
    rep = sensitivity_harness(cfg, ds, seed=args.seed, threads=args.threads, reference_days=refs, out_dir=out)
    rows = rep.rows(cal)
    coverage = {}
    for level, res in rep.fits.items():
        write_chain(res, res.model.cfg, out / level)
        coverage[level] = predictive_coverage(res.model, select_draws(res.samples, cfg.analysis.max_samples),
                                              seed=args.seed)
    if rows:
        _write_csv(out / "peaks.csv", list(rows[0]), [[(_g(v) if isinstance(v, float) else v) for v in row.values()]
                                                       for row in rows])
    write_json(out / "manifest.json", manifest(cfg, "sensitivity", args.seed, levels=list(rep.fits),
                                               reference=[cal.date(d).isoformat() for d in rep.reference],
                                               predictive_coverage=coverage, notes=rep.notes))
    return {"out": str(out), "mode_days": {k: cal.date(v).isoformat() for k, v in rep.mode_days.items()}}


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stratcast", description="Age- and dose-stratified epidemic nowcasting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--out", default="run", help="output directory (default ./run)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", help="check configuration and data only")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", help="forward run, or write a synthetic dataset")
    s.add_argument("config", nargs="?")
    s.add_argument("--params", help="JSON file of parameter values (defaults for missing names)")
    s.add_argument("--synthetic", metavar="DIR", help="write a synthetic dataset to DIR")
    s.add_argument("--scenario", choices=["default", "peak"], default="default")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="posterior sampling")
    s.add_argument("config")
    s.set_defaults(func=cmd_fit)

    for name, func, help_ in (("nowcast", cmd_nowcast, "analysis products from a chain"),
                              ("counterfactual", cmd_counterfactual, "no-vaccine-effect re-simulation")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--chain", required=True, help="directory written by 'fit'")
        if name == "counterfactual":
            s.add_argument("--cutoff", help="last date of accumulation (ISO date or day offset)")
        s.set_defaults(func=func)

    s = sub.add_parser("sensitivity", help="fits with full, truncated and no prevalence data")
    s.add_argument("config")
    s.add_argument("--reference", nargs="*", help="reference peak dates (default: mode of the full fit)")
    s.set_defaults(func=cmd_sensitivity)
    return p


def _fail(exc: Exception, code: int) -> int:
    payload = exc.to_dict() if hasattr(exc, "to_dict") else {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, DataError, UsageError) as exc:
        return _fail(exc, 1)
    except Exception as exc:  # noqa: BLE001 - every failure is reported as JSON
        log.debug("unhandled error", exc_info=True)
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
