from __future__ import annotations

import filecmp
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from stratcast.cli import main
from stratcast.config import ConfigError, load_config, parse_config
from stratcast.data import DataError, export, ingest
from stratcast.synthetic import Scenario, generate


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = generate(tmp_path_factory.mktemp("syn"), Scenario(seed=0))
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    cfg["mcmc"].update(iterations=300, burn_in=100, thin=5, map_init=False, curvature="off")
    (out / "quick.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))
    return out


def _copy(src: Path, dst: Path) -> Path:
    shutil.copytree(src, dst)
    return dst


def _same_tree(a: Path, b: Path):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only and not cmp.diff_files, (a, b)
    for sub in cmp.common_dirs:
        _same_tree(a / sub, b / sub)


# ---------------------------------------------------------------- configuration

BASE = """\
start_date: '2020-03-01'
horizon_days: 100
regions: [A]
age_bands: [young, old]
"""


def test_minimal_config_defaults():
    cfg = parse_config(BASE)
    assert cfg.dt == 0.5
    assert cfg.mcmc.curvature == "off"
    assert cfg.mcmc.walk_coordinates == "log_beta"
    assert cfg.calendar().date(1).isoformat() == "2020-03-02"


def test_unknown_key_reports_its_line():
    with pytest.raises(ConfigError) as e:
        parse_config(BASE + "mcmc:\n  iterations: 10\n  colour: red\n")
    assert e.value.line == 7
    assert "unknown key" in str(e.value)
    assert e.value.to_dict()["line"] == 7


def test_bad_dt_and_duplicate_names():
    with pytest.raises(ConfigError, match="1/dt"):
        parse_config(BASE + "dt: 0.3\n")
    with pytest.raises(ConfigError, match="unique"):
        parse_config(BASE.replace("[A]", "[A, A]"))
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(BASE + "mcmc: [\n")


def test_overlapping_efficacy_eras():
    era = "  - {start: %s, end: %s, pi_mrna: [0.5], pi_az: [0.4], alpha_mrna: [0.3], alpha_az: [0.2]}\n"
    text = BASE + "max_dose: 1\nefficacy:\n" + era % (0, 50) + era % (40, "null")
    with pytest.raises(ConfigError, match="overlap"):
        parse_config(text)
    parse_config(BASE + "max_dose: 1\nefficacy:\n" + era % (0, 40) + era % (40, "null"))


# ---------------------------------------------------------------- data

def test_ingest_export_round_trip_is_byte_identical(dataset_dir, tmp_path):
    cfg = load_config(dataset_dir / "config.yaml")
    ds = ingest(cfg)
    export(ds, cfg, tmp_path / "again")
    _same_tree(dataset_dir / "data", tmp_path / "again")


def test_vaccinations_shift_by_the_lag(dataset_dir):
    cfg = load_config(dataset_dir / "config.yaml")
    ds = ingest(cfg)
    with open(dataset_dir / "data" / "vaccinations.csv") as fh:
        fh.readline()
        first = fh.readline().split(",")[0]
    day = cfg.day(first)
    assert cfg.lags.vaccination_days == 21
    assert ds.vaccinations.day[0] == day + 21


def test_positive_above_tested_is_rejected(dataset_dir, tmp_path):
    d = _copy(dataset_dir, tmp_path / "bad")
    path = d / "data" / "serology.csv"
    lines = path.read_text().splitlines()
    head, row = lines[0], lines[1].split(",")
    row[4] = str(int(row[3]) + 1)
    path.write_text("\n".join([head, ",".join(row), *lines[2:]]) + "\n")
    with pytest.raises(DataError) as e:
        ingest(load_config(d / "config.yaml"))
    assert e.value.to_dict()["row"] == 2
    assert "n_positive" in str(e.value)


def test_unknown_region_is_rejected(dataset_dir, tmp_path):
    d = _copy(dataset_dir, tmp_path / "bad")
    path = d / "data" / "populations.csv"
    path.write_text(path.read_text().replace("North", "Atlantis", 1))
    with pytest.raises(DataError, match="Atlantis"):
        ingest(load_config(d / "config.yaml"))


# ---------------------------------------------------------------- command line

def test_validate(dataset_dir, capsys):
    assert main(["validate", str(dataset_dir / "config.yaml")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["status"] == "ok"
    assert report["regions"] == ["North", "South"]


def test_errors_are_json(dataset_dir, tmp_path, capsys):
    assert main(["validate", str(tmp_path / "missing.yaml")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert "missing.yaml" in err["message"]
    assert main(["frobnicate"]) == 2
    json.loads(capsys.readouterr().err)


def test_simulate_is_reproducible(dataset_dir, tmp_path):
    cfg = str(dataset_dir / "config.yaml")
    for name in ("a", "b"):
        assert main(["--out", str(tmp_path / name), "simulate", cfg]) == 0
    _same_tree(tmp_path / "a", tmp_path / "b")
    header = (tmp_path / "a" / "states.csv").read_text().splitlines()[0]
    assert header.startswith("region,age,dose,date,S,")


def test_simulate_synthetic_matches_library(dataset_dir, tmp_path):
    assert main(["--seed", "0", "simulate", "--synthetic", str(tmp_path / "s")]) == 0
    _same_tree(dataset_dir / "data", tmp_path / "s" / "data")


def test_fit_then_nowcast_and_counterfactual(dataset_dir, tmp_path):
    cfg = str(dataset_dir / "quick.yaml")
    chain = tmp_path / "chain"
    assert main(["--out", str(chain), "fit", cfg]) == 0
    meta = json.loads((chain / "manifest.json").read_text())
    assert meta["draws"] == 40 and meta["kind"] == "chain"
    assert main(["--out", str(tmp_path / "now"), "nowcast", cfg, "--chain", str(chain)]) == 0
    assert (tmp_path / "now" / "attack.csv").exists()
    assert main(["--out", str(tmp_path / "cf"), "counterfactual", cfg, "--chain", str(chain),
                 "--cutoff", "2020-06-01"]) == 0
    rows = (tmp_path / "cf" / "counterfactual.csv").read_text().splitlines()
    assert rows[-1].split(",")[4] == "2020-06-01"
    # same seed, same chain
    assert main(["--out", str(tmp_path / "chain2"), "fit", cfg]) == 0
    a, b = np.load(chain / "chain.npz"), np.load(tmp_path / "chain2" / "chain.npz")
    np.testing.assert_array_equal(a["samples"], b["samples"])


def test_console_entry_point(dataset_dir):
    res = subprocess.run([sys.executable, "-m", "stratcast.cli", "validate", str(dataset_dir / "config.yaml")],
                         capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["status"] == "ok"
