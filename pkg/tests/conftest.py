"""Shared fixtures: a desk-scale synthetic dataset built once per session."""
from __future__ import annotations

import numpy as np
import pytest

from stratcast.model import Model
from stratcast.synthetic import Scenario, build, theta_from_dict


@pytest.fixture(scope="session")
def synthetic():
    """``(cfg, dataset, truth)`` of the default synthetic scenario."""
    return build(Scenario(seed=0))


@pytest.fixture(scope="session")
def model(synthetic):
    cfg, ds, _ = synthetic
    return Model(cfg, ds)


@pytest.fixture(scope="session")
def truth_theta(synthetic, model):
    return theta_from_dict(model.layout, synthetic[2])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
