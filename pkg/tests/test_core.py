from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from stratcast.core import (EIGHT_AGE_BANDS, Calendar, ContactSchedule, StratumSpec, age_group_matrix,
                            validate_state)


def test_spec_shapes():
    spec = StratumSpec(n_regions=7, n_ages=8, max_dose=4, dt=0.5, horizon_days=10)
    assert spec.state_shape == (7, 8, 5, 9)
    assert spec.n_steps == 20
    assert spec.steps_per_day == 2
    assert len(EIGHT_AGE_BANDS) == 8


def test_non_integer_inverse_dt_rejected():
    with pytest.raises(ValueError, match="1/dt"):
        StratumSpec(n_regions=1, n_ages=1, dt=0.3)


def test_index_of_and_day_of_round_trip():
    spec = StratumSpec(n_regions=1, n_ages=1, dt=0.25, horizon_days=30)
    for d in range(30):
        assert spec.day_of(spec.index_of(d)) == d


def test_calendar():
    cal = Calendar(dt.date(2020, 3, 1), 100)
    assert cal.day("2020-03-11") == 10
    assert cal.date(10) == dt.date(2020, 3, 11)
    assert cal.in_horizon(0) and not cal.in_horizon(-1)


def test_contact_schedule_step_index():
    mats = np.ones((2, 3, 3))
    cs = ContactSchedule([np.array([0, 5])], [mats])
    spec = StratumSpec(n_regions=1, n_ages=3, dt=0.5, horizon_days=10)
    idx = cs.step_index(0, spec)
    assert idx.shape == (20,)
    assert (idx[:10] == 0).all() and (idx[10:] == 1).all()


@pytest.mark.parametrize("bp", [[1, 5], [0, 0]])
def test_contact_schedule_rejects_bad_breakpoints(bp):
    with pytest.raises(ValueError):
        ContactSchedule([np.array(bp)], [np.ones((2, 2, 2))])


def test_validate_state_lists_every_violation():
    spec = StratumSpec(n_regions=2, n_ages=2, max_dose=1, horizon_days=1)
    pops = np.full((2, 2), 100.0)
    x = np.zeros(spec.state_shape)
    x[..., 0, 0] = 100.0
    assert validate_state(x, spec, pops).ok
    x[1, 0, 1, 3] = -1.0
    x[0, 1, 0, 0] = 90.0
    rep = validate_state(x, spec, pops)
    assert not rep.ok
    cells = {(v.region, v.age) for v in rep.violations}
    assert (1, 0) in cells and (0, 1) in cells
    assert "negative" in str(rep)


def test_age_group_matrix():
    names, mat = age_group_matrix({"young": ["a", "b"], "old": ["c"]}, ["a", "b", "c"])
    assert names == ["young", "old"]
    np.testing.assert_array_equal(mat, [[1, 1, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        age_group_matrix({"x": ["a"], "y": ["a", "b", "c"]}, ["a", "b", "c"])
    with pytest.raises(ValueError):
        age_group_matrix({"x": ["a"]}, ["a", "b"])
