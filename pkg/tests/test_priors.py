from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from stratcast.parameters import build_layout
from stratcast.priors import (BetaPrior, GammaPrior, PriorSet, log_prior, log_uniform_logpdf,
                              logit_normal_logpdf, lognormal_logpdf, random_walk_logpdf)


def layout(**kw):
    args = dict(n_regions=2, age_bands=["a", "b", "c"], n_modifiers=3, n_beta_steps=4,
                n_severity_changepoints=0, assays=["Roche-N"], fixed={})
    args.update(kw)
    return build_layout(**args)


def test_gamma_is_shape_rate():
    g = GammaPrior(2.0, 0.5)
    assert g.mean == pytest.approx(4.0)
    assert g.logpdf(3.0) == pytest.approx(stats.gamma.logpdf(3.0, 2.0, scale=2.0), rel=1e-12)
    shifted = GammaPrior(1.43, 0.549, offset=2.0)
    assert shifted.logpdf(5.0) == pytest.approx(stats.gamma.logpdf(3.0, 1.43, scale=1 / 0.549), rel=1e-12)
    assert shifted.logpdf(1.9) == -math.inf


def test_beta_and_other_densities():
    assert BetaPrior(457, 13.2).logpdf(0.97) == pytest.approx(stats.beta.logpdf(0.97, 457, 13.2), rel=1e-10)
    assert lognormal_logpdf(np.array([0.5, 2.0]), 0.0, 0.5) == pytest.approx(
        stats.lognorm.logpdf([0.5, 2.0], 0.5).sum(), rel=1e-12)
    assert log_uniform_logpdf(10.0, 1.0, 100.0) == pytest.approx(-math.log(10.0 * math.log(100.0)))
    assert log_uniform_logpdf(1000.0, 1.0, 100.0) == -math.inf
    p = np.array([0.2])
    ref = stats.norm.logpdf(math.log(0.25), -1.0, 0.8) - math.log(0.2 * 0.8)
    assert logit_normal_logpdf(p, -1.0, 0.8) == pytest.approx(ref, rel=1e-12)


def test_random_walk():
    lb = np.array([0.1, 0.0, -0.2])
    ref = stats.norm.logpdf([0.1, -0.1, -0.2], 0, 0.05).sum()
    assert random_walk_logpdf(lb, 0.05) == pytest.approx(ref, rel=1e-12)
    assert random_walk_logpdf(lb, 0.0) == -math.inf


@settings(max_examples=100)
@given(st.lists(st.floats(-3, 3), min_size=40, max_size=40))
def test_transform_round_trip_and_jacobian(zs):
    L = layout()
    z = np.array(zs[: L.size] + [0.0] * max(0, L.size - len(zs)))
    theta = L.to_constrained(z)
    np.testing.assert_allclose(L.to_unconstrained(theta), z, atol=1e-8)
    # Jacobian by finite differences of each scalar transform
    h = 1e-6
    num = 0.0
    for i in range(L.size):
        e = np.zeros(L.size)
        e[i] = h
        num += math.log(abs((L.to_constrained(z + e)[i] - L.to_constrained(z - e)[i]) / (2 * h)))
    assert L.log_jacobian(z) == pytest.approx(num, abs=1e-5)


def test_layout_blocks_and_fixed():
    L = layout(fixed={"d_R": 12.0})
    blocks = L.block_indices()
    assert len(blocks) == 3
    assert L.slices["d_R"].start not in blocks[0]
    flat = np.concatenate(blocks)
    assert len(set(flat)) == len(flat) == int(L.free.sum())
    theta = L.apply_fixed(np.zeros(L.size))
    assert L.get(theta, "d_R") == 12.0
    names = L.names
    assert "log_beta[1]" in L.slices and len(names) == L.size
    assert L.block_of().count("region1") == len(blocks[2])


def test_log_prior_finite_at_prior_means():
    L = layout()
    pr = PriorSet()
    theta = np.zeros(L.size)
    L.set(theta, "d_I", pr.d_I.mean)
    L.set(theta, "d_R", pr.d_R.mean)
    L.set(theta, "eta", pr.eta.mean)
    L.set(theta, "sigma_beta", pr.sigma_beta.mean)
    L.set(theta, "sens[Roche-N]", 0.97)
    L.set(theta, "spec[Roche-N]", 0.998)
    L.set(theta, "p0", [0.01, 0.01, 0.05])
    for r in range(2):
        L.set(theta, f"psi[{r}]", pr.psi.mean)
        L.set(theta, f"I0[{r}]", 50.0)
        L.set(theta, f"m[{r}]", [1.0, 1.0, 1.0])
    assert np.isfinite(log_prior(theta, L, pr, ["Roche-N"]))
    L.set(theta, "I0[1]", 1e9)
    assert log_prior(theta, L, pr, ["Roche-N"]) == -math.inf
