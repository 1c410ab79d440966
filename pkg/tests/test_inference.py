from __future__ import annotations

import math

import numpy as np
import pytest
from stratcast.inference import (AMGSSampler, AMGSSettings, BlockAdaptation, GaussianTarget, block_sparse_hessian,
                                 covariance_from_hessian, curvature_covariance, find_map, hessian, propose)
from stratcast.model import ModelTarget


class Hierarchy:
    """``x0 ~ N(0, 1)`` and ``x_r | x0 ~ N(x0, 0.5^2)``: regional blocks are independent given block 0."""

    def __init__(self, n_regions=3):
        self.n = n_regions
        self.blocks = [np.array([0])] + [np.array([1 + r]) for r in range(n_regions)]
        self.calls = [0] * (n_regions + 1)

    def _part(self, z, b):
        self.calls[b] += 1
        if b == 0:
            return -0.5 * z[0] ** 2
        return -2.0 * (z[b] - z[0]) ** 2

    def init(self, z):
        return np.array([self._part(z, b) for b in range(self.n + 1)])

    def part(self, z, b):
        return self._part(z, b)

    def covariance(self):
        n = self.n + 1
        cov = np.ones((n, n))
        cov[1:, 1:] += 0.25 * np.eye(self.n)
        return cov

    def update(self, z, block, parts):
        if block == 0:
            return self.init(z)
        out = np.array(parts, dtype=float)
        out[block] = self._part(z, block)
        return out


def test_gaussian_calibration():
    cov = np.array([[1.0, 0.8, 0.0], [0.8, 1.0, -0.3], [0.0, -0.3, 0.5]])
    mean = np.array([1.0, -2.0, 0.5])
    s = AMGSSampler(GaussianTarget(mean, cov), np.zeros(3), seed=3)
    z, _, _ = s.run(60000, burn_in=10000, thin=5).arrays()
    np.testing.assert_allclose(z.mean(0), mean, atol=0.1)
    np.testing.assert_allclose(np.cov(z.T), cov, atol=0.12)
    assert abs(s.acceptance_rates()[0] - 0.234) < 0.05


def test_warm_start_is_isotropic_then_empirical():
    s = AMGSSettings(warm_start=4, init_scale=0.1)
    ad = BlockAdaptation.start(3)
    np.testing.assert_allclose(ad.proposal_cov(s), 0.01 * np.eye(3))
    ad.end_warm_start()
    assert ad.lam == pytest.approx(math.log(2.38 ** 2 / 3))
    assert ad.i == 0


def test_scale_is_stationary_at_target_rate():
    s = AMGSSettings()
    ad = BlockAdaptation.start(2)
    ad.lam = 0.7
    for _ in range(50):
        ad.adapt(s.target_accept, s)
    assert ad.lam == pytest.approx(0.7, abs=1e-14)
    ad.adapt(1.0, s)
    assert ad.lam == pytest.approx(0.7 + 51 ** -0.6 * (1 - 0.234))


def test_running_covariance_matches_batch(rng):
    x = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4))
    ad = BlockAdaptation.start(4)
    for row in x:
        ad.record(row)
    np.testing.assert_allclose(ad.mean, x.mean(0), atol=1e-12)
    np.testing.assert_allclose(ad.cov, np.cov(x.T, ddof=1), atol=1e-10)


def test_zero_variance_block_still_proposes():
    s = AMGSSettings()
    ad = BlockAdaptation.start(2)
    for _ in range(10):
        ad.record(np.array([1.0, 2.0]))
    ad.end_warm_start()
    c = ad.proposal_cov(s)
    np.testing.assert_allclose(c, math.exp(ad.lam) * s.epsilon * np.eye(2))
    assert np.all(np.isfinite(propose(np.zeros(2), c, np.ones(2))))
    # singular covariance falls back to an eigen square root
    x = propose(np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 0.0]))
    assert x[0] == pytest.approx(x[1])


@pytest.mark.parametrize("threads", [1, 3])
def test_same_seed_same_chain_any_threads(threads):
    ref = AMGSSampler(Hierarchy(), np.zeros(4), seed=11).run(3000, burn_in=1000, thin=2).arrays()
    other = AMGSSampler(Hierarchy(), np.zeros(4), seed=11, threads=threads).run(3000, burn_in=1000,
                                                                                thin=2).arrays()
    for a, b in zip(ref, other):
        np.testing.assert_array_equal(a, b)
    diff = AMGSSampler(Hierarchy(), np.zeros(4), seed=12).run(3000, burn_in=1000, thin=2).arrays()
    assert not np.array_equal(ref[0], diff[0])


def test_checkpoint_resume_is_exact(tmp_path):
    full = AMGSSampler(Hierarchy(), np.zeros(4), seed=5).run(2000, burn_in=500, thin=3).arrays()
    ckpt = tmp_path / "ck.npz"
    first = AMGSSampler(Hierarchy(), np.zeros(4), seed=5)
    first.run(2000, burn_in=500, thin=3, checkpoint=ckpt, checkpoint_every=100, stop_at=1300)
    resumed = AMGSSampler.resume(ckpt, Hierarchy())
    assert resumed.iteration == 1300
    out = resumed.run(2000, burn_in=500, thin=3, checkpoint=ckpt, checkpoint_every=100).arrays()
    for a, b in zip(full, out):
        np.testing.assert_array_equal(a, b)


def test_regional_update_touches_only_its_part():
    t = Hierarchy()
    s = AMGSSampler(t, np.zeros(4), seed=1)
    before = list(t.calls)
    s.step()
    after = [a - b for a, b in zip(t.calls, before)]
    # the global proposal recomputes everything once; each region is then evaluated once more
    assert after == [1, 2, 2, 2]


def test_hierarchical_marginals():
    z, _, _ = AMGSSampler(Hierarchy(), np.zeros(4), seed=2).run(60000, burn_in=10000, thin=5).arrays()
    assert abs(z[:, 0].mean()) < 0.1
    assert np.var(z[:, 0]) == pytest.approx(1.0, rel=0.15)
    np.testing.assert_allclose(np.var(z[:, 1:], axis=0), 1.25, rtol=0.15)


def test_keep_initial_covariance():
    cov = np.diag([4.0, 0.01])
    t = GaussianTarget(np.zeros(2), cov)
    s = AMGSSampler(t, np.zeros(2), seed=0, settings=AMGSSettings(keep_initial_cov=True), init_covs=[cov])
    s.run(2000)
    assert s.adapt[0].warm
    np.testing.assert_allclose(s.adapt[0].proposal_cov(s.settings), math.exp(s.adapt[0].lam) * cov)


def test_curvature_covariance_of_gaussian():
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    t = GaussianTarget(np.array([1.0, 1.0]), cov)
    z = np.array([1.0, 1.0, 7.0])
    fn = lambda x: t.log_density(x[:2])  # noqa: E731
    np.testing.assert_allclose(curvature_covariance(fn, z, np.array([0, 1])), cov, rtol=1e-5)
    assert curvature_covariance(lambda x: math.nan, z, np.array([0])).shape == (1, 1)


def test_find_map_on_free_coordinates():
    t = GaussianTarget(np.array([1.0, -1.0]), np.eye(2))
    out = find_map(t.log_density, np.zeros(2), np.array([True, False]))
    assert out[0] == pytest.approx(1.0, abs=1e-4)
    assert out[1] == 0.0


def test_model_target_cached_parts_equal_recomputation(model, truth_theta):
    target = ModelTarget(model)
    s = AMGSSampler(target, model.to_z(truth_theta), seed=4)
    s.run(15)
    np.testing.assert_allclose(s.parts, target.init(s.z), rtol=1e-12)
    theta = model.to_theta(s.z)
    jac = model.layout.log_jacobian(s.z)
    assert s.log_post == pytest.approx(model.log_posterior(theta) + jac, rel=1e-10)


def test_walk_shift_round_trip(model, truth_theta):
    assert model.cfg.mcmc.walk_coordinates == "log_baseline_r"
    z = model.to_z(truth_theta)
    np.testing.assert_allclose(model.to_theta(z), truth_theta, rtol=1e-9, atol=1e-12)
    sl = model.layout.slices["log_beta[0]"]
    raw = model.layout.to_unconstrained(truth_theta)
    np.testing.assert_allclose(z[sl] - raw[sl], model.walk_offset(truth_theta, 0), atol=1e-12)


def test_zero_variance_proposals_stay_put():
    t = GaussianTarget(np.zeros(2), np.eye(2))
    s = AMGSSampler(t, np.array([0.3, -0.2]), seed=0, settings=AMGSSettings(init_scale=0.0, warm_start=10 ** 9))
    z, _, _ = s.run(200).arrays()
    assert np.all(z == np.array([0.3, -0.2]))
    assert s.acceptance_rates()[0] == 1.0


def test_collapsed_scale_returns_current_point():
    ad = BlockAdaptation.start(3)
    ad.lam = -800.0
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(propose(x, ad.proposal_cov(AMGSSettings()), np.ones(3)), x)


def test_step_sizes_square_summable_not_summable():
    p = AMGSSettings().exponent
    assert 0.5 < p <= 1.0
    i = np.arange(1, 10 ** 6 + 1, dtype=float)
    g = i ** -p
    assert g[: 10 ** 5].sum() < g.sum() / 2          # keeps growing
    assert (g ** 2).sum() < 1.0 + 1.0 / (2 * p - 1)  # integral bound


def test_failed_evaluation_is_a_rejection():
    class Flaky(GaussianTarget):
        def update(self, z, block, parts):
            if z[0] > 0.5:
                raise FloatingPointError("boom")
            return self.init(z)

    s = AMGSSampler(Flaky(np.zeros(1), np.eye(1)), np.zeros(1), seed=0)
    z, _, _ = s.run(2000).arrays()
    assert z.max() <= 0.5


def test_conditional_independence_on_model(model, truth_theta):
    target = ModelTarget(model)
    z = model.to_z(truth_theta)
    parts = target.init(z)
    idx = target.blocks[1]
    z2 = z.copy()
    z2[idx] += 0.01
    new = target.update(z2, 1, parts)
    assert new[1] != parts[1]
    np.testing.assert_array_equal(np.delete(new, 1), np.delete(parts, 1))
    np.testing.assert_allclose(new, target.init(z2), rtol=1e-12)


def test_block_sparse_hessian_matches_dense():
    t = Hierarchy()
    z = np.array([0.3, -0.1, 0.4, 1.0])
    sparse = block_sparse_hessian(t.part, z, t.blocks)
    dense = hessian(lambda x: float(np.sum(t.init(x))), z, np.arange(4))
    np.testing.assert_allclose(sparse, dense, atol=1e-6)
    np.testing.assert_allclose(covariance_from_hessian(sparse), t.covariance(), rtol=1e-5)


def test_joint_move_samples_the_target():
    t = Hierarchy()
    s = AMGSSampler(t, np.zeros(4), seed=9, settings=AMGSSettings(joint_every=1), joint_cov=t.covariance())
    z, _, _ = s.run(40000, burn_in=5000, thin=5).arrays()
    np.testing.assert_allclose(np.cov(z.T), t.covariance(), atol=0.12)
    assert 0.1 < s.joint_acceptance() < 0.5
    with pytest.raises(ValueError):
        AMGSSampler(t, np.zeros(4), settings=AMGSSettings(joint_every=1))


def test_checkpoint_resume_with_joint_move(tmp_path):
    t = Hierarchy()
    kw = dict(seed=5, settings=AMGSSettings(joint_every=2), joint_cov=t.covariance())
    full = AMGSSampler(Hierarchy(), np.zeros(4), **kw).run(1500, burn_in=500, thin=3).arrays()
    ckpt = tmp_path / "ck.npz"
    AMGSSampler(Hierarchy(), np.zeros(4), **kw).run(1500, burn_in=500, thin=3, checkpoint=ckpt,
                                                    checkpoint_every=100, stop_at=900)
    resumed = AMGSSampler.resume(ckpt, Hierarchy(), AMGSSettings(joint_every=2))
    out = resumed.run(1500, burn_in=500, thin=3, checkpoint=ckpt, checkpoint_every=100).arrays()
    for a, b in zip(full, out):
        np.testing.assert_array_equal(a, b)
