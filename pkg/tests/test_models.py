"""Test targets: scalar Gaussians and mixtures, the constrained diffusion
bridge, and the exact finite-state helpers."""
import math

import numpy as np
import pytest
from scipy import stats

from moiforge import core, models
from moiforge.models import (Gaussian1D, GaussianMixture1D, WrightFisherBridge,
                             discrete_target, discrete_transition_oracle,
                             product_target, scalar_target,
                             stationary_distribution, wf_forward,
                             wf_from_config, wf_log_target, wf_path_log_density,
                             wf_path_target, wf_target, wf_to_config)
from moiforge.rng import RngStream

from helpers import assert_gof_cdf, assert_gof_normal


# ---------------------------------------------------------------------------
# scalar distributions

class TestGaussian1D:
    def test_logpdf_matches_scipy(self):
        g = Gaussian1D(1.5, 0.7)
        xs = np.linspace(-3, 5, 41)
        ours = [g.logpdf(x) for x in xs]
        ref = stats.norm.logpdf(xs, loc=1.5, scale=0.7)
        np.testing.assert_allclose(ours, ref, rtol=1e-12)

    def test_sampling(self):
        g = Gaussian1D(-2.0, 3.0)
        draws = g.sample(RngStream(0, 200), size=20000)
        assert_gof_normal(draws, -2.0, 3.0)

    def test_rejects_bad_sd(self):
        with pytest.raises(ValueError):
            Gaussian1D(0.0, -1.0)


class TestGaussianMixture1D:
    MIX = GaussianMixture1D((0.3, 0.7), (-2.0, 1.0), (0.5, 1.5))

    def test_logpdf_matches_scipy(self):
        xs = np.linspace(-6, 6, 61)
        ref = np.log(0.3 * stats.norm.pdf(xs, -2.0, 0.5)
                     + 0.7 * stats.norm.pdf(xs, 1.0, 1.5))
        ours = [self.MIX.logpdf(x) for x in xs]
        np.testing.assert_allclose(ours, ref, rtol=1e-12)

    def test_moments(self):
        # E[X] = sum w_k m_k; E[X^2] = sum w_k (s_k^2 + m_k^2)
        assert self.MIX.mean() == pytest.approx(0.3 * -2.0 + 0.7 * 1.0)
        second = 0.3 * (0.25 + 4.0) + 0.7 * (2.25 + 1.0)
        assert self.MIX.variance() == pytest.approx(second - self.MIX.mean() ** 2)

    def test_sampling(self):
        draws = self.MIX.sample(RngStream(1, 200), size=20000)

        def cdf(x):
            return (0.3 * stats.norm.cdf(x, -2.0, 0.5)
                    + 0.7 * stats.norm.cdf(x, 1.0, 1.5))

        assert_gof_cdf(draws, cdf)

    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianMixture1D((0.5, 0.4), (0.0, 1.0), (1.0, 1.0))
        with pytest.raises(ValueError):
            GaussianMixture1D((0.5, 0.5), (0.0, 1.0), (1.0, -1.0))
        with pytest.raises(ValueError):
            GaussianMixture1D((0.5, 0.5), (0.0,), (1.0, 1.0))


def test_scalar_target_wraps_logpdf():
    t = scalar_target(Gaussian1D(0.0, 1.0))
    assert t.dim == 1
    assert t(np.array([0.5])) == pytest.approx(stats.norm.logpdf(0.5))


class TestProductTarget:
    def test_components_sum_to_density(self):
        t = product_target(Gaussian1D(0.5, 2.0), 4)
        assert t.component_count == 4
        z = RngStream(2, 200).normal(size=4)
        total = sum(c(z) for c in t.components)
        assert total == pytest.approx(t(z), rel=1e-12)

    def test_permutation_invariance(self):
        t = product_target(Gaussian1D(0.0, 1.0), 5)
        z = RngStream(3, 200).normal(size=5)
        assert t(z) == pytest.approx(t(z[::-1].copy()), rel=1e-12)

    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            product_target(Gaussian1D(), 0)


# ---------------------------------------------------------------------------
# constrained diffusion bridge

class TestWrightFisher:
    def test_zero_latent_gives_flat_path(self):
        m = WrightFisherBridge()
        path = wf_forward(np.zeros(m.dim), m)
        assert np.all(path == 0.5)
        # flat path at 0.5 dodges the (0.6, 0.9) band and sits on the anchor
        assert math.isfinite(wf_log_target(np.zeros(m.dim), m))

    def test_forward_shape_guard(self):
        with pytest.raises(ValueError):
            wf_forward(np.zeros(3), WrightFisherBridge())

    def test_fused_target_matches_reference(self):
        m = WrightFisherBridge()
        t = wf_target(m)
        rng = RngStream(4, 200)
        checked_finite = 0
        for _ in range(200):
            z = 0.8 * rng.normal(size=m.dim)
            a = wf_log_target(z, m)
            b = t(z)
            if a == -math.inf:
                assert b == -math.inf
            else:
                assert b == pytest.approx(a, abs=1e-12)
                checked_finite += 1
        assert checked_finite > 20

    def test_soft_constraint_penalizes_instead_of_vetoing(self):
        hard = WrightFisherBridge()
        soft = WrightFisherBridge(soft_constraint_scale=50.0)
        rng = RngStream(5, 200)
        found = 0
        for _ in range(500):
            z = rng.normal(size=hard.dim)
            if wf_log_target(z, hard) == -math.inf:
                lp = wf_log_target(z, soft)
                assert math.isfinite(lp)
                # removing the band entirely must give an even higher value
                free = WrightFisherBridge(forbidden_lo=None, forbidden_hi=None)
                assert lp < wf_log_target(z, free)
                found += 1
        assert found > 10

    def test_path_density_hand_value(self):
        # two-step bridge, no band: scipy composes the transition and
        # anchor terms directly
        m = WrightFisherBridge(dim=2, anchor_index=2,
                               forbidden_lo=None, forbidden_hi=None)
        x = np.array([0.46, 0.55])
        expect = (
            stats.norm.logpdf(x[0], 0.5, math.sqrt(0.05 * 0.5 * 0.5))
            + stats.norm.logpdf(x[1], x[0], math.sqrt(0.05 * x[0] * (1 - x[0])))
            + stats.norm.logpdf(x[1], 0.5, 0.05))
        assert wf_path_log_density(x, m) == pytest.approx(expect, rel=1e-12)

    def test_path_density_band_veto(self):
        m = WrightFisherBridge(dim=8, anchor_index=8, forbidden_start=3,
                               forbidden_end=5, forbidden_lo=0.6,
                               forbidden_hi=0.9)
        ok = np.full(8, 0.5)
        assert math.isfinite(wf_path_log_density(ok, m))
        bad = ok.copy()
        bad[3] = 0.7    # coordinate 4 lies in the forbidden stretch
        assert wf_path_log_density(bad, m) == -math.inf
        outside = ok.copy()
        outside[0] = 0.7  # same value outside the stretch is fine
        assert math.isfinite(wf_path_log_density(outside, m))

    def test_path_density_boundary_veto(self):
        m = WrightFisherBridge(dim=2, anchor_index=2,
                               forbidden_lo=None, forbidden_hi=None)
        assert wf_path_log_density(np.array([0.0, 0.5]), m) == -math.inf
        assert wf_path_log_density(np.array([0.5, 1.0]), m) == -math.inf

    def test_latent_and_path_verdicts_agree(self):
        # hard-constraint verdict must be the same whether judged in latent
        # space or on the pushed-forward path (away from the clip boundary)
        m = WrightFisherBridge()
        tp = wf_path_target(m)
        rng = RngStream(6, 200)
        agreements = 0
        for _ in range(300):
            z = 0.7 * rng.normal(size=m.dim)
            path = wf_forward(z, m)
            if np.any(path <= 0.0) or np.any(path >= 1.0):
                continue
            lat = wf_log_target(z, m)
            pat = tp(path)
            assert (lat == -math.inf) == (pat == -math.inf)
            agreements += 1
        assert agreements > 100

    def test_slice_chain_stays_feasible(self):
        m = WrightFisherBridge()
        t = wf_target(m)
        k = core.slice_kernel(t, width=1.0)
        trace = core.run_chain(k, np.zeros(m.dim), 50, RngStream(7, 200))
        for z in trace:
            assert math.isfinite(t(z))

    def test_field_validation(self):
        with pytest.raises(ValueError):
            WrightFisherBridge(x_init=0.0)
        with pytest.raises(ValueError):
            WrightFisherBridge(delta=0.0)
        with pytest.raises(ValueError):
            WrightFisherBridge(anchor_index=21)

    def test_config_round_trip(self):
        m = WrightFisherBridge(dim=6, anchor_index=6, soft_constraint_scale=10.0)
        cfg = wf_to_config(m)
        assert wf_from_config(cfg) == m
        with pytest.raises(ValueError):
            wf_from_config({"dim": 6, "bogus": 1})


def test_path_csv_golden(tmp_path):
    f = tmp_path / "path.csv"
    models.write_path_csv(f, [0.5, 0.25])
    assert f.read_text() == "i,x_i\n1,0.5\n2,0.25\n"


# ---------------------------------------------------------------------------
# finite-state oracles

class TestDiscreteOracle:
    P_TARGET = np.array([0.5, 0.25, 0.125, 0.0625, 0.0625])
    P_PROP = np.array([0.2, 0.2, 0.2, 0.2, 0.2])

    def test_rows_are_stochastic(self):
        P = discrete_transition_oracle(self.P_TARGET, self.P_PROP)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)
        assert np.all(P >= 0)

    def test_detailed_balance(self):
        P = discrete_transition_oracle(self.P_TARGET, self.P_PROP)
        flow = self.P_TARGET[:, None] * P
        np.testing.assert_allclose(flow, flow.T, atol=1e-15)

    def test_stationary_matches_target(self):
        P = discrete_transition_oracle(self.P_TARGET, self.P_PROP)
        pi = stationary_distribution(P)
        np.testing.assert_allclose(pi, self.P_TARGET, atol=1e-10)

    def test_validation(self):
        with pytest.raises(ValueError):
            discrete_transition_oracle([0.5, 0.5], [1.0, 0.0])
        with pytest.raises(ValueError):
            discrete_transition_oracle([0.6, 0.5], [0.5, 0.5])
        with pytest.raises(ValueError):
            discrete_transition_oracle([1.0], [1.0])
        with pytest.raises(ValueError):
            discrete_transition_oracle([0.5, 0.5], [0.5, 0.4, 0.1])

    def test_discrete_target_encoding(self):
        t = discrete_target([0.75, 0.25])
        assert t(np.array([0.0])) == pytest.approx(math.log(0.75))
        assert t(np.array([1.0])) == pytest.approx(math.log(0.25))
        assert t(np.array([2.0])) == -math.inf
        assert t(np.array([-1.0])) == -math.inf
