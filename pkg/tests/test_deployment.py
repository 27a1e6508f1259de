"""SNIS posteriors, posterior estimates, deployment metrics, calibration."""

import math
import multiprocessing

import numpy as np
import pytest

from maxeig.deployment import (
    DegeneratePosterior,
    EvalConfig,
    WeightedPosterior,
    aggregate_rows,
    calibration_series,
    posterior_estimates,
    run_deployment,
    snis_posterior,
    systematic_resample,
)
from maxeig.models import ContextPair, ContinuousBumpModel, Dataset, DiscreteQuadraticModel
from maxeig.rng import RngStream
from maxeig.trainer import ContinuousDesign, FixedDiscreteDesign


class _StubModel:
    """Fixed particles and likelihoods, for exact-weight checks."""

    action_kind = "continuous"
    param_dim = 1

    def __init__(self, particles, log_liks):
        self.particles = np.asarray(particles, dtype=np.float64)
        self.log_liks = np.asarray(log_liks, dtype=np.float64)

    def sample_prior(self, stream, n):
        assert n == len(self.particles)
        return self.particles

    def log_likelihood(self, dataset, psi):
        return self.log_liks


class TestSnisPosterior:
    def test_empty_dataset_uniform_weights(self):
        model = DiscreteQuadraticModel()
        empty = Dataset(np.empty(0), np.empty(0, dtype=np.int64), np.empty(0))
        post = snis_posterior(model, empty, 500, RngStream(60))
        np.testing.assert_allclose(post.weights, 1.0 / 500, rtol=1e-12)
        assert post.effective_sample_size == pytest.approx(500.0)

    def test_two_particles_likelihood_ratio_e(self):
        stub = _StubModel([[0.0], [1.0]], [1.0, 0.0])
        data = Dataset(np.zeros(1), np.zeros(1), np.zeros(1))
        post = snis_posterior(stub, data, 2, RngStream(61))
        e = math.e
        np.testing.assert_allclose(post.weights, [e / (1 + e), 1 / (1 + e)], rtol=1e-12)
        assert post.weights[0] == pytest.approx(0.7311, abs=1e-4)

    def test_weights_normalised_and_ess_in_range(self):
        model = DiscreteQuadraticModel()
        stream = RngStream(62)
        psi = model.sample_prior(stream.split("truth"), 1)
        contexts = np.linspace(-3, -1, 8)
        actions = stream.split("acts").integers(4, (8,))
        y = model.sample_outcomes(psi, actions, contexts, stream.split("y"))[0]
        post = snis_posterior(model, Dataset(contexts, actions, y), 4000, stream.split("p"))
        assert abs(post.weights.sum() - 1.0) < 1e-12
        assert abs(float(np.logaddexp.reduce(post.log_weights))) < 1e-10
        assert 1.0 <= post.effective_sample_size <= 4000.0

    def test_grid_quadrature_oracle(self):
        # 1-parameter location model: U[0.1, 1.1] prior, Gaussian outcomes
        from maxeig.selftest import _ToyLocationModel

        model = _ToyLocationModel()
        obs = np.array([0.40, 0.55])
        data = Dataset(np.zeros(2), np.zeros(2), obs)
        theta = np.linspace(0.1, 1.1, 10_001)
        logp = model.log_likelihood(data, theta[:, None])
        w = np.exp(logp - logp.max())
        w /= w.sum()
        quad_mean = float((w * theta).sum())
        post = snis_posterior(model, data, 20_000, RngStream(63))
        snis_mean = float((post.weights * post.particles[:, 0]).sum())
        assert abs(snis_mean - quad_mean) < 0.05

    def test_impossible_data_rejected(self):
        stub = _StubModel([[0.0], [1.0]], [-np.inf, -np.inf])
        data = Dataset(np.zeros(1), np.zeros(1), np.zeros(1))
        with pytest.raises(DegeneratePosterior):
            snis_posterior(stub, data, 2, RngStream(64))


class TestResamplingAndEstimates:
    def test_systematic_resample_splits_equal_weights_exactly(self):
        post = WeightedPosterior(np.array([[1.0], [3.0]]),
                                 np.log(np.array([0.5, 0.5])))
        draws = systematic_resample(post, 2000, RngStream(65))
        assert (draws == 1.0).sum() == 1000 and (draws == 3.0).sum() == 1000

    def test_degenerate_posterior_estimates(self):
        model = ContinuousBumpModel()
        psi = np.array([[0.5, 0.4, 0.3, 0.7]])
        post = WeightedPosterior(psi, np.zeros(1))
        cstar = np.array([-1.0, 2.0])
        m_hat, psi_hat, a_hat = posterior_estimates(model, post, cstar, 200, RngStream(66))
        np.testing.assert_allclose(m_hat, model.max_value(psi, cstar)[0], rtol=1e-12)
        np.testing.assert_allclose(psi_hat, psi[0], rtol=1e-12)
        np.testing.assert_allclose(a_hat, model.argmax_action(psi, cstar)[0], rtol=1e-12)

    def test_uniform_two_particle_continuous_action_mean(self):
        model = ContinuousBumpModel()
        # bump centres at c*=0 are psi0: optima 1.0 and 3.0
        particles = np.array([[1.0, 0.0, 0.0, 0.5], [3.0, 0.0, 0.0, 0.5]])
        post = WeightedPosterior(particles, np.log(np.full(2, 0.5)))
        _, _, a_hat = posterior_estimates(model, post, np.array([0.0]), 2000, RngStream(67))
        assert a_hat[0] == 2.0

    def test_discrete_action_is_argmax_of_posterior_mean_reward(self):
        model = DiscreteQuadraticModel()
        # anchors at c* = 3 are the second component per treatment; two
        # particles whose treatment means average to (10, 11, 0, 0)
        p1 = np.array([[9.0, 9.0, 14.0, 14.0, 0.0, 0.0, 0.0, 0.0]])
        p2 = np.array([[11.0, 11.0, 8.0, 8.0, 0.0, 0.0, 0.0, 0.0]])
        particles = np.vstack([p1, p2])
        post = WeightedPosterior(particles, np.log(np.full(2, 0.5)))
        _, _, a_hat = posterior_estimates(model, post, np.array([3.0]), 2000, RngStream(68))
        assert a_hat[0] == 1


class _FixedPriorDiscrete(DiscreteQuadraticModel):
    """Degenerate prior: every draw is the prior-mean parameter vector."""

    def sample_prior(self, stream, n):
        return np.tile(self.PRIOR_MEANS.reshape(1, 8), (n, 1))


class _FixedPriorContinuous(ContinuousBumpModel):
    PSI = np.array([0.7, 0.4, 0.2, 0.6])

    def sample_prior(self, stream, n):
        return np.tile(self.PSI, (n, 1))


class TestRunDeployment:
    def test_oracle_posterior_gives_perfect_metrics(self):
        contexts = ContextPair.mirrored(6)
        model = _FixedPriorDiscrete()
        design = FixedDiscreteDesign(np.array([0, 1, 2, 3, 0, 1]))
        cfg = EvalConfig(n_envs=5, snis_particles=50, posterior_draws=100)
        report = run_deployment(model, contexts, design, cfg, RngStream(70))
        # resampling means of identical particles round at ~1e-15
        assert report["mse_mstar_mean"] < 1e-24
        assert report["mse_psi_mean"] < 1e-24
        assert abs(report["regret_mean"]) < 1e-12
        assert report["mse_a_or_hitrate_mean"] == 1.0

        cont = _FixedPriorContinuous()
        contexts_c = ContextPair.with_midpoints(6)
        design_c = ContinuousDesign(np.linspace(-2, 2, 6), trainable=False)
        report_c = run_deployment(cont, contexts_c, design_c, cfg, RngStream(71))
        assert report_c["mse_mstar_mean"] < 1e-24
        assert report_c["mse_a_or_hitrate_mean"] < 1e-24
        assert abs(report_c["regret_mean"]) < 1e-12

    def test_regret_nonnegative_and_hit_rate_bounded(self):
        model = DiscreteQuadraticModel()
        contexts = ContextPair.mirrored(8)
        design = FixedDiscreteDesign(RngStream(72).integers(4, (8,)))
        cfg = EvalConfig(n_envs=30, snis_particles=1500, posterior_draws=300)
        report = run_deployment(model, contexts, design, cfg, RngStream(73))
        assert report["regret_mean"] >= 0.0
        assert 0.0 <= report["mse_a_or_hitrate_mean"] <= 1.0
        assert report["n_envs"] == 30 and report["n_failed"] == 0

    def test_parallel_matches_serial_exactly(self):
        model = DiscreteQuadraticModel()
        contexts = ContextPair.mirrored(5)
        design = FixedDiscreteDesign(np.array([0, 1, 0, 1, 2]))
        cfg = EvalConfig(n_envs=12, snis_particles=800, posterior_draws=200)
        serial = run_deployment(model, contexts, design, cfg, RngStream(74))
        with multiprocessing.get_context("fork").Pool(2) as pool:
            parallel = run_deployment(model, contexts, design, cfg, RngStream(74), pool=pool)
        assert serial == parallel

    def test_standard_error_scales_with_envs(self):
        model = DiscreteQuadraticModel()
        contexts = ContextPair.mirrored(5)
        design = FixedDiscreteDesign(np.array([0, 1, 0, 1, 2]))
        small = run_deployment(model, contexts, design,
                               EvalConfig(n_envs=120, snis_particles=400, posterior_draws=100),
                               RngStream(75))
        large = run_deployment(model, contexts, design,
                               EvalConfig(n_envs=240, snis_particles=400, posterior_draws=100),
                               RngStream(75))
        ratio = small["mse_mstar_se"] / large["mse_mstar_se"]
        assert math.sqrt(2.0) * 0.8 < ratio < math.sqrt(2.0) * 1.2


class TestAggregation:
    def test_order_independent_bitwise(self):
        stream = RngStream(76)
        rows = [{"env": i, "metric": float(stream.uniform(0, 10))} for i in range(50)]
        shuffled = [rows[i] for i in np.argsort(stream.uniform01((50,)))]
        a = aggregate_rows(rows)
        b = aggregate_rows(shuffled)
        assert a == b


class TestCalibration:
    def test_no_observations_recovers_prior_spread(self):
        model = ContinuousBumpModel()
        contexts = ContextPair(np.empty(0), np.empty(0))
        design = ContinuousDesign(np.empty(0), trainable=False)
        cfg = EvalConfig(n_envs=4, snis_particles=4000, posterior_draws=2000)
        series = calibration_series(model, contexts, design, cfg, RngStream(77))
        prior_std = math.sqrt(1.0 / 12.0)
        for rec in series:
            assert rec["posterior_std"] == pytest.approx(prior_std, abs=0.02)

    def test_rolling_mean_of_constant_is_constant(self):
        model = _FixedPriorContinuous()
        contexts = ContextPair.with_midpoints(4)
        design = ContinuousDesign(np.zeros(4), trainable=False)
        cfg = EvalConfig(n_envs=6, snis_particles=100, posterior_draws=50)
        series = calibration_series(model, contexts, design, cfg, RngStream(78))
        for rec in series:
            assert rec["l2_error_rolling"] == pytest.approx(rec["l2_error"], abs=1e-12)
            assert rec["l2_error"] == pytest.approx(0.0, abs=1e-12)

    def test_error_shrinks_with_more_experiments(self):
        model = ContinuousBumpModel()
        cfg = EvalConfig(n_envs=40, snis_particles=3000, posterior_draws=500)
        medians = []
        for size in (20, 60):
            contexts = ContextPair.with_midpoints(size)
            design = ContinuousDesign(
                np.clip(RngStream(79).normal(0.0, 1.0, (size,)), -4, 4), trainable=False
            )
            series = calibration_series(model, contexts, design, cfg, RngStream(80))
            medians.append(np.median([r["l2_error"] for r in series]))
        assert medians[1] < medians[0]
