"""Training loop: schedules, Gumbel-Softmax policy, fitting, evaluation."""

import math

import numpy as np
import pytest

from maxeig import autodiff as ad
from maxeig.critic import SeparableCritic
from maxeig.models import ContextPair, ContinuousBumpModel, DiscreteQuadraticModel
from maxeig.rng import RngStream
from maxeig.trainer import (
    ContinuousDesign,
    DiscretePolicy,
    FixedDiscreteDesign,
    TrainConfig,
    TrainingDiverged,
    anneal_schedule,
    evaluate_bound,
    extract_design,
    fit,
    gumbel_softmax,
    init_continuous_design,
)


class TestAnnealSchedule:
    CFG = TrainConfig(steps=50_000, batch=8, tau_halve_every=10_000, hard_frac=0.8)

    def test_initial_temperature(self):
        assert anneal_schedule(0, self.CFG) == (2.0, False)

    def test_midway(self):
        assert anneal_schedule(20_000, self.CFG) == (0.5, False)

    def test_hard_switch_in_final_fifth(self):
        tau, hard = anneal_schedule(40_000, self.CFG)
        assert tau == pytest.approx(0.125) and hard is True

    def test_out_of_range_step(self):
        with pytest.raises(ValueError):
            anneal_schedule(50_000, self.CFG)


class TestGumbelSoftmax:
    def test_rows_sum_to_one(self):
        logits = RngStream(1).uniform(-2, 2, (40, 4))
        weights = gumbel_softmax(logits, 0.7, RngStream(2), hard=False)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_high_temperature_approaches_uniform(self):
        weights = gumbel_softmax(np.zeros((2000, 4)), 1e4, RngStream(3), hard=False)
        np.testing.assert_allclose(weights.mean(axis=0), 0.25, atol=0.01)
        assert np.abs(weights - 0.25).max() < 0.01

    def test_argmax_frequencies_match_softmax(self):
        logits = np.array([1.2, -0.3, 0.4, 0.0])
        target = ad.softmax(logits, axis=0)
        n = 40_000
        weights = gumbel_softmax(np.tile(logits, (n, 1)), 0.6, RngStream(4), hard=False)
        freq = np.bincount(weights.argmax(axis=1), minlength=4) / n
        np.testing.assert_allclose(freq, target, atol=0.02)

    def test_hard_mode_one_hot_forward(self):
        weights = gumbel_softmax(RngStream(5).uniform(-1, 1, (30, 4)), 0.5,
                                 RngStream(6), hard=True)
        assert set(np.unique(weights)) == {0.0, 1.0}
        np.testing.assert_array_equal(weights.sum(axis=1), 1.0)

    def test_hard_matches_soft_argmax(self):
        logits = RngStream(7).uniform(-1, 1, (30, 4))
        soft = gumbel_softmax(logits, 0.5, RngStream(8), hard=False)
        hard = gumbel_softmax(logits, 0.5, RngStream(8), hard=True)
        np.testing.assert_array_equal(hard.argmax(axis=1), soft.argmax(axis=1))

    def test_hard_mode_gradient_flows(self):
        tape = ad.Tape()
        logits = tape.leaf(np.zeros((5, 4)))
        weights = gumbel_softmax(logits, 1.0, RngStream(9), hard=True)
        grads = tape.backward(ad.reduce_sum(ad.mul(weights, np.arange(20.0).reshape(5, 4))))
        assert grads[logits].shape == (5, 4)
        assert np.any(grads[logits] != 0.0)

    def test_temperature_validation(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.zeros((2, 3)), 0.0, RngStream(10), hard=False)


class TestRelaxedOutcomes:
    model = DiscreteQuadraticModel()

    def test_one_hot_weights_match_concrete_treatments(self):
        stream = RngStream(11)
        psi = self.model.sample_prior(stream, 16)
        contexts = np.linspace(-3, -1, 5)
        treatments = np.array([0, 2, 1, 3, 1])
        weights = np.zeros((5, 4))
        weights[np.arange(5), treatments] = 1.0
        y_relaxed = self.model.sample_relaxed_outcomes(psi, weights, contexts, RngStream(12))
        y_concrete = self.model.sample_outcomes(psi, treatments, contexts, RngStream(12))
        np.testing.assert_array_equal(y_relaxed, y_concrete)

    def test_shared_mean_mixture(self):
        # treatments 0 and 1 share their anchor means at the prior mean
        psi = self.model.PRIOR_MEANS.reshape(1, 8)
        contexts = np.array([-2.0])
        weights = np.array([[0.5, 0.5, 0.0, 0.0]])
        mixed = self.model.relaxed_mean_reward(psi, weights, contexts)
        single = self.model.mean_reward(psi, np.array([0]), contexts)
        np.testing.assert_allclose(mixed, single, atol=1e-12)

    def test_mixture_gradient_is_mean_reward(self):
        psi = self.model.sample_prior(RngStream(13), 1)
        contexts = np.linspace(-3, -1, 4)
        tape = ad.Tape()
        weights = tape.leaf(np.full((4, 4), 0.25))
        mean = self.model.relaxed_mean_reward(psi, weights, contexts)
        grads = tape.backward(ad.reduce_sum(mean))
        np.testing.assert_allclose(
            grads[weights], self.model.mean_reward_all(psi, contexts)[0], atol=1e-12
        )


class TestExtractDesign:
    def test_logits_argmax(self):
        design = DiscretePolicy(np.array([[0.0, 5.0, -1.0, -1.0]]))
        assert extract_design(design).treatments.tolist() == [1]

    def test_tie_breaks_to_lowest_index(self):
        design = DiscretePolicy(np.zeros((3, 4)))
        assert extract_design(design).treatments.tolist() == [0, 0, 0]

    def test_continuous_passthrough(self):
        design = ContinuousDesign(np.array([0.5, -2.0]), trainable=False)
        out = extract_design(design)
        assert out.trainable is False
        np.testing.assert_array_equal(out.actions, [0.5, -2.0])

    def test_clip_applied_by_trainer_projection(self):
        model = ContinuousBumpModel()
        design = ContinuousDesign(np.array([4.7, 0.0]))
        np.clip(design.actions, *model.bounds, out=design.actions)
        assert design.actions[0] == 4.0


class TestFit:
    model = DiscreteQuadraticModel()
    contexts = ContextPair.mirrored(6)

    def _critic(self, seed=20):
        return SeparableCritic("discrete", 6, 6, RngStream(seed))

    def test_zero_steps_returns_inputs_unchanged(self):
        design = DiscretePolicy(np.zeros((6, 4)))
        critic = self._critic()
        before = [p.copy() for p in critic.parameters()]
        d, c, log = fit(self.model, self.contexts, design, critic,
                        TrainConfig(steps=0, batch=8), RngStream(21))
        assert d is design and c is critic and log.records == []
        for p, q in zip(critic.parameters(), before):
            np.testing.assert_array_equal(p, q)

    def test_zero_critic_produces_zero_design_gradients(self):
        design = DiscretePolicy(np.full((6, 4), 0.3))
        critic = self._critic().zero_parameters()
        cfg = TrainConfig(steps=1, batch=8, tau_halve_every=10, log_every=1,
                          bn_recal_batches=1)
        fit(self.model, self.contexts, design, critic, cfg, RngStream(22))
        np.testing.assert_array_equal(design.logits, np.full((6, 4), 0.3))

    def test_fixed_seed_reproduces_log_and_design(self):
        results = []
        for _ in range(2):
            design = DiscretePolicy(np.zeros((6, 4)))
            cfg = TrainConfig(steps=30, batch=16, tau_halve_every=10, log_every=10,
                              bn_recal_batches=2)
            d, c, log = fit(self.model, self.contexts, design, self._critic(), cfg,
                            RngStream(23))
            results.append((d.logits.copy(), log.records))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        assert results[0][1] == results[1][1]

    def test_design_kind_mismatch_rejected(self):
        with pytest.raises(TypeError):
            fit(self.model, self.contexts, ContinuousDesign(np.zeros(6)),
                self._critic(), TrainConfig(steps=1, batch=8), RngStream(24))

    def test_divergence_guard_reports_step(self):
        critic = self._critic()
        critic.encoder_y.layers[0].weight[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            fit(self.model, self.contexts, DiscretePolicy(np.zeros((6, 4))), critic,
                TrainConfig(steps=5, batch=8, tau_halve_every=10), RngStream(25))
        assert err.value.step == 0

    def test_continuous_actions_stay_in_bounds(self):
        model = ContinuousBumpModel()
        contexts = ContextPair.with_midpoints(5)
        critic = SeparableCritic("continuous", 5, 4, RngStream(26))
        design = init_continuous_design(model, 5, RngStream(27))
        cfg = TrainConfig(steps=40, batch=16, log_every=20)
        d, _, _ = fit(model, contexts, design, critic, cfg, RngStream(28))
        assert np.all(d.actions >= -4.0) and np.all(d.actions <= 4.0)

    def test_training_improves_bound_on_short_run(self):
        design = DiscretePolicy(np.zeros((6, 4)))
        cfg = TrainConfig(steps=600, batch=64, tau_halve_every=120, log_every=50)
        _, _, log = fit(self.model, self.contexts, design, self._critic(), cfg,
                        RngStream(29))
        bounds = log.bounds()
        assert bounds[-3:].mean() > bounds[:3].mean()
        assert np.all(bounds <= math.log(64) + 1e-9)


class TestEvaluateBound:
    def test_untrained_critic_estimate_within_noise_of_zero(self):
        # random encoders carry no pair information, so the bound sits at 0;
        # the continuous preset keeps score scales sane without training
        model = ContinuousBumpModel()
        contexts = ContextPair.with_midpoints(6)
        critic = SeparableCritic("continuous", 6, 5, RngStream(30))
        design = ContinuousDesign(np.linspace(-2, 2, 6), trainable=False)
        cfg = TrainConfig(steps=10, batch=32, eval_batches=40)
        mean, se = evaluate_bound(model, contexts, design, critic, cfg, RngStream(31))
        assert abs(mean) < 3 * se + 1e-6

    def test_estimate_below_log_batch(self):
        model = DiscreteQuadraticModel()
        contexts = ContextPair.mirrored(6)
        critic = SeparableCritic("discrete", 6, 6, RngStream(32))
        design = FixedDiscreteDesign(np.zeros(6, dtype=np.int64))
        cfg = TrainConfig(steps=10, batch=32, eval_batches=20)
        mean, _ = evaluate_bound(model, contexts, design, critic, cfg, RngStream(33))
        assert mean <= math.log(32)
