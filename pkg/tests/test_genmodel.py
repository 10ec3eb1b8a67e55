'''
Created on Oct 18, 2026

'''
import os
import tempfile
import unittest

import numpy as np

import actinf as af
import actinf.diffcore as dc
import actinf.genmodel as gm
from actinf.agentloop import ReplayBuffer, Transition

UNIT = float(gm.softplus_inverse(1.0 - gm.VARIANCE_FLOOR))


def linear_buffer(n, seed=0, noise=0.01):
    """Transitions of a fixed 2-D linear system from uniformly drawn states and actions."""
    rng = np.random.default_rng(seed)
    env = af.LinearSystem(noise_std=0.0)
    buffer = ReplayBuffer(2, 1)
    for i in range(n):
        s = rng.uniform(-1.0, 1.0, size=2)
        a = rng.uniform(-1.0, 1.0, size=1)
        nxt = env.transition(s, a) + noise * rng.standard_normal(2)
        buffer.append(Transition(s, a, nxt, -float(nxt @ nxt), False, 0, i))
    return buffer, env


def point_model(state_dim=1, action_dim=1, hidden=(4,), mean_bias=0.0, variance=1.0):
    """Point-mode model with zero weights predicting N(mean_bias, variance) everywhere."""
    model = gm.TransitionModel(state_dim, action_dim, hidden, gm.POINT_ESTIMATE,
                               rng=np.random.default_rng(0))
    for w in model.weights:
        w.values[...] = 0.0
    bias = np.concatenate([np.full(state_dim, mean_bias),
                           np.full(state_dim, gm.softplus_inverse(variance - gm.VARIANCE_FLOOR))])
    model.weights[-1].values[...] = bias
    return model


def one_batch(states, actions, next_states, rewards):
    return gm.TransitionBatch(np.atleast_2d(states), np.atleast_2d(actions),
                              np.atleast_2d(next_states), np.asarray(rewards, dtype=float))


class Test(unittest.TestCase):

    def test_architecture(self):
        model = gm.TransitionModel(2, 1, rng=np.random.default_rng(0))
        self.assertEqual(model.shapes[0], (3, 500))
        self.assertEqual(model.shapes[2], (500, 500))
        self.assertEqual(model.output_dim, 2)
        point = gm.TransitionModel(2, 1, mode=gm.POINT_ESTIMATE, rng=np.random.default_rng(0))
        self.assertEqual(point.output_dim, 4)

    def test_zero_weight_prediction(self):
        model = gm.TransitionModel(2, 1, (4, 4), rng=np.random.default_rng(0))
        for m in model.weights.means:
            m.values[...] = 0.0
        model.weights.means[-1].values[...] = [0.3, -0.2]
        model.sample_weights = False
        theta = model.sample_theta(np.random.default_rng(1))
        g = gm.predict_next_state(model, [0.5, -1.0], [0.7], theta)
        np.testing.assert_allclose(g.mean_values(), [[0.3, -0.2]])
        np.testing.assert_allclose(g.variance_values(), [[1.0, 1.0]])

    def test_theta_samples_differ(self):
        model = gm.TransitionModel(2, 1, (8, 8), rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        a = gm.predict_next_state(model, [0.5, -1.0], [0.7], model.sample_theta(rng)).mean_values()
        b = gm.predict_next_state(model, [0.5, -1.0], [0.7], model.sample_theta(rng)).mean_values()
        self.assertFalse(np.allclose(a, b))

    def test_point_variance_positive(self):
        model = gm.TransitionModel(2, 1, (8,), gm.POINT_ESTIMATE, rng=np.random.default_rng(0))
        model.weights[-1].values[...] = -50.0
        g = gm.predict_next_state(model, [0.0, 0.0], [0.0], model.sample_theta(None))
        self.assertTrue(np.all(g.variance_values() >= gm.VARIANCE_FLOOR))

    def test_predict_dimension_mismatch(self):
        model = gm.TransitionModel(2, 1, (4,), rng=np.random.default_rng(0))
        with self.assertRaises(dc.ShapeError):
            gm.predict_next_state(model, [0.0, 0.0, 0.0], [0.0], model.theta_values(deterministic=True))

    def test_state_kl_identity(self):
        model = point_model(mean_bias=0.7, variance=0.1)
        reward = gm.RewardModel(1, (4,), np.random.default_rng(0))
        maps = gm.ObservationMaps(recognition_variance=0.1)
        batch = one_batch([[0.1], [0.4]], [[0.0], [1.0]], [[0.7], [0.7]], [0.0, 1.0])
        terms, _ = gm.free_energy_batch(batch, model, reward, maps, rng=np.random.default_rng(0))
        self.assertAlmostEqual(terms.state_kl, 0.0, delta=1e-12)
        self.assertEqual(terms.parameter_kl, 0.0)

    def test_state_kl_hand_built(self):
        model = point_model(mean_bias=0.0, variance=1.0)
        reward = gm.RewardModel(1, (4,), np.random.default_rng(0))
        maps = gm.ObservationMaps(recognition_variance=1.0)
        batch = one_batch([[0.0]], [[0.0]], [[0.5]], [0.0])
        terms, _ = gm.free_energy_batch(batch, model, reward, maps, rng=np.random.default_rng(0))
        self.assertAlmostEqual(terms.state_kl, 0.125, 12)

    def test_parameter_kl_at_prior(self):
        model = gm.TransitionModel(2, 1, (4,), init_variance=1.0, rng=np.random.default_rng(0))
        for m in model.weights.means:
            m.values[...] = 0.0
        self.assertAlmostEqual(float(model.weights.kl_to_prior()), 0.0, delta=1e-10)
        self.assertAlmostEqual(gm.parameter_uncertainty(model), 1.0, 9)

    def test_terms_consistent(self):
        buffer, _ = linear_buffer(30)
        model = gm.GenerativeModel(2, 1, gm.ModelConfig(hidden=(8, 8), reward_hidden=(8,)),
                                   rng=np.random.default_rng(0))
        batch = gm.normalized_batch(model.normalizer, *buffer.arrays())
        terms, _ = gm.free_energy_batch(batch, model.transition, model.reward, model.maps, K=3,
                                        rng=np.random.default_rng(1), kl_weight=0.25)
        self.assertAlmostEqual(terms.total, terms.state_kl + 0.25 * terms.parameter_kl
                               + terms.reward_nll + terms.observation_nll, 9)
        self.assertGreaterEqual(terms.state_kl, 0.0)
        self.assertGreaterEqual(terms.parameter_kl, 0.0)
        self.assertEqual(terms.k_theta_samples, 3)
        masked, _ = gm.free_energy_batch(batch, model.transition, model.reward, model.maps, K=3,
                                         rng=np.random.default_rng(1), kl_weight=0.25, observation_nll=False)
        self.assertAlmostEqual(masked.total, terms.total - terms.observation_nll, 9)

    def test_gradients_match_finite_differences(self):
        buffer, _ = linear_buffer(12, seed=3)
        transition = gm.TransitionModel(2, 1, (8, 8), rng=np.random.default_rng(0))
        reward = gm.RewardModel(2, (8,), np.random.default_rng(1))
        maps = gm.ObservationMaps(1.0)
        batch = gm.TransitionBatch(*buffer.arrays())
        params = transition.parameters() + reward.parameters()

        def total():
            terms, _ = gm.free_energy_batch(batch, transition, reward, maps, K=2,
                                            rng=np.random.default_rng(42), kl_weight=0.3)
            return terms.total

        _, analytic = gm.free_energy_batch(batch, transition, reward, maps, K=2,
                                           rng=np.random.default_rng(42), kl_weight=0.3)
        numeric = dc.numerical_gradient(total, params, h=1e-5)
        self.assertLess(dc.relative_error(analytic, numeric), 1e-4)

    def test_mode_equivalence(self):
        buffer, _ = linear_buffer(20, seed=5)
        batch = gm.TransitionBatch(*buffer.arrays())
        bayes = gm.TransitionModel(2, 1, (8, 8), rng=np.random.default_rng(0))
        bayes.sample_weights = False
        point = gm.TransitionModel(2, 1, (8, 8), gm.POINT_ESTIMATE, rng=np.random.default_rng(9))
        means = bayes.weights.means
        for target, source in zip(point.weights[:-2], means[:-2]):
            target.values[...] = source.values
        point.weights[-2].values[...] = np.concatenate([means[-2].values, np.zeros((8, 2))], axis=1)
        point.weights[-1].values[...] = np.concatenate([means[-1].values, np.full(2, UNIT)])
        reward = gm.RewardModel(2, (8,), np.random.default_rng(1))
        maps = gm.ObservationMaps(1.0)
        a, _ = gm.free_energy_batch(batch, bayes, reward, maps, rng=np.random.default_rng(3), kl_weight=0.0)
        b, _ = gm.free_energy_batch(batch, point, reward, maps, rng=np.random.default_rng(3), kl_weight=0.0)
        self.assertAlmostEqual(a.state_kl, b.state_kl, delta=1e-10)

    def test_empty_batch(self):
        model = point_model()
        reward = gm.RewardModel(1, (4,), np.random.default_rng(0))
        empty = gm.TransitionBatch(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0))
        with self.assertRaises(ValueError):
            gm.free_energy_batch(empty, model, reward, gm.ObservationMaps())

    def test_training_reduces_free_energy(self):
        buffer, _ = linear_buffer(2000)
        model = gm.GenerativeModel(2, 1, gm.ModelConfig(hidden=(32, 32), reward_hidden=(32,)),
                                   rng=np.random.default_rng(0))
        trajectory = gm.train_epoch(buffer, model, gm.TrainConfig(batches=1000), np.random.default_rng(1))
        self.assertEqual(len(trajectory), 1000)
        self.assertEqual(list(trajectory.columns[:5]),
                         ["state_kl", "parameter_kl", "reward_nll", "observation_nll", "total"])
        self.assertLess(trajectory["total"].tail(10).mean(), trajectory["total"].head(10).mean())

    def test_one_step_prediction(self):
        buffer, env = linear_buffer(4000, noise=0.01)
        config = gm.ModelConfig(mode=gm.POINT_ESTIMATE, hidden=(32, 32), reward_hidden=(16,),
                                recognition_variance=1e-4)
        model = gm.GenerativeModel(2, 1, config, gm.TrainConfig(learning_rate=3e-3), np.random.default_rng(0))
        gm.train_epoch(buffer, model, gm.TrainConfig(batches=1000, learning_rate=3e-3),
                       np.random.default_rng(1))

        rng = np.random.default_rng(2)
        states = rng.uniform(-1.0, 1.0, size=(500, 2))
        actions = rng.uniform(-1.0, 1.0, size=(500, 1))
        truth = np.array([env.transition(s, a) for s, a in zip(states, actions)])
        norm = model.normalizer
        x = np.concatenate([norm.normalize_state(states), norm.normalize_action(actions)], axis=1)
        mean, _ = model.transition.predict_values(model.transition.theta_values(), x)
        mse = float(np.mean((mean - norm.normalize_state(truth)) ** 2))
        self.assertLess(mse, 1e-2)

    def test_zero_learning_rate(self):
        buffer, _ = linear_buffer(40)
        config = gm.TrainConfig(batches=5, learning_rate=0.0)
        model = gm.GenerativeModel(2, 1, gm.ModelConfig(hidden=(8,), reward_hidden=(8,)), config,
                                   np.random.default_rng(0))
        before = [p.values.copy() for p in model.parameters()]
        gm.train_epoch(buffer, model, config, np.random.default_rng(1))
        for old, p in zip(before, model.parameters()):
            np.testing.assert_array_equal(old, p.values)

    def test_batch_larger_than_buffer(self):
        buffer, _ = linear_buffer(3)
        model = gm.GenerativeModel(2, 1, gm.ModelConfig(hidden=(8,), reward_hidden=(8,)),
                                   rng=np.random.default_rng(0))
        trajectory = gm.train_epoch(buffer, model, gm.TrainConfig(batches=2, batch_size=50),
                                    np.random.default_rng(1))
        self.assertEqual(len(trajectory), 2)
        self.assertAlmostEqual(trajectory["kl_weight"].iloc[0], 50 / 3)

    def test_empty_buffer(self):
        model = gm.GenerativeModel(2, 1, gm.ModelConfig(hidden=(8,), reward_hidden=(8,)),
                                   rng=np.random.default_rng(0))
        try:
            gm.train_epoch(ReplayBuffer(2, 1), model)
        except ValueError:
            self.assertTrue(True, "Exception was expected and raised")
        else:
            self.assertTrue(False, "Exception was expected but was NOT raised")

    def test_parameter_uncertainty(self):
        model = gm.GenerativeModel(2, 1, gm.ModelConfig(hidden=(8,), reward_hidden=(8,)),
                                   rng=np.random.default_rng(0))
        self.assertAlmostEqual(gm.parameter_uncertainty(model), 0.05, 9)
        point = gm.GenerativeModel(2, 1, gm.ModelConfig(mode="point", hidden=(8,), reward_hidden=(8,)),
                                   rng=np.random.default_rng(0))
        with self.assertRaises(ValueError):
            gm.parameter_uncertainty(point)

    def test_posterior_contracts(self):
        buffer, _ = linear_buffer(20000, seed=11)
        for seed in range(5):
            config = gm.ModelConfig(hidden=(16, 16), reward_hidden=(16,), transition_variance=0.01)
            model = gm.GenerativeModel(2, 1, config, rng=np.random.default_rng(seed))
            rng = np.random.default_rng(100 + seed)
            gm.train_epoch(buffer, model, gm.TrainConfig(batches=100), rng)
            early = gm.parameter_uncertainty(model)
            gm.train_epoch(buffer, model, gm.TrainConfig(batches=4900), rng)
            self.assertLess(gm.parameter_uncertainty(model), early, f"seed {seed}")

    def test_normalizer_zero_variance(self):
        norm = gm.Normalizer(2, 1).fit({"state_mean": [1.0, 2.0], "state_std": [0.0, 2.0],
                                        "action_mean": [0.0], "action_std": [1.0],
                                        "reward_mean": 0.5, "reward_std": 0.0})
        np.testing.assert_allclose(norm.normalize_state([3.0, 4.0]), [2.0, 1.0])
        self.assertEqual(norm.denormalize_reward(1.0), 1.5)

    def test_checkpoint_round_trip(self):
        buffer, _ = linear_buffer(30)
        model = gm.GenerativeModel(2, 1, gm.ModelConfig(hidden=(8,), reward_hidden=(8,)),
                                   rng=np.random.default_rng(0))
        gm.train_epoch(buffer, model, gm.TrainConfig(batches=3), np.random.default_rng(1))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.npz")
            model.save(path)
            loaded = gm.GenerativeModel.load(path)
        self.assertEqual(loaded.mode, "bayesian")
        for a, b in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(loaded.normalizer.state_std, model.normalizer.state_std)
        self.assertEqual(loaded.optimizer.step_count, 3)

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            gm.ModelConfig(mode="ensemble")
        with self.assertRaises(ValueError):
            gm.TrainConfig(batch_size=0)


if __name__ == "__main__":
    unittest.main()
