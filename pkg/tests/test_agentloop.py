'''
Created on Oct 18, 2026

'''
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

import actinf as af
import actinf.agentloop as al
from actinf.diffcore import ShapeError
from actinf.genmodel import GenerativeModel, ModelConfig, TrainConfig
from actinf.planner import PlannerConfig

TINY_TRAIN = TrainConfig(batches=5, batch_size=16)


def tiny_agent(kind=al.ACTIVE_INFERENCE, info_gain_weight=1.0, noise_variance=0.3):
    planner = PlannerConfig(H=3, N=20, M=4, I=2, B=2, J=2, info_gain_weight=info_gain_weight)
    return al.AgentConfig(kind, noise_variance, planner, ModelConfig(hidden=(8, 8), reward_hidden=(8,)))


class FailingCar(af.MountainCar):
    """Mountain car that breaks down after a fixed number of steps."""

    def __init__(self, fail_after, max_steps=10):
        super().__init__(max_steps=max_steps)
        self.fail_after = fail_after
        self.count = 0

    def _step(self, action):
        self.count += 1
        if self.count > self.fail_after:
            raise RuntimeError("simulator crashed")
        return super()._step(action)


def transition(episode=0, step=0, state=(0.0, 0.0), next_state=(0.1, 0.0), reward=0.0):
    return al.Transition(np.array(state), np.array([0.5]), np.array(next_state), reward, False, episode, step)


class Test(unittest.TestCase):

    def test_stream_independence(self):
        a = al.stream(1, 2).standard_normal(4)
        np.testing.assert_array_equal(a, al.stream(1, 2).standard_normal(4))
        self.assertFalse(np.array_equal(a, al.stream(1, 3).standard_normal(4)))
        self.assertNotEqual(al.env_seed(1, 0), al.env_seed(1, 1))

    def test_buffer_episodes(self):
        buffer = al.ReplayBuffer(2, 1)
        buffer.add_episode([transition(0, 0), transition(0, 1)])
        buffer.append(transition(1, 0))
        self.assertEqual(len(buffer), 3)
        self.assertEqual(buffer.episodes, 2)
        self.assertEqual(len(buffer.episode(0)), 2)
        with self.assertRaises(ValueError):
            buffer.append(transition(3, 0))
        with self.assertRaises(ValueError):
            buffer.append(transition(0, 5))

    def test_buffer_rejects_bad_transitions(self):
        buffer = al.ReplayBuffer(2, 1)
        with self.assertRaises(ShapeError):
            buffer.append(transition(state=(0.0, 0.0, 0.0)))
        with self.assertRaises(ValueError):
            buffer.append(transition(reward=float("nan")))
        self.assertEqual(len(buffer), 0)

    def test_buffer_statistics(self):
        rng = np.random.default_rng(0)
        buffer = al.ReplayBuffer(2, 1)
        for i in range(100):
            buffer.append(al.Transition(rng.normal(size=2), rng.normal(size=1), rng.normal(size=2) + 3.0,
                                        float(rng.normal()), False, 0, i))
        states, actions, next_states, rewards = buffer.arrays()
        stats = buffer.statistics()
        both = np.concatenate([states, next_states])
        np.testing.assert_allclose(stats["state_mean"], both.mean(axis=0))
        np.testing.assert_allclose(stats["state_std"], both.std(axis=0))
        np.testing.assert_allclose(stats["action_std"], actions.std(axis=0))
        self.assertAlmostEqual(stats["reward_mean"], float(rewards.mean()), 12)

    def test_buffer_sample(self):
        buffer = al.ReplayBuffer(2, 1)
        with self.assertRaises(ValueError):
            buffer.sample(4, np.random.default_rng(0))
        buffer.append(transition())
        states, _, _, rewards = buffer.sample(4, np.random.default_rng(0))
        self.assertEqual(states.shape, (4, 2))
        self.assertEqual(rewards.shape, (4,))

    def test_coverage_single_transition(self):
        grid = al.CoverageGrid()
        al.coverage_update(grid, [transition(state=(-0.5, 0.0), next_state=(-0.5, 0.0))])
        self.assertEqual(grid.fraction, 1 / 32 ** 2)
        al.coverage_update(grid, [transition(state=(-0.5, 0.0), next_state=(-0.5, 0.0))])
        self.assertEqual(grid.fraction, 1 / 32 ** 2)
        self.assertEqual(int(grid.frame()["count"].sum()), 4)

    def test_coverage_counts_reset_state(self):
        grid = al.CoverageGrid()
        al.coverage_update(grid, [transition(state=(-1.1, -0.06), next_state=(0.5, 0.06))])
        self.assertEqual(grid.visited, 2)
        self.assertEqual(grid.counts[1, 2], 1)
        self.assertEqual(grid.counts[30, 29], 1)
        # later steps of an episode only add their next state
        al.coverage_update(grid, [transition(step=3, state=(0.0, 0.0), next_state=(0.5, 0.06))])
        self.assertEqual(grid.visited, 2)
        self.assertEqual(grid.counts[30, 29], 2)

    def test_coverage_clamps_outside_states(self):
        grid = al.CoverageGrid(resolution=4)
        with self.assertLogs("actinf.agentloop", level="WARNING"):
            grid.mark([5.0, -1.0])
        self.assertEqual(grid.clamped, 1)
        self.assertEqual(grid.counts[3, 0], 1)

    def test_coverage_occupancy(self):
        G = 32
        rng = np.random.default_rng(1)
        for n in (G * G, 10 * G * G):
            grid = al.CoverageGrid(G)
            for s in rng.uniform(grid.low, grid.high, size=(n, 2)):
                grid.mark(s)
            p = 1.0 - (1.0 - 1.0 / G ** 2) ** n
            sigma = np.sqrt(p * (1.0 - p) / G ** 2)
            self.assertLessEqual(abs(grid.fraction - p), 3 * sigma + 1.0 / G ** 2, f"n={n}")

    def test_perturb_variance(self):
        rng = np.random.default_rng(2)
        draws = np.array([al.perturb_action(np.zeros(2), 0.3, rng) for _ in range(10 ** 4)])
        np.testing.assert_allclose(draws.var(axis=0), [0.3, 0.3], rtol=0.05)
        np.testing.assert_array_equal(al.perturb_action([0.2], 0.0, None), [0.2])

    def test_epsilon_greedy_clamped(self):
        model = GenerativeModel(2, 1, ModelConfig(hidden=(8,), reward_hidden=(8,)), rng=np.random.default_rng(0))
        agent = tiny_agent(al.EPSILON_GREEDY, noise_variance=100.0)
        for seed in range(10):
            action = al.select_action(agent, model, [-0.5, 0.0], np.random.default_rng(seed))
            self.assertTrue(np.all(np.abs(action) <= 1.0))

    def test_planner_for_reward_agents(self):
        spec = af.MountainCar().spec
        self.assertEqual(tiny_agent(al.REWARD_ONLY).planner_for(spec).info_gain_weight, 0.0)
        self.assertEqual(tiny_agent().planner_for(spec).info_gain_weight, 1.0)
        with self.assertRaises(ValueError):
            al.AgentConfig(kind="curious")

    def test_one_epoch_buffer(self):
        record = al.run_experiment(af.MountainCar(max_steps=10), tiny_agent(), 1, seed=0, train_config=TINY_TRAIN)
        self.assertEqual(record.buffer.episodes, 6)
        self.assertEqual(len(record.buffer), 60)
        frame = record.frame()
        self.assertEqual(list(frame.columns),
                         ["epoch", "return", "length", "transitions", "state_kl", "parameter_kl", "reward_nll",
                          "observation_nll", "total", "parameter_uncertainty", "coverage"])

    def test_buffer_grows_by_episode_length(self):
        record = al.run_experiment(af.MountainCar(max_steps=10), tiny_agent(), 3, seed=1,
                                   train_config=TINY_TRAIN, coverage=al.CoverageGrid())
        frame = record.frame()
        self.assertTrue(np.all(np.diff(frame["transitions"]) == frame["length"].iloc[1:].to_numpy()))
        self.assertTrue(np.all(np.diff(frame["coverage"]) >= 0))
        self.assertEqual(record.coverage.history, frame["coverage"].tolist())

    def test_reproducible(self):
        runs = [al.run_experiment(af.MountainCar(max_steps=10), tiny_agent(), 2, seed=5,
                                  train_config=TINY_TRAIN, trace=True) for _ in range(2)]
        pd.testing.assert_frame_equal(runs[0].frame(), runs[1].frame())
        self.assertEqual(runs[0].steps, runs[1].steps)

    def test_info_gain_ablation(self):
        env = af.MountainCar(max_steps=10)
        active = al.run_experiment(env, tiny_agent(info_gain_weight=0.0), 2, seed=3,
                                   train_config=TINY_TRAIN, trace=True)
        reward = al.run_experiment(env, tiny_agent(al.REWARD_ONLY), 2, seed=3, train_config=TINY_TRAIN, trace=True)
        self.assertEqual(active.actions(), reward.actions())

    def test_zero_noise_epsilon_greedy(self):
        env = af.MountainCar(max_steps=10)
        greedy = al.run_experiment(env, tiny_agent(al.EPSILON_GREEDY, noise_variance=0.0), 2, seed=4,
                                   train_config=TINY_TRAIN, trace=True)
        reward = al.run_experiment(env, tiny_agent(al.REWARD_ONLY), 2, seed=4, train_config=TINY_TRAIN, trace=True)
        self.assertEqual(greedy.actions(), reward.actions())

    def test_record_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            al.run_experiment(af.MountainCar(max_steps=10), tiny_agent(), 1, seed=2, train_config=TINY_TRAIN,
                              coverage=al.CoverageGrid(), out_dir=tmp, prefix="seed_2", trace=True,
                              keep_model=True)
            for name in ("seed_2.csv", "timing_seed_2.csv", "coverage_seed_2.csv", "trace_seed_2.jsonl",
                         "model_seed_2.npz"):
                self.assertTrue(os.path.exists(os.path.join(tmp, name)), name)
            metadata, frame = al.read_record_csv(os.path.join(tmp, "seed_2.csv"))
        self.assertEqual(metadata["seed"], 2)
        self.assertEqual(metadata["coverage_resolution"], 32)
        self.assertEqual(len(frame), 1)

    def test_unreadable_record(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "broken.csv")
            with open(path, "w") as fh:
                fh.write("# seed: 1\nfoo,bar\n1,2\n")
            with self.assertRaises(ValueError) as ctx:
                al.read_record_csv(path)
            self.assertIn(path, str(ctx.exception))

    def test_abort_writes_partial_record(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(RuntimeError):
                al.run_experiment(FailingCar(fail_after=55), tiny_agent(), 2, seed=0,
                                  train_config=TINY_TRAIN, out_dir=tmp, prefix="seed_0")
            self.assertTrue(os.path.exists(os.path.join(tmp, "seed_0.csv")))


if __name__ == "__main__":
    unittest.main()
