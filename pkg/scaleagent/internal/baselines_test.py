"""
Tests for scale-selection policies and the evaluation harness
"""

import unittest

import numpy as np

from .baselines import (ContextOnly, FixedScale, Learned, LocalOnly, OracleScale, RandomScale, SingleBranch,
                        action_map, build_policy, evaluate_policy, export_action_map, infer, intensity_table,
                        run_episode, scale_intensity)
from .env import InMemoryScenes, SegmentationEnv
from .exceptions import DatasetError, DimensionError
from .sca import AgentConfig, ScaleControlAgent
from .segnet import SegNet, SegNetConfig
from .synthgeo import SceneConfig, generate_scene

SCENE = dict(height=64, width=64, patch_hint=16, pond_count=(1, 2), lake_count=(1, 1), built_count=(1, 2))
ACTIONS = 4


class TestBuildPolicy(unittest.TestCase):
    """Policy names"""

    def test_names(self):
        self.assertIsInstance(build_policy("local_only", ACTIONS), LocalOnly)
        self.assertEqual(build_policy("fixed_3", ACTIONS).scale, 3)
        self.assertIsInstance(build_policy("context_only_2", ACTIONS), ContextOnly)
        self.assertIsInstance(build_policy("random", ACTIONS), RandomScale)
        self.assertIsInstance(build_policy("oracle", ACTIONS), OracleScale)
        agent = ScaleControlAgent(AgentConfig(actions=ACTIONS, widths=[4], index_channels=4))
        self.assertIsInstance(build_policy("learned", ACTIONS, agent), Learned)
        self.assertIsInstance(build_policy("single_branch", ACTIONS, agent), SingleBranch)

    def test_errors(self):
        with self.assertRaises(DimensionError):
            build_policy("fixed_5", ACTIONS)
        with self.assertRaises(DimensionError):
            FixedScale(1)
        with self.assertRaises(DatasetError):
            build_policy("learned", ACTIONS)
        with self.assertRaises(DatasetError):
            build_policy("greedy_best", ACTIONS)

    def test_random_is_seeded(self):
        a, b = RandomScale(ACTIONS, seed=4), RandomScale(ACTIONS, seed=4)
        draws = [a.choose(None, t, None, None) for t in range(20)]
        self.assertEqual(draws, [b.choose(None, t, None, None) for t in range(20)])
        self.assertTrue(set(draws) <= set(range(1, ACTIONS + 1)))


class TestIntensity(unittest.TestCase):
    """Scale to grayscale table"""

    def test_table(self):
        self.assertEqual(intensity_table(6), [(1, 42), (2, 85), (3, 128), (4, 170), (5, 212), (6, 255)])

    def test_vectorised(self):
        np.testing.assert_array_equal(scale_intensity(np.array([[1, 4], [2, 4]]), 4), [[64, 255], [128, 255]])


class TestHarness(unittest.TestCase):
    """Evaluation over a shared grid and segmenter"""

    @classmethod
    def setUpClass(cls):
        cls.segnet = SegNet(SegNetConfig(classes=4, in_channels=3, widths=[4, 8], fusion_channels=8), seed=0)
        cls.scenes = InMemoryScenes([generate_scene(SceneConfig(seed=i, **SCENE)) for i in range(2)])
        cls.agent = ScaleControlAgent(AgentConfig(actions=ACTIONS, widths=[4, 8], index_channels=8), seed=0)

    def evaluate(self, policy, seeds=(0, 1, 2)):
        return evaluate_policy(policy, self.scenes, self.segnet, (16, 16), (16, 16), ACTIONS, 4, seeds=seeds)

    def test_local_only_zero_reward(self):
        report = self.evaluate(LocalOnly())
        self.assertEqual(len(report.scenes), 2)
        self.assertTrue((report.scenes["reward"] == 0.0).all())
        summary = report.summary()
        self.assertEqual(summary["reward"], 0.0)
        self.assertEqual(summary["runs"], 1)
        self.assertEqual(summary["score_std"], 0.0)

    def test_oracle_dominates_local(self):
        local = self.evaluate(LocalOnly()).scenes.set_index("scene")
        oracle = self.evaluate(OracleScale(ACTIONS)).scenes.set_index("scene")
        for scene in local.index:
            self.assertGreaterEqual(oracle.loc[scene, "mean_patch_reward"], 0.0)
        self.assertGreaterEqual(oracle["mean_patch_reward"].mean(), local["mean_patch_reward"].mean())

    def test_oracle_dominates_fixed(self):
        oracle = self.evaluate(OracleScale(ACTIONS)).scenes["mean_patch_reward"].mean()
        for scale in range(2, ACTIONS + 1):
            fixed = self.evaluate(FixedScale(scale)).scenes["mean_patch_reward"].mean()
            self.assertGreaterEqual(oracle, fixed - 1e-12)

    def test_random_runs_per_seed(self):
        report = self.evaluate(RandomScale(ACTIONS), seeds=(0, 1, 2))
        self.assertEqual(len(report.runs), 3)
        self.assertEqual(sorted(report.scenes["seed"].unique().tolist()), [0, 1, 2])
        summary = report.summary()
        self.assertIn("miou_std", summary)
        self.assertGreaterEqual(summary["miou_std"], 0.0)

    def test_learned_and_single_branch(self):
        for policy in (Learned(self.agent), SingleBranch(self.agent)):
            summary = self.evaluate(policy).summary()
            self.assertTrue(0.0 <= summary["miou"] <= 1.0)
            self.assertTrue(0.0 <= summary["mf1"] <= 1.0)

    def test_identical_grids(self):
        env = SegmentationEnv(self.scenes, self.segnet, (16, 16), (16, 16), ACTIONS, 4)
        first = run_episode(LocalOnly(), env, 0)
        second = run_episode(FixedScale(2), env, 0)
        self.assertEqual(first.grid.patches, second.grid.patches)
        self.assertEqual(first.actions, [1] * 16)
        self.assertEqual(second.actions, [2] * 16)

    def test_infer_matches_episode(self):
        env = SegmentationEnv(self.scenes, self.segnet, (16, 16), (16, 16), ACTIONS, 4)
        episode = run_episode(FixedScale(3), env, 1)
        raster, _ = self.scenes.load(1)
        mapped = infer(FixedScale(3), self.segnet, raster, (16, 16), (16, 16), 4)
        np.testing.assert_array_equal(mapped.probs, episode.probs)
        self.assertEqual(mapped.labels.shape, (64, 64))

    def test_action_maps(self):
        raster, _ = self.scenes.load(0)
        local = export_action_map(LocalOnly(), self.segnet, raster, (16, 16), (16, 16), 4)
        np.testing.assert_array_equal(local.data[0], 1.0)
        fixed = export_action_map(FixedScale(4), self.segnet, raster, (16, 16), (16, 16), 4)
        np.testing.assert_array_equal(fixed.data[0], 4.0)
        learned = infer(Learned(self.agent), self.segnet, raster, (16, 16), (16, 16), 4)
        painted = action_map(learned, raster.shape)
        self.assertEqual(painted.shape, (64, 64))
        self.assertTrue(set(np.unique(painted.data)) <= {1.0, 2.0, 3.0, 4.0})


if __name__ == '__main__':
    unittest.main()
