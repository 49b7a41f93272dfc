"""
Tests for run configuration loading
"""

import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

from .config import ConfigError, ScaleAgentConfig, parse_flat


class TestParseFlat(unittest.TestCase):
    """key = value parsing"""

    def test_typed_values(self):
        config = parse_flat("seed = 3\nagent.gamma = 0.5  # discount\nflag = true\nwidths = [4, 8]\nname = run\n")
        self.assertEqual(config, {"seed": 3, "agent": {"gamma": 0.5}, "flag": True, "widths": [4, 8],
                                  "name": "run"})

    def test_comments_and_blanks(self):
        self.assertEqual(parse_flat("# only a comment\n\n   \n"), {})

    def test_missing_separator(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_flat("seed 3", "run.conf")
        self.assertIn("run.conf:1", str(ctx.exception))

    def test_empty_value(self):
        with self.assertRaises(ConfigError):
            parse_flat("seed =")

    def test_section_clash(self):
        with self.assertRaises(ConfigError):
            parse_flat("agent = 1\nagent.gamma = 0.5")


class TestScaleAgentConfig(unittest.TestCase):
    """File, environment and flag layering"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def write(self, name: str, text: str) -> str:
        path = os.path.join(self.temp_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    @patch.dict(os.environ, {}, clear=True)
    def test_defaults(self):
        run = ScaleAgentConfig().run
        self.assertEqual((run.pretrain_steps, run.agent_steps, run.joint_steps, run.interval), (3000, 3000, 2000, 100))
        self.assertEqual((run.agent.gamma, run.agent.n_steps, run.agent.value_coef, run.agent.entropy_coef),
                         (0.99, 5, 0.5, 0.0))
        self.assertEqual(run.agent.actions, 6)

    @patch.dict(os.environ, {}, clear=True)
    def test_flat_file(self):
        path = self.write("run.conf", "seed = 9\nsegnet.widths = [8, 16]\npatch_h = 32\npatch_w = 32\n")
        run = ScaleAgentConfig(path).run
        self.assertEqual(run.seed, 9)
        self.assertEqual(run.segnet.widths, [8, 16])

    @patch.dict(os.environ, {}, clear=True)
    def test_yaml_file(self):
        path = self.write("run.yaml", "seed: 4\nagent:\n  gamma: 0.9\n")
        run = ScaleAgentConfig(path).run
        self.assertEqual((run.seed, run.agent.gamma), (4, 0.9))

    @patch.dict(os.environ, {"SCALEAGENT_AGENT__GAMMA": "0.8", "SCALEAGENT_SLOW_TESTS": "1"}, clear=True)
    def test_env_override(self):
        self.assertEqual(ScaleAgentConfig().run.agent.gamma, 0.8)

    @patch.dict(os.environ, {"SCALEAGENT_SEED": "5"}, clear=True)
    def test_flag_beats_env(self):
        config = ScaleAgentConfig(overrides={"seed": 6, "out": None})
        self.assertEqual(config.run.seed, 6)
        self.assertEqual(config.get("seed"), 6)
        self.assertEqual(config.get("agent.gamma"), 0.99)
        self.assertIsNone(config.get("agent.missing"))

    @patch.dict(os.environ, {}, clear=True)
    def test_invalid_values(self):
        for text in ("interval = 0\n", "pretrain_steps = -1\n", "patch_h = 30\n", "bogus = 1\n",
                     "agent.in_channels = 4\n"):
            path = self.write("bad.conf", text)
            with self.assertRaises(ConfigError, msg=text):
                ScaleAgentConfig(path)

    @patch.dict(os.environ, {}, clear=True)
    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            ScaleAgentConfig(os.path.join(self.temp_dir, "none.conf"))

    @patch.dict(os.environ, {}, clear=True)
    def test_scene_seed_follows_run(self):
        config = ScaleAgentConfig(overrides={"seed": 12})
        self.assertEqual(config.get_scene_config().seed, 12)
        self.assertEqual(str(config.get_out_dir()), "runs/default")
        self.assertEqual(config.to_dict()["seed"], 12)

    @patch.dict(os.environ, {}, clear=True)
    def test_shipped_configs(self):
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        for name in ("scaleagent.yaml", "smoke.conf"):
            path = os.path.join(root, "config", name)
            if os.path.exists(path):
                ScaleAgentConfig(path)


if __name__ == '__main__':
    unittest.main()
