"""
Tests for the scale-agent command line
"""

import contextlib
import io
import os
import shutil
import tempfile
import unittest

import numpy as np

from ..internal.formats import load_pnm, save_tensor
from .root import COMMANDS, HANDLERS, execute, new_root_cmd

TINY = """
seed = 0
train_scenes = 2
test_scenes = 1
patch_h = 16
patch_w = 16
thumb_h = 16
thumb_w = 16
scene.height = 64
scene.width = 64
scene.patch_hint = 16
scene.pond_count = [1, 2]
scene.lake_count = [1, 1]
scene.built_count = [1, 2]
segnet.widths = [4, 8]
segnet.fusion_channels = 8
agent.actions = 4
agent.widths = [4, 8]
agent.index_channels = 8
pretrain_steps = 3
agent_steps = 3
joint_steps = 4
interval = 2
batch_size = 1
log_every = 1
random_seeds = [0, 1]
"""


class TestRootCmd(unittest.TestCase):
    """Test cases for the root command"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.out = os.path.join(self.temp_dir, "run")
        self.config = os.path.join(self.temp_dir, "tiny.conf")
        with open(self.config, "w", encoding="utf-8") as f:
            f.write(TINY)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def run_cli(self, *args):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            code = execute(list(args) + ["--config", self.config, "--out", self.out, "--quiet"])
        return code, stdout.getvalue(), stderr.getvalue()

    def test_subcommands(self):
        self.assertEqual(sorted(COMMANDS), sorted(HANDLERS))
        parser = new_root_cmd()
        parsed = parser.parse_args(["pretrain", "--seed", "7", "--out", "x", "--stop-after", "2"])
        self.assertEqual((parsed.command, parsed.seed, parsed.out, parsed.stop_after), ("pretrain", 7, "x", 2))
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit):
                parser.parse_args([])

    def test_malformed_config(self):
        with open(self.config, "w", encoding="utf-8") as f:
            f.write("this line has no separator\n")
        code, _, err = self.run_cli("pretrain")
        self.assertEqual(code, 2)
        self.assertTrue(err.startswith("[Config Error]"))
        self.assertEqual(len(err.strip().splitlines()), 1)

    def test_unknown_key(self):
        with open(self.config, "a", encoding="utf-8") as f:
            f.write("segnet.depth = 3\n")
        code, _, err = self.run_cli("grad-check")
        self.assertEqual(code, 2)
        self.assertIn("segnet.depth", err)

    def test_missing_config_file(self):
        with contextlib.redirect_stderr(io.StringIO()) as err:
            code = execute(["eval", "--pred", "a", "--truth", "b", "--config",
                            os.path.join(self.temp_dir, "none.conf"), "--quiet"])
        self.assertEqual(code, 2)
        self.assertIn("not found", err.getvalue())

    def test_eval(self):
        truth = os.path.join(self.temp_dir, "truth.gatn")
        pred = os.path.join(self.temp_dir, "pred.gatn")
        save_tensor(truth, np.array([[0, 0], [1, 1]], dtype=np.uint8))
        save_tensor(pred, np.array([[0, 1], [1, 1]], dtype=np.uint8))
        code, out, _ = self.run_cli("eval", "--pred", pred, "--truth", truth, "--classes", "2")
        self.assertEqual(code, 0)
        self.assertEqual(out.splitlines(), ["miou\t0.5833", "mf1\t0.7333", "score\t1.3167"])

    def test_eval_shape_mismatch(self):
        truth = os.path.join(self.temp_dir, "truth.gatn")
        pred = os.path.join(self.temp_dir, "pred.gatn")
        save_tensor(truth, np.zeros((2, 2), dtype=np.uint8))
        save_tensor(pred, np.zeros((2, 3), dtype=np.uint8))
        code, _, err = self.run_cli("eval", "--pred", pred, "--truth", truth)
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("Error:"))

    def test_pretrain_without_dataset(self):
        code, _, err = self.run_cli("pretrain")
        self.assertEqual(code, 1)
        self.assertIn("dataset", err)

    def test_grad_check(self):
        code, out, _ = self.run_cli("grad-check")
        self.assertEqual(code, 0)
        self.assertIn("segnet", out)
        self.assertIn("sca", out)

    def test_pipeline(self):
        self.assertEqual(self.run_cli("generate-data")[0], 0)
        self.assertTrue(os.path.exists(os.path.join(self.out, "train", "manifest.tsv")))
        self.assertTrue(os.path.exists(os.path.join(self.out, "test", "manifest.tsv")))
        self.assertEqual(self.run_cli("pretrain")[0], 0)
        self.assertEqual(self.run_cli("train-agent")[0], 0)
        self.assertEqual(self.run_cli("train-joint")[0], 0)
        for name in ("segnet.gack", "agent.gack", "segnet_joint.gack", "agent_joint.gack", "pretrain.csv",
                     "agent.csv", "joint.csv", "run.log", "events.json", "metrics.json"):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)), name)

        scene = os.path.join(self.out, "test", "scene_0000.raster.gatn")
        self.assertEqual(self.run_cli("map", scene, "--name", "held_out")[0], 0)
        self.assertEqual(load_pnm(os.path.join(self.out, "held_out.labels.pgm")).shape, (64, 64))

        code, out, _ = self.run_cli("ablate", "--policies", "local_only,fixed_2,random,learned,oracle")
        self.assertEqual(code, 0)
        with open(os.path.join(self.out, "ablation.tsv"), encoding="utf-8") as f:
            rows = f.read().splitlines()
        self.assertTrue(rows[0].startswith("policy\truns\tmiou"))
        self.assertEqual([r.split("\t")[0] for r in rows[1:]], ["local_only", "fixed_2", "random", "learned",
                                                                 "oracle"])
        self.assertEqual(rows[1].split("\t")[-2], "0.000000")

        code, _, _ = self.run_cli("export-action-map", "--scene", "0", "--policy", "fixed_3", "--name", "fixed")
        self.assertEqual(code, 0)
        painted = load_pnm(os.path.join(self.out, "fixed.actions.pgm"))
        np.testing.assert_array_equal(painted, 191)


if __name__ == '__main__':
    unittest.main()
