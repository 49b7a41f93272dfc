"""
Tests for the finite-difference check suite
"""

import unittest

import numpy as np

from .gradcheck import TOLERANCE, check_primitives, run_grad_checks

PRIMITIVES = {"conv2d", "dense", "relu", "bilinear_resize", "nearest_upsample", "masked_gap", "cross_entropy"}


class TestRunGradChecks(unittest.TestCase):
    """Analytic gradients agree with central differences"""

    def test_all_components(self):
        results = run_grad_checks(seed=0)
        self.assertEqual(set(results), PRIMITIVES | {"segnet", "sca"})
        for name, err in results.items():
            self.assertTrue(np.isfinite(err), name)
            self.assertLess(err, TOLERANCE, name)

    def test_other_seed(self):
        results = run_grad_checks(seed=1, max_checks=3)
        self.assertLess(max(results.values()), TOLERANCE)


class TestPrimitiveSweep(unittest.TestCase):
    """Every primitive over shapes drawn from many seeds"""

    def test_twenty_seeds(self):
        for seed in range(20):
            results = check_primitives(seed=seed, max_checks=12)
            self.assertEqual(set(results), PRIMITIVES)
            for name, err in results.items():
                self.assertLess(err, TOLERANCE, f"{name} seed={seed}")

    def test_shapes_follow_seed(self):
        self.assertEqual(check_primitives(seed=5, max_checks=4), check_primitives(seed=5, max_checks=4))


if __name__ == '__main__':
    unittest.main()
