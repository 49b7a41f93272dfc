"""
Tests for segmentation scores and rewards
"""

import unittest

import numpy as np

from .exceptions import ShapeError, UndefinedScoreError
from .scoring import RewardRecord, confusion, map_reward, mf1, miou, patch_reward, per_class_iou, score


def brute_force(y, y_hat, classes):
    """Set-based mIoU / mF1 over classes present in either mask."""
    ious, f1s = [], []
    for k in range(classes):
        truth = set(zip(*np.nonzero(y == k)))
        pred = set(zip(*np.nonzero(y_hat == k)))
        if not truth and not pred:
            continue
        inter = len(truth & pred)
        ious.append(inter / len(truth | pred))
        f1s.append(2 * inter / (len(truth) + len(pred)))
    return float(np.mean(ious)), float(np.mean(f1s))


class TestConfusion(unittest.TestCase):
    """Confusion matrices"""

    def test_diagonal(self):
        y = np.array([0, 1, 2, 2, 1])
        cm = confusion(y, y, 3)
        np.testing.assert_array_equal(cm, np.diag([1, 2, 2]))

    def test_hand_count(self):
        cm = confusion(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
        np.testing.assert_array_equal(cm, [[1, 1], [0, 2]])

    def test_empty(self):
        cm = confusion(np.zeros((0,), dtype=np.int64), np.zeros((0,), dtype=np.int64), 3)
        np.testing.assert_array_equal(cm, np.zeros((3, 3)))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            confusion(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int), 2)

    def test_class_range(self):
        with self.assertRaises(ShapeError):
            confusion(np.array([0, 3]), np.array([0, 1]), 3)


class TestScores(unittest.TestCase):
    """mIoU, mF1 and Score"""

    def test_perfect(self):
        y = np.array([[0, 1], [2, 3]])
        cm = confusion(y, y, 4)
        self.assertEqual(miou(cm), 1.0)
        self.assertEqual(mf1(cm), 1.0)
        self.assertEqual(score(y, y, 4), 2.0)

    def test_hand_values(self):
        cm = np.array([[1, 1], [0, 2]])
        np.testing.assert_allclose(per_class_iou(cm), [0.5, 2 / 3])
        self.assertAlmostEqual(miou(cm), 0.5833333333333333, places=12)
        self.assertAlmostEqual(mf1(cm), 0.7333333333333333, places=12)
        self.assertAlmostEqual(score(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])), 1.3166666666666667, places=12)

    def test_absent_classes_excluded(self):
        y = np.zeros((4, 4), dtype=np.int64)
        self.assertEqual(miou(confusion(y, y, 5)), 1.0)

    def test_disjoint(self):
        self.assertEqual(score(np.array([0, 0, 1]), np.array([1, 1, 0]), 2), 0.0)

    def test_undefined(self):
        with self.assertRaises(UndefinedScoreError):
            miou(np.zeros((3, 3)))

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            classes = int(rng.integers(1, 6))
            h, w = rng.integers(1, 33, size=2)
            y = rng.integers(0, classes, size=(h, w))
            y_hat = rng.integers(0, classes, size=(h, w))
            cm = confusion(y, y_hat, classes)
            expected_iou, expected_f1 = brute_force(y, y_hat, classes)
            self.assertAlmostEqual(miou(cm), expected_iou, delta=1e-12)
            self.assertAlmostEqual(mf1(cm), expected_f1, delta=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        y = rng.integers(0, 4, size=(16, 16))
        y_hat = rng.integers(0, 4, size=(16, 16))
        perm = rng.permutation(4)
        self.assertAlmostEqual(score(y, y_hat, 4), score(perm[y], perm[y_hat], 4), delta=1e-12)


class TestRewards(unittest.TestCase):
    """Patch and map rewards"""

    def setUp(self):
        self.y = np.array([0, 0, 1, 1])
        self.good = np.array([0, 1, 1, 1])
        self.bad = np.array([1, 1, 0, 0])

    def test_local_is_zero(self):
        self.assertEqual(patch_reward(self.y, self.good, self.good), 0.0)
        self.assertEqual(map_reward(self.y, self.good, self.good, 9), 0.0)

    def test_gain(self):
        self.assertAlmostEqual(patch_reward(self.y, self.good, self.bad, 2), 1.3166666666666667, places=12)
        self.assertAlmostEqual(patch_reward(self.y, self.y, self.good, 2), 2.0 - 1.3166666666666667, places=12)

    def test_negative(self):
        self.assertLess(patch_reward(self.y, self.bad, self.good, 2), 0.0)

    def test_antisymmetric(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            y, a, b = (rng.integers(0, 3, size=(6, 6)) for _ in range(3))
            self.assertAlmostEqual(patch_reward(y, a, b, 3), -patch_reward(y, b, a, 3), delta=1e-12)

    def test_map_reward_scaled_by_patches(self):
        gain = score(self.y, self.good, 2) - score(self.y, self.bad, 2)
        self.assertAlmostEqual(map_reward(self.y, self.good, self.bad, 4, 2), 4 * gain, places=12)
        self.assertGreater(map_reward(self.y, self.good, self.bad, 4, 2), 0.0)

    def test_reward_record(self):
        self.assertEqual(RewardRecord(t=3, action=2, reward=0.25, map_bonus=0.5).total, 0.75)
        self.assertEqual(RewardRecord(t=0, action=1, reward=0.0).total, 0.0)


if __name__ == '__main__':
    unittest.main()
