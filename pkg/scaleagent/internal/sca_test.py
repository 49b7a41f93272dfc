"""
Tests for the scale control agent and advantage actor-critic
"""

import itertools
import math
import os
import unittest

import numpy as np
from pydantic import ValidationError

from .exceptions import GeometryError, RolloutError, ShapeError
from .neuralcore import SGD, OptimizerConfig
from .sca import (A2CLearner, AgentConfig, ScaleControlAgent, State, Transition, a2c_losses, a2c_terms,
                  downsample_mask, td_targets)
from .tiling import PatchSpec, Raster, make_position_mask

SLOW = os.environ.get("SCALEAGENT_SLOW_TESTS") == "1"


def quadrant_thumbnail(size: int = 32) -> Raster:
    data = np.zeros((3, size, size))
    half = size // 2
    colours = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 1.0)]
    for (r, c), colour in zip(itertools.product((0, half), (0, half)), colours):
        data[:, r:r + half, c:c + half] = np.asarray(colour)[:, None, None]
    return Raster(data)


def corner_states(thumb: Raster, raster_hw=(256, 256), patch=32):
    H, W = raster_hw
    corners = [(0, 0), (0, W - patch), (H - patch, 0), (H - patch, W - patch)]
    return [State(thumbnail=thumb, position_mask=make_position_mask(PatchSpec(r, c, patch, patch), raster_hw,
                                                                    thumb.shape))
            for r, c in corners]


def dummy_state() -> State:
    return State(thumbnail=Raster(np.zeros((1, 4, 4))), position_mask=np.ones((4, 4)))


def transition(reward: float, value: float, done: bool, action: int = 1) -> Transition:
    return Transition(state=dummy_state(), action=action, reward=reward, value=value,
                      log_probs=np.log(np.full(2, 0.5)), done=done)


def pairwise_distances(vectors):
    return [float(np.linalg.norm(a - b)) for a, b in itertools.combinations(vectors, 2)]


class TestState(unittest.TestCase):
    """State validation"""

    def test_mask_shape(self):
        with self.assertRaises(ShapeError):
            State(thumbnail=Raster(np.zeros((1, 4, 4))), position_mask=np.ones((4, 5)))

    def test_empty_mask(self):
        with self.assertRaises(GeometryError):
            State(thumbnail=Raster(np.zeros((1, 4, 4))), position_mask=np.zeros((4, 4)))

    def test_mask_binarised(self):
        state = State(thumbnail=Raster(np.zeros((1, 2, 2))), position_mask=np.array([[3, 0], [0, 1]]))
        np.testing.assert_array_equal(state.position_mask, [[1, 0], [0, 1]])

    def test_downsample_mask_any_overlap(self):
        mask = np.zeros((8, 8))
        mask[0, 3] = 1
        np.testing.assert_array_equal(downsample_mask(mask, (2, 2)), [[1, 0], [0, 0]])


class TestTargets(unittest.TestCase):
    """n-step TD targets"""

    def test_single_step_bootstrap(self):
        targets = td_targets([transition(0.5, 0.0, False)], 0.99, 5, bootstrap=1.0)
        self.assertAlmostEqual(targets[0], 1.49, places=12)

    def test_terminal(self):
        targets = td_targets([transition(0.5, 0.3, True)], 0.99, 5, bootstrap=7.0)
        self.assertEqual(targets[0], 0.5)

    def test_gamma_zero(self):
        segment = [transition(r, v, False) for r, v in ((0.1, 2.0), (-0.4, 3.0), (0.9, -1.0))]
        np.testing.assert_array_equal(td_targets(segment, 0.0, 5, bootstrap=5.0), [0.1, -0.4, 0.9])

    def test_n_step_window(self):
        segment = [transition(1.0, 10.0, False), transition(1.0, 20.0, False), transition(1.0, 30.0, True)]
        targets = td_targets(segment, 0.5, 1)
        np.testing.assert_allclose(targets, [1.0 + 0.5 * 20.0, 1.0 + 0.5 * 30.0, 1.0])
        targets = td_targets(segment, 0.5, 5)
        np.testing.assert_allclose(targets, [1.75, 1.5, 1.0])

    def test_empty(self):
        with self.assertRaises(RolloutError):
            td_targets([], 0.99, 5)

    def test_non_finite(self):
        with self.assertRaises(RolloutError):
            transition(float("nan"), 0.0, False)


class TestLosses(unittest.TestCase):
    """Actor-critic losses"""

    def test_policy_loss(self):
        loss = a2c_terms(np.log([[0.5, 0.5]]), np.array([0.0]), [1], np.array([1.0]))
        self.assertAlmostEqual(loss.policy, math.log(2), places=12)
        self.assertAlmostEqual(loss.entropy, math.log(2), places=12)

    def test_value_loss(self):
        loss = a2c_terms(np.log([[0.5, 0.5]]), np.array([1.0]), [2], np.array([0.0]))
        self.assertAlmostEqual(loss.value, 1.0, places=12)
        self.assertAlmostEqual(loss.total, loss.policy + 0.5 * 1.0, places=12)

    def test_zero_advantage_no_actor_gradient(self):
        loss = a2c_terms(np.log([[0.2, 0.8]]), np.array([0.4]), [2], np.array([0.4]))
        np.testing.assert_array_equal(loss.dlogits, 0.0)
        np.testing.assert_array_equal(loss.dvalues, 0.0)

    def test_gradient_signs(self):
        loss = a2c_terms(np.log([[0.5, 0.5]]), np.array([0.0]), [1], np.array([1.0]))
        self.assertLess(loss.dlogits[0, 0], 0.0)
        self.assertGreater(loss.dlogits[0, 1], 0.0)
        self.assertLess(loss.dvalues[0], 0.0)

    def test_from_transitions(self):
        segment = [transition(1.0, 0.0, True)]
        loss = a2c_losses(segment, td_targets(segment, 0.99, 5))
        self.assertAlmostEqual(loss.policy, math.log(2), places=12)

    def test_policy_gradient_scales_with_advantage(self):
        rng = np.random.default_rng(5)
        log_probs = np.log(rng.dirichlet(np.ones(6), size=8))
        values = rng.normal(size=8)
        advantages = rng.normal(size=8)
        actions = rng.integers(1, 7, size=8).tolist()
        base = a2c_terms(log_probs, values, actions, values + advantages)
        for c in (0.5, 3.0, 40.0):
            scaled = a2c_terms(log_probs, values, actions, values + c * advantages)
            np.testing.assert_allclose(scaled.dlogits, c * base.dlogits, rtol=1e-9, atol=1e-14)
            self.assertAlmostEqual(scaled.policy, c * base.policy, places=9)

    def test_misaligned(self):
        with self.assertRaises(RolloutError):
            a2c_terms(np.log([[0.5, 0.5]]), np.array([0.0, 1.0]), [1], np.array([1.0]))


class TestAgent(unittest.TestCase):
    """Network behaviour"""

    def test_config_validation(self):
        with self.assertRaises(ValidationError):
            AgentConfig(actions=1)
        with self.assertRaises(ValidationError):
            AgentConfig(gamma=1.5)
        with self.assertRaises(ValidationError):
            AgentConfig(n_steps=0)

    def test_near_uniform_at_init(self):
        agent = ScaleControlAgent(AgentConfig(), seed=0)
        out = agent.forward(corner_states(quadrant_thumbnail()))
        probs = out.probs
        self.assertEqual(probs.shape, (4, 6))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        self.assertLess(float((probs.max(axis=1) - probs.min(axis=1)).max()), 0.2)

    def test_act(self):
        agent = ScaleControlAgent(AgentConfig(actions=4), seed=1)
        state = corner_states(quadrant_thumbnail())[0]
        action, log_probs, value = agent.act(state, "greedy")
        self.assertEqual(action, int(np.argmax(log_probs)) + 1)
        self.assertTrue(math.isfinite(value))
        rng = np.random.default_rng(0)
        sampled = {agent.act(state, "sample", rng)[0] for _ in range(50)}
        self.assertTrue(sampled <= {1, 2, 3, 4})
        self.assertGreater(len(sampled), 1)
        with self.assertRaises(RolloutError):
            agent.act(state, "sample")
        with self.assertRaises(RolloutError):
            agent.act(state, "beam")

    def test_positions_distinct(self):
        agent = ScaleControlAgent(AgentConfig(), seed=0)
        encodings = [agent.encode_state(s) for s in corner_states(quadrant_thumbnail())]
        for d in pairwise_distances(encodings):
            self.assertGreater(d, 1e-9)

    def test_parameter_prefix(self):
        agent = ScaleControlAgent(AgentConfig(widths=[4], index_channels=4), seed=0)
        self.assertTrue(all(name.startswith("sca.") for name in agent.named_parameters()))

    def test_mask_channel_variant(self):
        cfg = AgentConfig(widths=[4, 8], index_channels=8, feature_indexing=False)
        agent = ScaleControlAgent(cfg, seed=0)
        self.assertEqual(agent.encoder[0].in_channels, 4)
        out = agent.forward(corner_states(quadrant_thumbnail()))
        self.assertEqual(out.features.shape, (4, 8))

    def test_indexing_separates_positions(self):
        # default run geometry: 512 raster, 64 patches, 64 thumbnail
        states = corner_states(quadrant_thumbnail(64), raster_hw=(512, 512), patch=64)
        for seed in range(4):
            indexed = ScaleControlAgent(AgentConfig(), seed=seed)
            channel = ScaleControlAgent(AgentConfig(feature_indexing=False), seed=seed)
            with_index = pairwise_distances([indexed.encode_state(s) for s in states])
            without = pairwise_distances([channel.encode_state(s) for s in states])
            self.assertGreaterEqual(min(with_index), 10 * max(without), f"seed {seed}")

    def test_index_window_sees_neighbours(self):
        agent = ScaleControlAgent(AgentConfig(widths=[16], index_channels=16), seed=0)
        thumb = np.zeros((3, 8, 8))
        mask = np.zeros((8, 8))
        mask[:2, :2] = 1
        base = agent.encode_state(State(thumbnail=Raster(thumb), position_mask=mask))
        thumb[:, 2:4, :2] = 1.0
        moved = agent.encode_state(State(thumbnail=Raster(thumb), position_mask=mask))
        self.assertGreater(float(np.linalg.norm(moved - base)), 0.0)


def run_bandit(cfg: AgentConfig, optimizer: OptimizerConfig, best: int, updates: int, batch: int,
               seed: int = 0) -> float:
    """Single-state bandit where only ``best`` pays 1; returns the final pi(best)."""
    agent = ScaleControlAgent(cfg, seed=seed)
    learner = A2CLearner(agent, SGD(agent.parameters(), optimizer))
    state = State(thumbnail=Raster(np.random.default_rng(seed).uniform(size=(cfg.in_channels, 8, 8))),
                  position_mask=np.ones((8, 8)))
    rng = np.random.default_rng(seed + 1)
    for _ in range(updates):
        segment = []
        for _ in range(batch):
            action, log_probs, value = agent.act(state, "sample", rng)
            segment.append(Transition(state=state, action=action, reward=float(action == best), value=value,
                                      log_probs=log_probs, done=True))
        learner.update(segment)
    probs, _ = agent.actor_critic(state)
    return float(probs[best - 1])


class TestBandit(unittest.TestCase):
    """Learning on a forced-reward bandit"""

    def test_small_bandit(self):
        cfg = AgentConfig(actions=3, in_channels=1, widths=[4], index_channels=4)
        optimizer = OptimizerConfig(lr=0.01, momentum=0.9, decay_every=100000)
        for best in range(1, 4):
            self.assertGreater(run_bandit(cfg, optimizer, best, updates=600, batch=8), 0.9)

    @unittest.skipUnless(SLOW, "set SCALEAGENT_SLOW_TESTS=1")
    def test_six_action_bandit(self):
        cfg = AgentConfig(in_channels=3, widths=[8, 16], index_channels=16)
        optimizer = OptimizerConfig(lr=0.01, momentum=0.9, decay_every=100000)
        for best in range(1, 7):
            self.assertGreater(run_bandit(cfg, optimizer, best, updates=5000, batch=1), 0.9)


if __name__ == '__main__':
    unittest.main()
