import unittest

import numpy as np

from mpe.optim import Adam


class TestAdam(unittest.TestCase):
    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        optimizer = Adam(lr=0.1)
        for _ in range(5):
            optimizer.step(params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_constant_gradient_moves_at_learning_rate(self):
        params = {"w": np.array([0.0])}
        optimizer = Adam(lr=1e-3)
        previous = 0.0
        for _ in range(100):
            optimizer.step(params, {"w": np.array([0.37])})
            step = previous - params["w"][0]
            previous = params["w"][0]
        self.assertAlmostEqual(step, 1e-3, delta=1e-8)

    def test_decay_only_on_named_parameters(self):
        params = {"embeddings": np.array([1.0]), "gamma": np.array([1.0])}
        optimizer = Adam(lr=0.1, weight_decay=0.5, decayed={"embeddings"})
        optimizer.step(params, {"embeddings": np.zeros(1), "gamma": np.zeros(1)})
        np.testing.assert_allclose(params["embeddings"], [0.95])
        np.testing.assert_array_equal(params["gamma"], [1.0])

    def test_learning_rate_override(self):
        params = {"a": np.array([0.0]), "gamma": np.array([0.0])}
        optimizer = Adam(lr=1e-3, lr_overrides={"gamma": 1e-1})
        optimizer.step(params, {"a": np.array([1.0]), "gamma": np.array([1.0])})
        self.assertAlmostEqual(params["a"][0], -1e-3, delta=1e-9)
        self.assertAlmostEqual(params["gamma"][0], -1e-1, delta=1e-7)

    def test_missing_gradient_is_skipped(self):
        params = {"a": np.array([1.0]), "b": np.array([1.0])}
        Adam(lr=0.5).step(params, {"a": np.array([1.0])})
        self.assertEqual(params["b"][0], 1.0)
        self.assertLess(params["a"][0], 1.0)


    def test_state_dict_snapshots_moments(self):
        params = {"w": np.ones(2)}
        optimizer = Adam(lr=0.1)
        optimizer.step(params, {"w": np.array([1.0, -2.0])})
        state = optimizer.state_dict()
        self.assertEqual(int(state["t"]), 1)
        np.testing.assert_allclose(state["m.w"], [0.1, -0.2])
        np.testing.assert_allclose(state["v.w"], [0.001, 0.004])
        optimizer.step(params, {"w": np.array([1.0, -2.0])})
        np.testing.assert_allclose(state["m.w"], [0.1, -0.2])


if __name__ == "__main__":
    unittest.main()
