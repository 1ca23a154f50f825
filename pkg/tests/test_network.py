import math
import unittest

import numpy as np

from mpe.network import binary_cross_entropy, init_mlp, mlp_backward, mlp_forward, sigmoid


def loss_of(x, weights, biases, labels):
    logits, _ = mlp_forward(x, weights, biases)
    return binary_cross_entropy(logits, labels)[0]


class TestNetwork(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.weights, self.biases = init_mlp(rng, input_size=6, hidden_sizes=[5, 4])
        self.x = rng.normal(size=(7, 6))
        self.labels = rng.integers(0, 2, size=7).astype(np.float64)

    def test_shapes(self):
        self.assertEqual([w.shape for w in self.weights], [(6, 5), (5, 4), (4, 1)])
        self.assertTrue(all(np.all(b == 0) for b in self.biases))
        logits, activations = mlp_forward(self.x, self.weights, self.biases)
        self.assertEqual(logits.shape, (7,))
        self.assertEqual(len(activations), 3)

    def test_untrained_output_loss_is_ln2(self):
        weights = [w.copy() for w in self.weights]
        weights[-1][:] = 0.0
        self.assertAlmostEqual(loss_of(self.x[:1], weights, self.biases, self.labels[:1]), math.log(2))

    def test_sigmoid_is_stable(self):
        np.testing.assert_allclose(sigmoid(np.array([-800.0, 0.0, 800.0])), [0.0, 0.5, 1.0])

    def test_gradients_match_finite_differences(self):
        logits, activations = mlp_forward(self.x, self.weights, self.biases)
        _, d_logits = binary_cross_entropy(logits, self.labels)
        d_x, d_weights, d_biases = mlp_backward(activations, d_logits, self.weights)

        h = 1e-6
        for layer, weight in enumerate(self.weights):
            for index in [(0, 0), (weight.shape[0] - 1, weight.shape[1] - 1)]:
                original = weight[index]
                weight[index] = original + h
                up = loss_of(self.x, self.weights, self.biases, self.labels)
                weight[index] = original - h
                down = loss_of(self.x, self.weights, self.biases, self.labels)
                weight[index] = original
                self.assertAlmostEqual((up - down) / (2 * h), d_weights[layer][index], delta=1e-6)

        for layer, bias in enumerate(self.biases):
            bias[0] += h
            up = loss_of(self.x, self.weights, self.biases, self.labels)
            bias[0] -= 2 * h
            down = loss_of(self.x, self.weights, self.biases, self.labels)
            bias[0] += h
            self.assertAlmostEqual((up - down) / (2 * h), d_biases[layer][0], delta=1e-6)

        for row, column in [(0, 0), (3, 2), (6, 5)]:
            x = self.x.copy()
            x[row, column] += h
            up = loss_of(x, self.weights, self.biases, self.labels)
            x[row, column] -= 2 * h
            down = loss_of(x, self.weights, self.biases, self.labels)
            self.assertAlmostEqual((up - down) / (2 * h), d_x[row, column], delta=1e-6)


if __name__ == "__main__":
    unittest.main()
