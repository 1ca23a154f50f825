import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from mpe.catalog import group_frequencies
from mpe.errors import FormatError
from mpe.quant import QuantizerParams, quantize_vector
from mpe.search import (
    CandidateSet,
    GroupPrecisionState,
    SampledPrecision,
    bit_regularizer,
    gamma_grad,
    mixture_backward,
    mixture_forward,
    precision_frequency_correlation,
    precision_summary,
    probabilities,
    read_precision,
    sample_precision,
    write_precision,
)

ALL_BITS = CandidateSet(bits=(0, 1, 2, 3, 4, 5, 6))


def state_for(p: list[list[float]]) -> GroupPrecisionState:
    """A state whose probabilities reproduce `p` (up to rounding), using tau = 1."""
    return GroupPrecisionState(gamma=np.log(np.array(p, dtype=np.float64)), tau=1.0)


class TestCandidateSet(unittest.TestCase):
    def test_rejects_unsorted(self):
        with self.assertRaises(ValidationError):
            CandidateSet(bits=(3, 1))

    def test_rejects_empty_and_out_of_range(self):
        for bits in [(), (0, 16), (-1, 2)]:
            with self.assertRaises(ValidationError):
                CandidateSet(bits=bits)

    def test_single_candidate_allowed(self):
        self.assertEqual(CandidateSet(bits=(6,)).m, 1)


class TestProbabilities(unittest.TestCase):
    def test_uniform_at_start(self):
        state = GroupPrecisionState.initial(g=2, m=7, tau=3e-3)
        np.testing.assert_allclose(probabilities(state, 1), np.full(7, 1 / 7))

    def test_closed_form(self):
        tau = 3e-3
        state = GroupPrecisionState(gamma=np.array([[tau * math.log(2), 0.0]]), tau=tau)
        np.testing.assert_allclose(probabilities(state, 0), [2 / 3, 1 / 3])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        state = GroupPrecisionState(gamma=rng.normal(0, 0.01, size=(50, 7)), tau=3e-3)
        probs = state.probability_matrix()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        self.assertTrue(np.all(probs >= 0))

    def test_group_out_of_range(self):
        with self.assertRaises(IndexError):
            probabilities(GroupPrecisionState.initial(2, 3, 1.0), 2)


class TestMixture(unittest.TestCase):
    def setUp(self):
        self.params = QuantizerParams(
            bits=(1, 2, 3, 4, 5, 6),
            step_sizes=np.array([0.3, 0.2, 0.1, 0.05, 0.02, 0.01]),
            offsets=np.array([0.0, 0.01, -0.02]),
        )
        self.e = np.array([0.123, -0.061, 0.2])

    def test_one_hot_is_plain_quantization(self):
        for j, b in enumerate(ALL_BITS.bits):
            p = np.eye(7)[j]
            expected, _ = quantize_vector(self.e, self.params, b)
            np.testing.assert_array_equal(mixture_forward(self.e, self.params, ALL_BITS, p), expected)

    def test_zero_term_halves_output(self):
        cands = CandidateSet(bits=(0, 6))
        expected, _ = quantize_vector(self.e, self.params, 6)
        np.testing.assert_allclose(mixture_forward(self.e, self.params, cands, np.array([0.5, 0.5])), 0.5 * expected)

    def test_uniform_over_exact_grids(self):
        # -0.5 and 0 lie on every grid with step 0.5, including the 1-bit grid {-1, 0}.
        params = QuantizerParams(bits=(1, 2, 3, 4, 5, 6), step_sizes=np.full(6, 0.5), offsets=np.zeros(2))
        e = np.array([-0.5, 0.0])
        np.testing.assert_allclose(mixture_forward(e, params, ALL_BITS, np.full(7, 1 / 7)), 6 / 7 * e)

    def test_one_hot_backward_is_ste(self):
        upstream = np.array([0.3, -1.0, 2.0])
        p = np.eye(7)[6]
        d_e, d_alpha, d_beta, d_p = mixture_backward(self.e, self.params, ALL_BITS, p, upstream)
        np.testing.assert_array_equal(d_e, upstream)
        np.testing.assert_array_equal(d_beta, np.zeros(3))
        self.assertEqual(d_alpha[1], 0.0)

    def test_zero_bit_term_has_no_gradient(self):
        upstream = np.array([0.3, -1.0, 2.0])
        p = np.full(7, 1 / 7)
        _, _, _, d_p = mixture_backward(self.e, self.params, ALL_BITS, p, upstream)
        self.assertEqual(d_p[0], 0.0)

    def test_probability_gradient_matches_finite_differences(self):
        upstream = np.array([0.7, -0.2, 1.1])
        p = np.array([0.1, 0.2, 0.1, 0.2, 0.15, 0.15, 0.1])
        _, _, _, d_p = mixture_backward(self.e, self.params, ALL_BITS, p, upstream)
        h = 1e-4
        for i in range(7):
            bump = np.eye(7)[i] * h
            forward = upstream @ mixture_forward(self.e, self.params, ALL_BITS, p + bump)
            backward = upstream @ mixture_forward(self.e, self.params, ALL_BITS, p - bump)
            self.assertAlmostEqual((forward - backward) / (2 * h), d_p[i], delta=1e-6 * max(1.0, abs(d_p[i])))


class TestGammaGrad(unittest.TestCase):
    def test_constant_upstream_vanishes(self):
        p = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(gamma_grad(p, np.full(3, 4.0), tau=0.1), np.zeros(3), atol=1e-12)

    def test_two_candidates(self):
        np.testing.assert_allclose(gamma_grad(np.array([0.5, 0.5]), np.array([1.0, 0.0]), tau=1.0), [0.25, -0.25])


class TestBitRegularizer(unittest.TestCase):
    def test_uniform_expectation(self):
        state = GroupPrecisionState.initial(g=1, m=7, tau=3e-3)
        loss, _ = bit_regularizer(state, ALL_BITS, np.array([1.0]), reg_lambda=1.0)
        self.assertAlmostEqual(loss, 3.0)

    def test_dropped_feature_costs_nothing(self):
        gamma = np.full((1, 7), -10.0)
        gamma[0, 0] = 0.0
        state = GroupPrecisionState(gamma=gamma, tau=3e-3)
        loss, _ = bit_regularizer(state, ALL_BITS, np.array([3.0]), reg_lambda=5.0)
        self.assertEqual(loss, 0.0)

    def test_rare_groups_pay_more(self):
        state = GroupPrecisionState.initial(g=2, m=7, tau=3e-3)
        frequent, _ = bit_regularizer(GroupPrecisionState.initial(1, 7, 3e-3), ALL_BITS, np.array([10.0]), 1.0)
        rare, _ = bit_regularizer(GroupPrecisionState.initial(1, 7, 3e-3), ALL_BITS, np.array([1.0]), 1.0)
        both, _ = bit_regularizer(state, ALL_BITS, np.array([10.0, 1.0]), 1.0)
        self.assertAlmostEqual(rare / frequent, 10.0)
        self.assertAlmostEqual(both, rare + frequent)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        gamma = rng.normal(0, 0.5, size=(3, 7))
        freq = np.array([5.0, 2.0, 1.0])
        _, d_gamma = bit_regularizer(GroupPrecisionState(gamma=gamma, tau=1.0), ALL_BITS, freq, 0.3)
        h = 1e-6
        for k in range(3):
            for i in range(7):
                bump = np.zeros_like(gamma)
                bump[k, i] = h
                up, _ = bit_regularizer(GroupPrecisionState(gamma=gamma + bump, tau=1.0), ALL_BITS, freq, 0.3)
                down, _ = bit_regularizer(GroupPrecisionState(gamma=gamma - bump, tau=1.0), ALL_BITS, freq, 0.3)
                self.assertAlmostEqual((up - down) / (2 * h), d_gamma[k, i], delta=1e-7)

    def test_rejects_unfloored_sums(self):
        with self.assertRaises(ValueError):
            bit_regularizer(GroupPrecisionState.initial(1, 7, 1.0), ALL_BITS, np.array([0.0]), 1.0)


class TestSamplePrecision(unittest.TestCase):
    def test_uniform_picks_largest(self):
        sampled = sample_precision(GroupPrecisionState.initial(1, 7, 3e-3), ALL_BITS)
        self.assertEqual(sampled.bit_of_group, [6])

    def test_only_dominant_candidate_qualifies(self):
        sampled = sample_precision(state_for([[0.9, 0.06, 0.04]]), CandidateSet(bits=(0, 3, 6)))
        self.assertEqual(sampled.bit_of_group, [0])

    def test_max_qualifying_not_argmax(self):
        sampled = sample_precision(state_for([[0.5, 0.08, 0.42]]), CandidateSet(bits=(0, 3, 6)))
        self.assertEqual(sampled.bit_of_group, [6])

    def test_matches_brute_force_rule(self):
        rng = np.random.default_rng(5)
        state = state_for(rng.dirichlet(np.full(7, 0.3), size=10_000) + 1e-12)
        sampled = sample_precision(state, ALL_BITS)
        probs = state.probability_matrix()
        for row, chosen in zip(probs, sampled.bit_of_group):
            expected = max(b for b, p in zip(ALL_BITS.bits, row) if p > 1 / 14)
            self.assertEqual(chosen, expected)

    def test_constant_shift_of_gamma_changes_nothing(self):
        rng = np.random.default_rng(6)
        gamma = rng.normal(0.0, 0.01, size=(50, 7))
        state = GroupPrecisionState(gamma=gamma, tau=3e-3)
        shifted = GroupPrecisionState(gamma=gamma + 0.7, tau=3e-3)
        np.testing.assert_allclose(shifted.probability_matrix(), state.probability_matrix(), atol=1e-12)
        self.assertEqual(sample_precision(shifted, ALL_BITS).bit_of_group, sample_precision(state, ALL_BITS).bit_of_group)

    def test_average_weights_group_sizes(self):
        state = state_for([[0.9, 0.05, 0.05], [0.05, 0.05, 0.9]])
        sampled = sample_precision(state, CandidateSet(bits=(0, 3, 6)), group_sizes=np.array([3, 1]))
        self.assertEqual(sampled.bit_of_group, [0, 6])
        self.assertAlmostEqual(sampled.avg_bits, 1.5)


class TestPrecisionFiles(unittest.TestCase):
    def setUp(self):
        self.groups = group_frequencies(np.array([9, 8, 7, 6, 5]), 2)
        self.sampled = SampledPrecision(bit_of_group=[6, 3, 0], avg_bits=(12 + 6 + 0) / 5)

    def test_round_trip(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "precision.tsv"
            write_precision(path, self.sampled, self.groups)
            self.assertEqual(path.read_text(), "0\t6\n1\t3\n2\t0\n")
            self.assertTrue(path.with_suffix(".json").exists())
            restored = read_precision(path, self.groups)
        self.assertEqual(restored.bit_of_group, [6, 3, 0])
        self.assertAlmostEqual(restored.avg_bits, 3.6)

    def test_rejects_wrong_group_count(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "precision.tsv"
            path.write_text("0\t6\n1\t3\n")
            with self.assertRaises(FormatError):
                read_precision(path, self.groups)

    def test_rejects_garbage(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "precision.tsv"
            path.write_text("0 six\n")
            with self.assertRaises(FormatError):
                read_precision(path)

    def test_summary_reports_frequency_correlation(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "precision.tsv"
            write_precision(path, self.sampled, self.groups)
            summary = json.loads(path.with_suffix(".json").read_text())
        self.assertAlmostEqual(summary["spearman"], 1.0)
        self.assertEqual(summary["per_bit_histogram"], {"0": 1, "3": 2, "6": 2})

    def test_constant_precision_has_no_correlation(self):
        uniform = SampledPrecision(bit_of_group=[3, 3, 3], avg_bits=3.0)
        self.assertIsNone(precision_summary(uniform, self.groups)["spearman"])

    def test_frequency_correlation(self):
        self.assertAlmostEqual(precision_frequency_correlation(self.sampled, self.groups), 1.0)


if __name__ == "__main__":
    unittest.main()
