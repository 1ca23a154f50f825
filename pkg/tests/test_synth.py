import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from mpe.errors import ConfigError
from mpe.models import SynthSpec
from mpe.synth import generate, solve_bias, zipf_probabilities


class TestSynth(unittest.TestCase):
    def test_deterministic(self):
        spec = SynthSpec(num_fields=2, features_per_field=30, num_samples=500, seed=9)
        self.assertEqual(generate(spec), generate(spec))
        self.assertNotEqual(generate(spec).rows, generate(spec.model_copy(update={"seed": 10})).rows)

    def test_zipf_head_frequency(self):
        spec = SynthSpec(num_fields=1, features_per_field=1000, zipf_exponent=1.1, num_samples=100_000, seed=1)
        rows = generate(spec).rows
        observed = sum(row.split("\t")[1] == "f0_0" for row in rows) / len(rows)
        predicted = zipf_probabilities(1000, 1.1)[0]
        self.assertLess(abs(observed - predicted) / predicted, 0.2)

    def test_positive_ratio_hits_target(self):
        spec = SynthSpec(num_fields=2, features_per_field=200, num_samples=100_000, target_positive_ratio=0.25, seed=2)
        labels = np.array([int(row[0]) for row in generate(spec).rows])
        self.assertLess(abs(labels.mean() - 0.25), 0.02)

    def test_uninformative_fields(self):
        spec = SynthSpec(num_fields=2, features_per_field=20, informative_fraction=0.0, num_samples=200)
        self.assertTrue(all(weight == 0.0 for weight in generate(spec).importance.values()))

    def test_importance_covers_every_token(self):
        spec = SynthSpec(num_fields=3, features_per_field=25, informative_fraction=0.2, num_samples=100)
        importance = generate(spec).importance
        self.assertEqual(len(importance), 75)
        self.assertEqual(sum(weight != 0.0 for weight in importance.values()), 15)

    def test_zero_fields_rejected(self):
        with self.assertRaises(ConfigError):
            generate(SynthSpec(num_fields=0))

    def test_unknown_keys_rejected(self):
        with self.assertRaises(ValidationError):
            SynthSpec.model_validate({"num_fields": 2, "zipf": 1.2})

    def test_solve_bias(self):
        logits = np.random.default_rng(0).normal(size=1000)
        bias = solve_bias(logits, 0.1)
        self.assertAlmostEqual(float(np.mean(1 / (1 + np.exp(-(logits + bias))))), 0.1, places=6)

    def test_write(self):
        spec = SynthSpec(num_fields=2, features_per_field=10, num_samples=50)
        with tempfile.TemporaryDirectory() as directory:
            tsv, sidecar = Path(directory) / "data.tsv", Path(directory) / "importance.tsv"
            generate(spec).write(tsv, sidecar)
            lines = tsv.read_text().splitlines()
            self.assertEqual(len(lines), 50)
            self.assertEqual(len(lines[0].split("\t")), 3)
            self.assertEqual(len(sidecar.read_text().splitlines()), 20)


if __name__ == "__main__":
    unittest.main()
