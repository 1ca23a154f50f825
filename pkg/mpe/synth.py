"""
Synthetic click logs with power-law token frequencies and planted feature importance.

Every field draws its token from a Zipf distribution over a fixed vocabulary.
A fraction of each field's features are informative and carry a latent
weight. A sample's click probability is the sigmoid of its informative weights
plus noise and a bias that hits the target positive ratio.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel

from mpe.errors import ConfigError
from mpe.models.synth_spec import SynthSpec
from mpe.network import sigmoid

logger = logging.getLogger(__name__)


class SynthOutput(BaseModel):
    rows: list[str]
    importance: dict[str, float]

    def write(self, tsv_path: str | Path, sidecar_path: str | Path) -> None:
        Path(tsv_path).write_text("".join(f"{row}\n" for row in self.rows))
        sidecar = pd.DataFrame({"token": list(self.importance), "latent_weight": list(self.importance.values())})
        sidecar.to_csv(sidecar_path, sep="\t", header=False, index=False)


def token_name(field: int, rank: int) -> str:
    return f"f{field}_{rank}"


def zipf_probabilities(vocabulary_size: int, exponent: float) -> np.ndarray:
    """Probability of each rank (0 = most frequent) under a finite Zipf law."""
    mass = np.arange(1, vocabulary_size + 1, dtype=np.float64) ** -exponent
    return mass / mass.sum()


def solve_bias(logits: np.ndarray, target_ratio: float, iterations: int = 100) -> float:
    """Find b with mean(sigmoid(logits + b)) == target_ratio by bisection."""
    lo, hi = -50.0, 50.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if sigmoid(logits + mid).mean() < target_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(spec: SynthSpec) -> SynthOutput:
    if spec.num_fields == 0:
        raise ConfigError("degenerate synthetic spec: zero fields")

    rng = np.random.default_rng(spec.seed)
    vocabulary = spec.features_per_field
    probs = zipf_probabilities(vocabulary, spec.zipf_exponent)
    num_informative = int(round(spec.informative_fraction * vocabulary))

    ranks = np.empty((spec.num_samples, spec.num_fields), dtype=np.int64)
    signal = np.zeros(spec.num_samples)
    importance: dict[str, float] = {}
    for field in range(spec.num_fields):
        ranks[:, field] = rng.choice(vocabulary, size=spec.num_samples, p=probs)
        latent = np.zeros(vocabulary)
        if num_informative:
            selection = probs**spec.importance_correlation
            informative = rng.choice(vocabulary, size=num_informative, replace=False, p=selection / selection.sum())
            latent[informative] = rng.normal(0.0, spec.logit_scale, size=num_informative)
        signal += latent[ranks[:, field]]
        importance.update({token_name(field, rank): float(weight) for rank, weight in enumerate(latent)})

    if spec.noise_std > 0:
        signal += rng.normal(0.0, spec.noise_std, size=spec.num_samples)
    bias = solve_bias(signal, spec.target_positive_ratio)
    labels = (rng.random(spec.num_samples) < sigmoid(signal + bias)).astype(np.int64)
    logger.info("generated %d samples, positive ratio %.4f (bias %.4f)", spec.num_samples, labels.mean(), bias)

    rows = [
        "\t".join([str(label), *(token_name(field, rank) for field, rank in enumerate(row))])
        for label, row in zip(labels.tolist(), ranks.tolist())
    ]
    return SynthOutput(rows=rows, importance=importance)
