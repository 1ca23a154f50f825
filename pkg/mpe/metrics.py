"""
Evaluation metrics and the flat metric records written to logs and reports.
"""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel
from sklearn.metrics import log_loss, roc_auc_score

from mpe.errors import MetricError

PROBABILITY_CLAMP = 1e-7


class Metrics(BaseModel):
    """Base class for metric records written to logs and result files."""

    def to_dict(self, prefix: str | None = None) -> dict[str, int | float | str | None]:
        """Flatten into a dictionary, keying fields as `prefix/name` when a prefix is given (e.g. `test/auc`)."""
        values = self.model_dump()
        if prefix is None:
            return values
        return {f"{prefix}/{name}": value for name, value in values.items()}


class EvalMetrics(Metrics):
    auc: float
    logloss: float


class EpochMetrics(Metrics):
    phase: str
    epoch: int
    train_loss: float | None
    valid_auc: float
    valid_logloss: float
    avg_expected_bits: float | None
    best_valid_auc: float


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve; tied scores share their average rank."""
    labels = np.asarray(labels)
    if labels.size == 0 or np.unique(labels).size < 2:
        raise MetricError("AUC is undefined unless both classes are present")
    return float(roc_auc_score(labels, scores))


def logloss(labels: np.ndarray, probabilities: np.ndarray) -> float:
    clipped = np.clip(probabilities, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    return float(log_loss(labels, clipped, labels=[0, 1]))
