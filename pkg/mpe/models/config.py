"""
Training and run configuration.

Config files are JSON documents validated by `RunConfig`. Unknown keys are
rejected so that typos never silently fall back to defaults.
"""
from __future__ import annotations

from enum import Enum

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str.__str__(self)

        def __format__(self, format_spec: str) -> str:
            return str.__format__(str(self), format_spec)

from pydantic import BaseModel, ConfigDict, Field, field_validator

from mpe.search import CandidateSet


class Phase(StrEnum):
    BASELINE = "baseline"
    QAT = "qat"
    SEARCH = "search"
    RETRAIN = "retrain"
    RETRAIN_LTH = "retrain_lth"
    NO_RETRAIN_EVAL = "no_retrain_eval"

    @property
    def needs_search_checkpoint(self) -> bool:
        return self in (Phase.RETRAIN, Phase.RETRAIN_LTH, Phase.NO_RETRAIN_EVAL)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    phase: Phase = Phase.BASELINE
    learning_rate: float = Field(1e-3, gt=0)
    gamma_learning_rate: float | None = Field(None, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(5, ge=1)
    reg_lambda: float = Field(1e-5, ge=0, alias="lambda")
    tau: float = Field(3e-3, gt=0)
    group_size: int = Field(128, ge=1)
    candidate_bits: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6])
    qat_bits: int = Field(6, ge=1, le=15)
    hidden_sizes: list[int] = Field(default_factory=lambda: [64, 32])
    init_std: float = Field(3e-3, gt=0)
    seed: int = 0

    @field_validator("candidate_bits")
    @classmethod
    def _valid_candidates(cls, bits: list[int]) -> list[int]:
        CandidateSet(bits=tuple(bits))
        return bits

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_widths(cls, sizes: list[int]) -> list[int]:
        if any(size < 1 for size in sizes):
            raise ValueError(f"hidden layer sizes must be positive: {sizes}")
        return sizes

    @property
    def candidates(self) -> CandidateSet:
        return CandidateSet(bits=tuple(self.candidate_bits))

    @property
    def gamma_lr(self) -> float:
        return self.gamma_learning_rate if self.gamma_learning_rate is not None else self.learning_rate

    def train_config(self) -> TrainConfig:
        """Drop any run-level fields, keeping only the training knobs."""
        return TrainConfig.model_validate(self.model_dump(include=set(TrainConfig.model_fields)))


class RunConfig(TrainConfig):
    data_dir: str | None = None
    output_dir: str = "runs"
    prior_checkpoint: str | None = None
    precision_file: str | None = None
