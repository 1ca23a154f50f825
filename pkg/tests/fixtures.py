from functools import lru_cache

from mpe.catalog import ingest
from mpe.models import SynthSpec, TrainConfig
from mpe.synth import generate

SMALL_SPEC = SynthSpec(
    num_fields=3,
    features_per_field=60,
    zipf_exponent=1.1,
    informative_fraction=0.3,
    logit_scale=2.0,
    num_samples=2000,
    seed=7,
)


@lru_cache(maxsize=None)
def small_data(d: int = 4):
    """A catalog and dataset small enough to train in well under a second."""
    return ingest(generate(SMALL_SPEC).rows, seed=0, d=d)


def small_config(**overrides) -> TrainConfig:
    values = {"epochs": 2, "batch_size": 128, "group_size": 8, "hidden_sizes": [8], "learning_rate": 1e-2}
    values.update(overrides)
    return TrainConfig.model_validate(values)
