from mpe.models.config import Phase, RunConfig, TrainConfig
from mpe.models.synth_spec import SynthSpec

__all__ = ["Phase", "RunConfig", "TrainConfig", "SynthSpec"]
