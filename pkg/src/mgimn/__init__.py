"""Multi-grained interactive matching network for few-shot text classification."""

from .config import RunConfig, load_config
from .episodes import Dataset, EpisodeSpec, gen_synth, load_dataset, sample_episode, split_classes
from .errors import (CheckFailure, ConfigError, DataError, LoadError, MgimnError, ParseError,
                     SamplingError, ShapeError, StateError)
from .matching import AblationFlags
from .model import FewShotModel, ModelConfig
from .tensor import Tensor, no_grad

__all__ = [
    "AblationFlags", "CheckFailure", "ConfigError", "DataError", "Dataset", "EpisodeSpec",
    "FewShotModel", "LoadError", "MgimnError", "ModelConfig", "ParseError", "RunConfig",
    "SamplingError", "ShapeError", "StateError", "Tensor", "gen_synth", "load_config",
    "load_dataset", "no_grad", "sample_episode", "split_classes",
]
