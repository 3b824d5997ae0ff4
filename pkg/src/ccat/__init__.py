"""CCAT: non-intrusive speech quality (MOS) prediction with a convolutional transformer."""

from .errors import CCATError
from .frontend import FeatureConfig, Waveform, extract_features, load_wav
from .model import TABLE1_MODELS, CCATNetwork, ModelConfig, build, forward, load_checkpoint, save_checkpoint
from .training import TABLE1_TRAIN, Example, TrainConfig, ccat_loss, fit
from .tuning import SearchSpace, ensemble_predict, run_search

__all__ = [
    "CCATError", "FeatureConfig", "Waveform", "extract_features", "load_wav",
    "TABLE1_MODELS", "CCATNetwork", "ModelConfig", "build", "forward",
    "load_checkpoint", "save_checkpoint", "TABLE1_TRAIN", "Example", "TrainConfig",
    "ccat_loss", "fit", "SearchSpace", "ensemble_predict", "run_search",
]
__version__ = "0.1.0"
