"""Window fully-connected CRF depth estimation on a small numpy autodiff engine."""

from .autodiff import Tape, Variable, backward, gradcheck
from .config import ExperimentConfig, build_config, load_config
from .model import DepthNet, ModelConfig

__all__ = [
    "DepthNet", "ExperimentConfig", "ModelConfig", "Tape", "Variable",
    "backward", "build_config", "gradcheck", "load_config",
]
__version__ = "0.1.0"
