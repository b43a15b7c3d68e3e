"""Multi-image super-resolution of 16-bit satellite image stacks.

End-to-end pipeline: a small reverse-mode autodiff engine over float64
numpy arrays, synthetic scene generation with recorded ground truth,
classical registration and baselines, a fusion network with in-network
registration, and a batch CLI.
"""

from .backend import BACKEND
from .model import ModelConfig, deepsum_forward, init_model_params
from .training import TrainConfig, SlidingConfig

__version__ = "1.0.0"

__all__ = [
    "BACKEND",
    "ModelConfig",
    "TrainConfig",
    "SlidingConfig",
    "deepsum_forward",
    "init_model_params",
    "__version__",
]
