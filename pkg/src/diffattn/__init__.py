"""Driver attention prediction as multi-scale conditional diffusion."""
from .config import ExperimentConfig
from .errors import DiffAttnError
from .model import DiffAttn, ModelConfig
from .schedule import make_schedule, plan_steps

__all__ = ["DiffAttn", "DiffAttnError", "ExperimentConfig", "ModelConfig", "make_schedule", "plan_steps"]
__version__ = "0.1.0"
