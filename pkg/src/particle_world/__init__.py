"""Transformer particle world model, toy multi-material simulator and MPPI planner."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    FormatError,
    InvalidActionError,
    InvalidInputError,
    PlanningFailedError,
    TrainingDivergedError,
)
from .model import ModelConfig, ModelParams, ParticleSet, forward, init_params, rollout  # noqa: E402
from .metrics import (  # noqa: E402
    LossConfig,
    chamfer_distance,
    hausdorff_distance,
    hybrid_loss,
    soft_hausdorff,
    tracked_mse,
)

__all__ = [
    "FormatError",
    "InvalidActionError",
    "InvalidInputError",
    "PlanningFailedError",
    "TrainingDivergedError",
    "ModelConfig",
    "ModelParams",
    "ParticleSet",
    "forward",
    "init_params",
    "rollout",
    "LossConfig",
    "chamfer_distance",
    "hausdorff_distance",
    "hybrid_loss",
    "soft_hausdorff",
    "tracked_mse",
]
