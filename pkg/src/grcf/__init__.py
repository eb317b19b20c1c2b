"""Two-stage group-wise ranking then calibration for multimodal score prediction."""

from .groups import GroupSpec, MarginParams, assign_groups, dynamic_margin, group_distance
from .model import GRCFModel, ModelConfig

__version__ = "0.1.0"

__all__ = ["GRCFModel", "GroupSpec", "MarginParams", "ModelConfig", "assign_groups", "dynamic_margin",
           "group_distance"]
