"""Network architecture: configs, blocks, and the full model."""

from .blocks import PoseGate, pfrb_forward
from .config import ModelConfig, PFRBSpec, desk_l, desk_s, shape_plan, table_l
from .model import ModelOutputs, PFAModel, pose_to_rot9

__all__ = [
    "ModelConfig",
    "PFRBSpec",
    "desk_s",
    "desk_l",
    "table_l",
    "shape_plan",
    "PFAModel",
    "ModelOutputs",
    "PoseGate",
    "pfrb_forward",
    "pose_to_rot9",
]
