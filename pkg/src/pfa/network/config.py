"""Model configuration and variant presets.

Desk-scale presets keep the structural ratios of the published variants
(stacked pose-fused hourglasses feeding a dual-branch coordinate network)
at resolutions where a full training run takes minutes: 32x32 input, an
8^3 volume, 2 hourglasses of depth 2. The full-scale "L" ratios (256
input, 64^3 volume, 4 hourglasses of depth 4, reduction ratio 16) are
retained for shape arithmetic only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..errors import ShapeError

FEATURE_MODES = ("dual", "2d", "3d")
POSE_MODES = ("fused", "none")
HEADS = ("sparse", "dense", "pose")


@dataclass
class PFRBSpec:
    """Channel-attention geometry for one block family."""

    channels: int
    reduction: int
    pose_fused: bool

    def __post_init__(self):
        if self.channels % self.reduction:
            raise ShapeError(f"channels {self.channels} not divisible by "
                             f"reduction ratio {self.reduction}")

    @property
    def reduced(self) -> int:
        return self.channels // self.reduction

    @property
    def excite_inputs(self) -> int:
        return self.reduced + (9 if self.pose_fused else 0)


@dataclass
class ModelConfig:
    variant: str = "desk-s"
    input_resolution: int = 32
    stem_channels: int = 16
    feature_channels: int = 24
    prepose_channels: tuple = (24, 32, 32)
    hourglass_count: int = 2
    hourglass_depth: int = 2
    volume_extents: tuple = (8, 8, 8)
    reduction_ratio: int = 4
    c2d: int = 24
    dual2d_channels: tuple = (24, 32)
    dual3d_channels: tuple = (16, 24)
    feature_mode: str = "dual"      # dual | 2d | 3d
    pose_mode: str = "fused"        # fused | none (plain SE everywhere)
    attention_pose: bool = False    # pose into the spatial-attention block
    head: str = "sparse"            # sparse | dense | pose

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.pose_mode not in POSE_MODES:
            raise ValueError(f"pose_mode must be one of {POSE_MODES}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.input_resolution % (2 ** (self.hourglass_depth + 2)):
            raise ShapeError(f"input resolution {self.input_resolution} too small "
                             f"for hourglass depth {self.hourglass_depth}")
        d, h, w = self.volume_extents
        if (h, w) != (self.feature_resolution, self.feature_resolution):
            raise ShapeError(f"volume extents {self.volume_extents} must match the "
                             f"feature resolution {self.feature_resolution}")

    @property
    def feature_resolution(self) -> int:
        # Stride-2 stem halves the input; one pool halves again.
        return self.input_resolution // 4

    @property
    def pose_fused(self) -> bool:
        return self.pose_mode == "fused"

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def desk_s(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def desk_l(**kw) -> ModelConfig:
    """Desk-scale teacher: same topology, roughly doubled widths."""
    defaults = dict(variant="desk-l", stem_channels=24, feature_channels=40,
                    prepose_channels=(40, 56, 56), c2d=40,
                    dual2d_channels=(40, 56), dual3d_channels=(24, 40))
    defaults.update(kw)
    return ModelConfig(**defaults)


@dataclass
class TableRatios:
    """Published full-scale structure, kept for shape arithmetic."""

    input_resolution: int
    stem_kernel: int
    feature_channels: tuple
    prepose_channels: tuple
    hourglass_count: int
    hourglass_depth: int
    volume_extents: tuple
    reduction_ratio: int


def table_l() -> TableRatios:
    return TableRatios(input_resolution=256, stem_kernel=7,
                       feature_channels=(64, 128, 128),
                       prepose_channels=(256, 512, 512, 512),
                       hourglass_count=4, hourglass_depth=4,
                       volume_extents=(64, 64, 64), reduction_ratio=16)


def shape_plan(ratios: TableRatios) -> dict:
    """Declared shapes implied by a full-scale structure (arithmetic only)."""
    feat_res = ratios.input_resolution // 4
    d, h, w = ratios.volume_extents
    plan = {
        "stem": (ratios.feature_channels[0], ratios.input_resolution // 2,
                 ratios.input_resolution // 2),
        "features": (ratios.feature_channels[-1], feat_res, feat_res),
        "hourglass_bottleneck": feat_res // (2 ** ratios.hourglass_depth),
        "volume": ratios.volume_extents,
        "multilevel_channels": ratios.feature_channels[-1] * ratios.hourglass_count,
        "squeeze_reduced": ratios.feature_channels[-1] // ratios.reduction_ratio,
        "sparse_head": (68, 3),
        "dense_head": 62,
    }
    if plan["hourglass_bottleneck"] < 1:
        raise ShapeError("hourglass depth exceeds the feature resolution")
    if (h, w) != (feat_res, feat_res):
        raise ShapeError(f"volume extents {ratios.volume_extents} do not match "
                         f"feature resolution {feat_res}")
    return plan
