"""The full alignment network.

Pre-stage: feature extraction (plain SE blocks), pre-pose regression (SE
blocks, FC to 3 Euler radians), and heatmap regression through stacked
pose-fused hourglasses, where only the last hourglass feeds the volume
head. Post-stage: a dual-branch coordinate network combining multilevel
2D feature maps (with volume-driven spatial attention) and the volume
itself lifted through 3D convolutions, pooled to one feature vector that
feeds the sparse (68x3), dense (62) and optional pose (3) heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import functional as F
from ..core.module import Module
from ..core.tensor import Tensor, no_grad
from ..errors import ShapeError
from ..geometry import HeadPose, euler_to_rot
from .blocks import (BatchNorm, Conv2d, Conv3d, Hourglass2D, InitContext, Linear,
                     ResidualBlock2D, ResidualBlock3D)
from .config import ModelConfig

POSE_SOURCES = ("predicted", "gt", "override", "none")


def pose_to_rot9(euler: np.ndarray) -> np.ndarray:
    """Row-major vectorized rotation matrices for a batch of Euler poses."""
    euler = np.asarray(euler, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(euler), 9))
    for i, (p, y, r) in enumerate(euler):
        out[i] = euler_to_rot(HeadPose(p, y, r)).reshape(-1)
    return out


class FeatureExtractor(Module):
    """Stride-2 stem plus SE residual blocks; output at 1/4 resolution."""

    def __init__(self, init: InitContext, cfg: ModelConfig):
        self.stem = Conv2d(init, 3, cfg.stem_channels, k=3, stride=2)
        self.stem_bn = BatchNorm(cfg.stem_channels)
        self.block1 = ResidualBlock2D(init, cfg.stem_channels, cfg.feature_channels,
                                      cfg.reduction_ratio, pose_fused=False)
        self.block2 = ResidualBlock2D(init, cfg.feature_channels, cfg.feature_channels,
                                      cfg.reduction_ratio, pose_fused=False)

    def forward(self, images: Tensor, mode: str) -> Tensor:
        h = F.relu(self.stem_bn.forward(self.stem.forward(images), mode))
        h = F.avg_pool(h, 2, dims=2)
        h = self.block1.forward(h, None, mode)
        return self.block2.forward(h, None, mode)


class PreposeRegressor(Module):
    """SE residual stack with pooling, global pooling, FC to 3 radians."""

    def __init__(self, init: InitContext, cfg: ModelConfig):
        blocks = []
        c_prev = cfg.feature_channels
        for c in cfg.prepose_channels:
            blocks.append(ResidualBlock2D(init, c_prev, c, cfg.reduction_ratio,
                                          pose_fused=False))
            c_prev = c
        self.blocks = blocks
        self.fc = Linear(init, c_prev, 3)
        self._pools = len(blocks) - 1

    def forward(self, features: Tensor, mode: str) -> Tensor:
        h = features
        for i, block in enumerate(self.blocks):
            h = block.forward(h, None, mode)
            if i < self._pools and h.data.shape[-1] >= 4:
                h = F.avg_pool(h, 2, dims=2)
        return self.fc.forward(F.global_avg_pool(h))


class HeatmapRegressor(Module):
    """Stacked pose-fused hourglasses; the last one feeds the volume head."""

    def __init__(self, init: InitContext, cfg: ModelConfig):
        c = cfg.feature_channels
        self.hourglasses = [Hourglass2D(init, c, cfg.hourglass_depth,
                                        cfg.reduction_ratio, cfg.pose_fused)
                            for _ in range(cfg.hourglass_count)]
        depth = cfg.volume_extents[0]
        self.volume_conv = Conv2d(init, c, depth, k=1)
        self.volume_bias = ConvBias(depth)

    def forward(self, features: Tensor, pose9: Optional[np.ndarray],
                mode: str) -> tuple[Tensor, list[Tensor]]:
        multilevel = []
        h = features
        for hg in self.hourglasses:
            h = hg.forward(h, pose9, mode)
            multilevel.append(h)
        logits = self.volume_bias.forward(self.volume_conv.forward(h))
        return F.sigmoid(logits), multilevel


class ConvBias(Module):
    """Per-channel bias; initialized low so volumes start near background."""

    def __init__(self, channels: int, start: float = -2.0):
        from ..core.tensor import Parameter
        self.bias = Parameter(np.full(channels, start), name="bias")

    def forward(self, x: Tensor) -> Tensor:
        shape = (x.data.shape[1],) + (1,) * (x.data.ndim - 2)
        return F.add(x, F.reshape(self.bias, shape))


class DualDimensional(Module):
    """2D branch (multilevel maps with volume-driven spatial attention) and
    3D branch (volume lifted by an entry convolution), pooled and fused."""

    def __init__(self, init: InitContext, cfg: ModelConfig):
        self.mode = cfg.feature_mode
        c = cfg.feature_channels
        depth = cfg.volume_extents[0]
        if self.mode in ("dual", "2d"):
            self.reduce = Conv2d(init, c * cfg.hourglass_count, cfg.c2d, k=1)
            if self.mode == "dual":
                attn_c = cfg.c2d + depth
                self.attn_block = ResidualBlock2D(
                    init, attn_c, attn_c, cfg.reduction_ratio,
                    pose_fused=cfg.attention_pose and cfg.pose_fused)
                self.attn_conv = Conv2d(init, attn_c, 1, k=1)
            self.hg_att = Hourglass2D(init, cfg.c2d, cfg.hourglass_depth,
                                      cfg.reduction_ratio, cfg.pose_fused)
            tail = []
            c_prev = cfg.c2d
            for c_next in cfg.dual2d_channels:
                tail.append(ResidualBlock2D(init, c_prev, c_next,
                                            cfg.reduction_ratio, cfg.pose_fused))
                c_prev = c_next
            self.tail2d = tail
            self.out2d = c_prev
        if self.mode in ("dual", "3d"):
            c0, c1 = cfg.dual3d_channels
            self.entry3d = Conv3d(init, 1, c0, k=3)
            self.entry_bn = BatchNorm(c0)
            self.block3d_a = ResidualBlock3D(init, c0, c0, cfg.reduction_ratio,
                                             cfg.pose_fused)
            self.block3d_b = ResidualBlock3D(init, c0, c1, cfg.reduction_ratio,
                                             cfg.pose_fused)
            self.out3d = c1

    @property
    def output_size(self) -> int:
        size = 0
        if self.mode in ("dual", "2d"):
            size += self.out2d
        if self.mode in ("dual", "3d"):
            size += self.out3d
        return size

    def forward(self, multilevel: list[Tensor], volume: Tensor,
                pose9: Optional[np.ndarray], mode: str) -> Tensor:
        attn_pose = pose9 if (self.mode == "dual" and
                              getattr(self.attn_block.gate, "pose_fused", False)) else None
        vectors = []
        if self.mode in ("dual", "2d"):
            f2d = self.reduce.forward(F.concat(multilevel, axis=1))
            if self.mode == "dual":
                stacked = F.concat([f2d, volume], axis=1)  # depth as channels
                weights = F.sigmoid(self.attn_conv.forward(
                    self.attn_block.forward(stacked, attn_pose, mode)))
                f2d = F.mul(f2d, weights)
            f2d = self.hg_att.forward(f2d, pose9, mode)
            h = f2d
            for block in self.tail2d:
                h = block.forward(h, pose9, mode)
                if h.data.shape[-1] >= 4:
                    h = F.avg_pool(h, 2, dims=2)
            vectors.append(F.global_avg_pool(h))
        if self.mode in ("dual", "3d"):
            n, d, hh, ww = volume.data.shape
            v = F.reshape(volume, (n, 1, d, hh, ww))
            v = F.relu(self.entry_bn.forward(self.entry3d.forward(v), mode))
            v = F.avg_pool(v, 2, dims=3)
            v = self.block3d_a.forward(v, pose9, mode)
            v = F.avg_pool(v, 2, dims=3)
            v = self.block3d_b.forward(v, pose9, mode)
            vectors.append(F.global_avg_pool(v))
        return vectors[0] if len(vectors) == 1 else F.concat(vectors, axis=1)


@dataclass
class ModelOutputs:
    pred_pose: Tensor              # (N, 3) Euler radians
    volume: Tensor                 # (N, D, H, W) in [0, 1]
    multilevel: list               # last feature map of each hourglass
    feature_vector: Tensor         # (N, F) fused dual-branch vector
    sparse: Optional[Tensor]       # (N, 204) or None (pose-head models)
    dense: Tensor                  # (N, 62) normalized parameters
    pose_head: Optional[Tensor]    # (N, 3) when the model has a pose head
    fused_pose9: Optional[np.ndarray]

    def keypoints(self) -> np.ndarray:
        if self.sparse is None:
            raise ShapeError("model has no sparse head")
        n = self.sparse.data.shape[0]
        return self.sparse.data.reshape(n, 68, 3)


class PFAModel(Module):
    """Complete two-stage network with sparse/dense (or pose) heads."""

    def __init__(self, config: ModelConfig, seed: int):
        self._config = config
        init = InitContext(seed)
        self.extractor = FeatureExtractor(init, config)
        self.prepose = PreposeRegressor(init, config)
        self.heatmap = HeatmapRegressor(init, config)
        self.dual = DualDimensional(init, config)
        vec = self.dual.output_size
        if config.head == "pose":
            self.pose_head = Linear(init, vec, 3)
        else:
            self.sparse_head = Linear(init, vec, 68 * 3)
            center = config.input_resolution / 2.0
            self.sparse_head.bias.data = np.tile([center, center, 0.0], 68)
        self.dense_head = Linear(init, vec, 62)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def forward(self, images: np.ndarray, pose_source: str = "predicted",
                gt_pose: Optional[np.ndarray] = None,
                pose_override: Optional[np.ndarray] = None,
                mode: str = "train") -> ModelOutputs:
        """Run the full network.

        pose_source picks what is fused into the pose-fused blocks:
        the network's own (gradient-blocked) prediction, the ground-truth
        pose, an explicit override, or nothing (required when the model
        was built pose-free).
        """
        if pose_source not in POSE_SOURCES:
            raise ValueError(f"pose_source must be one of {POSE_SOURCES}")
        cfg = self._config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (3, cfg.input_resolution,
                                                    cfg.input_resolution):
            raise ShapeError(f"expected images (N, 3, {cfg.input_resolution}, "
                             f"{cfg.input_resolution}), got {images.shape}")

        features = self.extractor.forward(Tensor(images), mode)
        pred_pose = self.prepose.forward(features, mode)

        if not cfg.pose_fused or pose_source == "none":
            pose9 = None
        elif pose_source == "predicted":
            pose9 = pose_to_rot9(pred_pose.data)
        elif pose_source == "gt":
            if gt_pose is None:
                raise ValueError("pose_source='gt' needs gt_pose")
            pose9 = pose_to_rot9(gt_pose)
        else:
            if pose_override is None:
                raise ValueError("pose_source='override' needs pose_override")
            pose9 = pose_to_rot9(pose_override)
        if pose9 is None and cfg.pose_fused:
            raise ShapeError("pose-fused model cannot run with pose_source='none'")

        volume, multilevel = self.heatmap.forward(features, pose9, mode)
        vec = self.dual.forward(multilevel, volume, pose9, mode)

        sparse = dense = pose_out = None
        if cfg.head == "pose":
            pose_out = self.pose_head.forward(vec)
        else:
            sparse = self.sparse_head.forward(vec)
        dense = self.dense_head.forward(vec)
        return ModelOutputs(pred_pose=pred_pose, volume=volume, multilevel=multilevel,
                            feature_vector=vec, sparse=sparse, dense=dense,
                            pose_head=pose_out, fused_pose9=pose9)

    def predict(self, images: np.ndarray, pose_source: str = "predicted",
                gt_pose: Optional[np.ndarray] = None,
                pose_override: Optional[np.ndarray] = None) -> ModelOutputs:
        """Inference forward: eval-mode batch norm, no tape."""
        with no_grad():
            return self.forward(images, pose_source=pose_source, gt_pose=gt_pose,
                                pose_override=pose_override, mode="eval")
