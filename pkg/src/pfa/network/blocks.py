"""Building blocks: layers, pose-fused channel attention, residual blocks,
and hourglasses.

The channel-attention gate follows the fusion recipe exactly: global
average pool, squeeze FC (c -> c'), concatenation of the 9-vector
rotation when pose fusion is on, excite FC (-> c), sigmoid, channel-wise
scaling. Without a pose vector this reduces to plain squeeze-excitation.

The pose vector always enters as a plain array (never a graph tensor):
gradients are blocked through the pose path by construction, so heatmap
or coordinate losses cannot corrupt pose training.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..core import functional as F
from ..core.module import Module
from ..core.tensor import Parameter, Tensor
from ..errors import ShapeError
from ..rng import stream

POSE_DIM = 9


class InitContext:
    """Deterministic weight-init streams keyed by creation order."""

    def __init__(self, seed: int):
        self.seed = seed
        self._counter = 0

    def next_stream(self):
        self._counter += 1
        return stream(self.seed, "init", self._counter)


class Conv2d(Module):
    def __init__(self, init: InitContext, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, padding: Optional[int] = None):
        rng = init.next_stream()
        std = np.sqrt(2.0 / (c_in * k * k))
        self.kernel = Parameter(rng.normal(scale=std, size=(c_out, c_in, k, k)), name="kernel")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, stride=self.stride, padding=self.padding)


class Conv3d(Module):
    def __init__(self, init: InitContext, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, padding: Optional[int] = None):
        rng = init.next_stream()
        std = np.sqrt(2.0 / (c_in * k ** 3))
        self.kernel = Parameter(rng.normal(scale=std, size=(c_out, c_in, k, k, k)),
                                name="kernel")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.kernel, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, init: InitContext, n_in: int, n_out: int):
        rng = init.next_stream()
        std = np.sqrt(1.0 / n_in)
        self.weight = Parameter(rng.normal(scale=std, size=(n_out, n_in)), name="weight")
        self.bias = Parameter(np.zeros(n_out), name="bias")

    def forward(self, x: Tensor) -> Tensor:
        return F.fully_connected(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels), name="gamma")
        self.beta = Parameter(np.zeros(channels), name="beta")
        self.state = F.BatchNormState.create(channels)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.state, mode=mode)


class PoseGate(Module):
    """Channel attention, optionally fused with the vectorized rotation."""

    def __init__(self, init: InitContext, channels: int, reduction: int,
                 pose_fused: bool):
        if channels % reduction:
            raise ShapeError(f"channels {channels} not divisible by reduction "
                             f"ratio {reduction}")
        reduced = channels // reduction
        self.pose_fused = pose_fused
        self.squeeze = Linear(init, channels, reduced)
        self.excite = Linear(init, reduced + (POSE_DIM if pose_fused else 0), channels)

    def forward(self, features: Tensor, pose9: Optional[np.ndarray]) -> Tensor:
        if self.pose_fused and pose9 is None:
            raise ShapeError("pose-fused gate needs a pose vector")
        if not self.pose_fused and pose9 is not None:
            raise ShapeError("plain SE gate got an unexpected pose vector")
        pooled = F.global_avg_pool(features)
        squeezed = self.squeeze.forward(pooled)
        if self.pose_fused:
            n = features.data.shape[0]
            pose = np.asarray(pose9, dtype=np.float64)
            if pose.shape != (n, POSE_DIM):
                raise ShapeError(f"pose vector must be ({n}, {POSE_DIM}), got {pose.shape}")
            squeezed = F.concat([Tensor(pose), squeezed], axis=1)
        weights = F.sigmoid(self.excite.forward(squeezed))
        return F.scale_channels(features, weights)


def pfrb_forward(features: Tensor, pose9: Optional[np.ndarray], gate: PoseGate) -> Tensor:
    """Gate a residual feature map by pose-fused channel attention."""
    return gate.forward(features, pose9)


class ResidualBlock2D(Module):
    """conv-bn-relu-conv-bn, gated, plus (projected) identity, relu."""

    def __init__(self, init: InitContext, c_in: int, c_out: int, reduction: int,
                 pose_fused: bool):
        self.conv1 = Conv2d(init, c_in, c_out)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv2d(init, c_out, c_out)
        self.bn2 = BatchNorm(c_out)
        self.gate = PoseGate(init, c_out, reduction, pose_fused)
        self.project = Conv2d(init, c_in, c_out, k=1) if c_in != c_out else None

    def forward(self, x: Tensor, pose9: Optional[np.ndarray], mode: str) -> Tensor:
        h = F.relu(self.bn1.forward(self.conv1.forward(x), mode))
        h = self.bn2.forward(self.conv2.forward(h), mode)
        h = self.gate.forward(h, pose9)
        skip = x if self.project is None else self.project.forward(x)
        return F.relu(F.add(h, skip))


class ResidualBlock3D(Module):
    def __init__(self, init: InitContext, c_in: int, c_out: int, reduction: int,
                 pose_fused: bool):
        self.conv1 = Conv3d(init, c_in, c_out)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv3d(init, c_out, c_out)
        self.bn2 = BatchNorm(c_out)
        self.gate = PoseGate(init, c_out, reduction, pose_fused)
        self.project = Conv3d(init, c_in, c_out, k=1) if c_in != c_out else None

    def forward(self, x: Tensor, pose9: Optional[np.ndarray], mode: str) -> Tensor:
        h = F.relu(self.bn1.forward(self.conv1.forward(x), mode))
        h = self.bn2.forward(self.conv2.forward(h), mode)
        h = self.gate.forward(h, pose9)
        skip = x if self.project is None else self.project.forward(x)
        return F.relu(F.add(h, skip))


class Hourglass2D(Module):
    """Recursive hourglass: identity skip at each scale plus an upsampled
    correction computed at half resolution. Downsampling is average
    pooling; all blocks share the gate kind of the enclosing network."""

    def __init__(self, init: InitContext, channels: int, depth: int, reduction: int,
                 pose_fused: bool):
        if depth < 1:
            raise ShapeError(f"hourglass depth must be >= 1, got {depth}")
        self.down_block = ResidualBlock2D(init, channels, channels, reduction, pose_fused)
        if depth > 1:
            self.inner = Hourglass2D(init, channels, depth - 1, reduction, pose_fused)
        else:
            self.inner = ResidualBlock2D(init, channels, channels, reduction, pose_fused)

    def forward(self, x: Tensor, pose9: Optional[np.ndarray], mode: str) -> Tensor:
        low = self.down_block.forward(F.avg_pool(x, 2, dims=2), pose9, mode)
        low = self.inner.forward(low, pose9, mode)
        return F.add(x, F.upsample_nearest2d(low, 2))
