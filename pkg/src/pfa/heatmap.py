"""Single-volume 3D heatmap codec and the Adaptive Wing loss.

All landmarks share one D x H x W volume (axes z, y, x): each landmark
contributes an isotropic Gaussian blob in voxel units and blobs combine by
voxelwise maximum, so coincident landmarks cannot push values past 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .geometry import LandmarkSet
from .core.tensor import Tensor, make_output

VOLUME_MAGIC = b"PFAVOL1"
IMAGE_MAGIC = b"PFAIMG1"

# Blob width at the reference 16^3 resolution, scaled proportionally for
# other extents so adjacent keypoints stay separable.
SIGMA_AT_16 = 1.5


def default_sigma(extents: tuple[int, int, int]) -> float:
    return SIGMA_AT_16 * min(extents) / 16.0


@dataclass
class VoxelMap:
    """Affine map from voxel indices (w, h, d) to image units (x, y, z):
    image = voxel * scale + offset, per axis in (x, y, z) order."""

    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)

    @classmethod
    def for_image(cls, extents: tuple[int, int, int], image_size: int,
                  z_half_range: float | None = None) -> "VoxelMap":
        """Spread x/y voxel centers over the image square and z voxel
        centers over [-z_half_range, z_half_range] (default half image)."""
        d, h, w = extents
        if z_half_range is None:
            z_half_range = image_size / 2.0
        sx = image_size / w
        sy = image_size / h
        sz = 2.0 * z_half_range / d
        return cls(scale=[sx, sy, sz],
                   offset=[0.5 * sx - 0.5, 0.5 * sy - 0.5, 0.5 * sz - z_half_range])

    def image_to_voxel(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.offset) / self.scale

    def voxel_to_image(self, voxels: np.ndarray) -> np.ndarray:
        return np.asarray(voxels, dtype=np.float64) * self.scale + self.offset


@dataclass
class HeatmapVolume:
    """One volume of [0, 1] values housing all landmark blobs jointly."""

    values: np.ndarray            # (D, H, W)
    mapping: VoxelMap
    clamped_landmarks: int = 0    # encode() inputs that fell outside the volume

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"heatmap volume must be 3-d, got {self.values.shape}")
        lo, hi = float(self.values.min(initial=0.0)), float(self.values.max(initial=0.0))
        if lo < -1e-12 or hi > 1.0 + 1e-12:
            raise ValueError(f"volume values must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class AWingParams:
    """Adaptive Wing hyperparameters (defaults from the cited reference)."""

    omega: float = 14.0
    theta: float = 0.5
    epsilon: float = 1.0
    alpha: float = 2.1

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0,1), got {self.theta}")
        if min(self.omega, self.epsilon, self.alpha) <= 0.0:
            raise ValueError("omega, epsilon, alpha must be positive")
        if self.alpha <= 1.0:
            raise ValueError(f"alpha must exceed 1 + max target value, got {self.alpha}")


def encode(landmarks: LandmarkSet, extents: tuple[int, int, int],
           sigma: float | None = None, mapping: VoxelMap | None = None,
           image_size: int | None = None) -> HeatmapVolume:
    """Render landmarks as Gaussian blobs combined by voxelwise maximum.

    Landmarks mapping outside the volume are clamped onto the boundary and
    counted in ``clamped_landmarks``. A landmark exactly on a voxel center
    produces a peak of exactly 1.
    """
    d, h, w = extents
    if mapping is None:
        if image_size is None:
            raise ValueError("encode needs either a VoxelMap or an image_size")
        mapping = VoxelMap.for_image(extents, image_size)
    if sigma is None:
        sigma = default_sigma(extents)

    vox = mapping.image_to_voxel(landmarks.points)   # (N, 3) as (x, y, z)
    limits = np.array([w - 1, h - 1, d - 1], dtype=np.float64)
    clipped = np.clip(vox, 0.0, limits)
    clamped = int(np.sum(np.any(vox != clipped, axis=1)))

    inv = -0.5 / sigma ** 2
    grid_x = np.arange(w, dtype=np.float64)
    grid_y = np.arange(h, dtype=np.float64)
    grid_z = np.arange(d, dtype=np.float64)
    out = np.zeros(extents)
    for cx, cy, cz in clipped:
        bx = np.exp(inv * (grid_x - cx) ** 2)
        by = np.exp(inv * (grid_y - cy) ** 2)
        bz = np.exp(inv * (grid_z - cz) ** 2)
        np.maximum(out, bz[:, None, None] * (by[:, None] * bx)[None, :, :], out=out)
    return HeatmapVolume(values=out, mapping=mapping, clamped_landmarks=clamped)


@dataclass
class DecodeResult:
    landmarks: LandmarkSet
    peaks_found: int
    requested: int

    @property
    def complete(self) -> bool:
        return self.peaks_found == self.requested


def decode(volume: HeatmapVolume, n_peaks: int, min_separation: float = 2.0,
           floor: float = 1e-9) -> DecodeResult:
    """Greedy non-maximum-suppressed peaks, refined by a 3-voxel parabolic
    fit per axis and mapped back to image units."""
    if n_peaks < 1:
        raise ValueError(f"n_peaks must be >= 1, got {n_peaks}")
    work = volume.values.copy()
    d, h, w = work.shape
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    found = []
    for _ in range(n_peaks):
        idx = np.unravel_index(np.argmax(work), work.shape)
        if work[idx] <= floor:
            break
        pz, py, px = idx
        sub = [float(pz), float(py), float(px)]
        for axis, pos in enumerate(idx):
            if 0 < pos < work.shape[axis] - 1:
                lo_i = list(idx); lo_i[axis] = pos - 1
                hi_i = list(idx); hi_i[axis] = pos + 1
                lo, mid, hi = volume.values[tuple(lo_i)], volume.values[idx], \
                    volume.values[tuple(hi_i)]
                denom = lo - 2.0 * mid + hi
                if denom < 0.0:
                    sub[axis] += float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))
        found.append(sub)
        dist2 = (zz - pz) ** 2 + (yy - py) ** 2 + (xx - px) ** 2
        work[dist2 <= min_separation ** 2] = 0.0

    if found:
        vox_zyx = np.array(found)
        vox_xyz = vox_zyx[:, ::-1]
        points = volume.mapping.voxel_to_image(vox_xyz)
    else:
        points = np.zeros((0, 3))
    return DecodeResult(landmarks=LandmarkSet(points) if len(points) else
                        LandmarkSet(np.zeros((0, 3))),
                        peaks_found=len(found), requested=n_peaks)


def volume_diff(a: HeatmapVolume, b: HeatmapVolume) -> np.ndarray:
    """Signed difference field a - b (diagnostics / dumps)."""
    if a.values.shape != b.values.shape:
        raise ShapeError(f"volume_diff: extents differ, {a.values.shape} vs "
                         f"{b.values.shape}")
    return a.values - b.values


# ---------------------------------------------------------------------------
# Adaptive Wing loss (differentiable op)
# ---------------------------------------------------------------------------

def _awing_pieces(delta_abs: np.ndarray, y: np.ndarray, p: AWingParams):
    """Per-element loss and d(loss)/d|delta| of the piecewise penalty."""
    exponent = p.alpha - y
    wing = delta_abs < p.theta
    ratio_d = (delta_abs / p.epsilon) ** exponent
    loss_wing = p.omega * np.log1p(ratio_d)

    ratio_t = (p.theta / p.epsilon) ** exponent
    a_coef = p.omega * (1.0 / (1.0 + ratio_t)) * exponent \
        * (p.theta / p.epsilon) ** (exponent - 1.0) / p.epsilon
    c_coef = p.theta * a_coef - p.omega * np.log1p(ratio_t)
    loss_lin = a_coef * delta_abs - c_coef

    with np.errstate(divide="ignore", invalid="ignore"):
        grad_wing = p.omega * exponent * (delta_abs / p.epsilon) ** (exponent - 1.0) \
            / (p.epsilon * (1.0 + ratio_d))
    grad_wing = np.where(delta_abs > 0.0, grad_wing, 0.0)

    loss = np.where(wing, loss_wing, loss_lin)
    dloss = np.where(wing, grad_wing, a_coef)
    return loss, dloss


def awing_loss(pred: Tensor, target: np.ndarray,
               params: AWingParams | None = None) -> Tensor:
    """Adaptive Wing penalty between predicted and target volumes, meaned
    over all elements, with the gradient defined everywhere."""
    if params is None:
        params = AWingParams()
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"awing_loss: extent mismatch, pred {pred.data.shape} vs "
                         f"target {target.shape}")
    delta = target - pred.data
    delta_abs = np.abs(delta)
    loss, dloss = _awing_pieces(delta_abs, target, params)
    n = pred.data.size

    def bwd(g):
        # d|delta|/dpred = -sign(delta); zero measure at delta == 0.
        return (g * dloss * -np.sign(delta) / n,)

    return make_output(np.asarray(loss.mean()), (pred,), bwd)


def awing_loss_volumes(pred: HeatmapVolume, target: HeatmapVolume,
                       params: AWingParams | None = None) -> float:
    """Convenience scalar evaluation on plain volumes."""
    return awing_loss(Tensor(pred.values), target.values, params).item()


# ---------------------------------------------------------------------------
# binary dumps
# ---------------------------------------------------------------------------

def save_volume(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ShapeError(f"volume dump needs 3-d values, got {values.shape}")
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<3I", *values.shape))
        f.write(values.astype("<f4").tobytes())


def load_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:7] != VOLUME_MAGIC:
        raise CheckpointError(f"{path}: unknown magic {raw[:7]!r}")
    extents = struct.unpack_from("<3I", raw, 7)
    count = extents[0] * extents[1] * extents[2]
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=19)
    if len(raw) != 19 + 4 * count:
        raise CheckpointError(f"{path}: size does not match extents {extents}")
    return values.reshape(extents).astype(np.float64)


def save_image(path, values: np.ndarray) -> None:
    """Image dump: like the volume format with (C, H, W) float64 payload."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ShapeError(f"image dump needs (C, H, W) values, got {values.shape}")
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<3I", *values.shape))
        f.write(values.astype("<f8").tobytes())


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:7] != IMAGE_MAGIC:
        raise CheckpointError(f"{path}: unknown magic {raw[:7]!r}")
    extents = struct.unpack_from("<3I", raw, 7)
    count = extents[0] * extents[1] * extents[2]
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=19)
    if len(raw) != 19 + 8 * count:
        raise CheckpointError(f"{path}: size does not match extents {extents}")
    return values.reshape(extents).astype(np.float64)


def write_pgm_slices(values: np.ndarray, out_dir, prefix: str,
                     signed: bool = False) -> list[Path]:
    """Axial slices as binary PGM images for quick inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in range(values.shape[0]):
        plane = values[z]
        if signed:
            gray = np.clip((plane + 1.0) * 127.5, 0, 255).astype(np.uint8)
        else:
            gray = np.clip(plane * 255.0, 0, 255).astype(np.uint8)
        path = out_dir / f"{prefix}_z{z:02d}.pgm"
        with open(path, "wb") as f:
            f.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
            f.write(gray.tobytes())
        paths.append(path)
    return paths
