"""Closed-form similarity fitting between landmark sets, Euler-angle
conversions, and ICP registration.

Conventions fixed here and used by every other module:

* Euler angles are intrinsic rotations applied pitch (x axis), then yaw
  (y axis), then roll (z axis): ``R = Rx(pitch) @ Ry(yaw) @ Rz(roll)``.
  The degenerate configuration of this sequence is |yaw| = pi/2, where
  pitch and roll couple; conversion then fixes roll to 0 and sets the
  ``gimbal_lock`` flag.
* The 68-keypoint ordering is: 0-16 jaw (left to right), 17-21 left brow,
  22-26 right brow, 27-30 nose bridge (top to tip), 31-35 nostril row,
  36-41 left eye, 42-47 right eye, 48-59 outer mouth, 60-67 inner mouth.
  Outer eye corners are indices 36 (left) and 45 (right).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateConfigurationError, ShapeError

LEFT_EYE_OUTER = 36
RIGHT_EYE_OUTER = 45


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"landmark points must be (N, 3), got {pts.shape}")
    return pts


@dataclass
class LandmarkSet:
    """Ordered 3D points in image-pixel units."""

    points: np.ndarray
    semantic: str = "geometry"     # "keypoints68" | "geometry"

    def __post_init__(self):
        self.points = _as_points(self.points)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")
        if self.semantic == "keypoints68" and len(self.points) != 68:
            raise ShapeError(f"keypoints68 set must have 68 points, got {len(self.points)}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class HeadPose:
    """Euler angles in radians, each wrapped to (-pi, pi]."""

    pitch: float
    yaw: float
    roll: float
    gimbal_lock: bool = False

    def __post_init__(self):
        self.pitch = wrap_angle(self.pitch)
        self.yaw = wrap_angle(self.yaw)
        self.roll = wrap_angle(self.roll)

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll])


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= 1e-9:
            raise ValueError(f"rotation not orthonormal, ||R^T R - I||_inf = {err:.3e}")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def inverse(self) -> "SimilarityTransform":
        rot_inv = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rot_inv,
                                   -rot_inv @ self.translation / self.scale)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = float(a)
    wrapped = math.remainder(a, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def euler_to_rot(pose: HeadPose) -> np.ndarray:
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    cr, sr = math.cos(pose.roll), math.sin(pose.roll)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rx @ ry @ rz


def rot_to_euler(rot: np.ndarray, lock_tol: float = 1e-6) -> HeadPose:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {rot.shape}")
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err >= 1e-6 or np.linalg.det(rot) < 0:
        raise ValueError(f"not a proper rotation (||R^T R - I||_inf = {err:.3e})")

    sy = float(np.clip(rot[0, 2], -1.0, 1.0))
    yaw = math.asin(sy)
    if abs(abs(yaw) - math.pi / 2) < lock_tol:
        # Pitch and roll couple; fix roll = 0 and fold everything into pitch.
        sign = 1.0 if yaw > 0 else -1.0
        pitch = math.atan2(sign * rot[1, 0], rot[1, 1])
        return HeadPose(pitch=pitch, yaw=yaw, roll=0.0, gimbal_lock=True)
    pitch = math.atan2(-rot[1, 2], rot[2, 2])
    roll = math.atan2(-rot[0, 1], rot[0, 0])
    return HeadPose(pitch=pitch, yaw=yaw, roll=roll)


def fit_similarity(sample: LandmarkSet, mean: LandmarkSet) -> SimilarityTransform:
    """Least-squares similarity mapping mean onto sample.

    Scale is the ratio of root total variances; rotation comes from the
    SVD of the cross-covariance with the determinant corrected to +1 by
    negating the last column of U when U V^T would reflect; translation
    aligns the centroids under (scale, rotation).
    """
    xs = sample.points
    xm = mean.points
    if len(xs) != len(xm):
        raise ShapeError(f"point count mismatch: sample has {len(xs)}, mean has {len(xm)}")
    if len(xs) < 3:
        raise DegenerateConfigurationError(f"need at least 3 points, got {len(xs)}")

    cs = xs - xs.mean(axis=0)
    cm = xm - xm.mean(axis=0)
    var_s = float((cs ** 2).sum())
    var_m = float((cm ** 2).sum())
    if var_s <= 0.0 or var_m <= 0.0:
        raise DegenerateConfigurationError("all points coincident; similarity undefined")

    scale = math.sqrt(var_s / var_m)
    cov = cs.T @ cm
    u, sv, vt = np.linalg.svd(cov)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise DegenerateConfigurationError(
            f"cross-covariance rank < 2 (singular values {sv}); "
            "configuration is collinear or degenerate")
    if np.linalg.det(u @ vt) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
    rotation = u @ vt
    translation = xs.mean(axis=0) - scale * rotation @ xm.mean(axis=0)
    return SimilarityTransform(scale, rotation, translation)


def apply_transform(t: SimilarityTransform, pts: LandmarkSet) -> LandmarkSet:
    moved = t.scale * pts.points @ t.rotation.T + t.translation
    return LandmarkSet(moved, semantic=pts.semantic)


def align_g2k(geometry: LandmarkSet, predicted_keypoints: LandmarkSet,
              keypoint_index_map: np.ndarray) -> LandmarkSet:
    """Align dense geometry onto predicted keypoints via the similarity of
    the two keypoint sets (the geometry's keypoint subset vs predictions)."""
    idx = np.asarray(keypoint_index_map, dtype=np.int64)
    if idx.max() >= len(geometry.points) or idx.min() < 0:
        raise ShapeError(f"keypoint index map out of range for geometry of "
                         f"{len(geometry.points)} points")
    subset = LandmarkSet(geometry.points[idx], semantic=predicted_keypoints.semantic)
    t = fit_similarity(predicted_keypoints, subset)
    return apply_transform(t, geometry)


def _nearest_indices(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Index of the nearest reference row for each query row (exact, chunked)."""
    out = np.empty(len(query), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(len(reference), 1))
    for start in range(0, len(query), chunk):
        q = query[start:start + chunk]
        d2 = ((q[:, None, :] - reference[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = d2.argmin(axis=1)
    return out


@dataclass
class ICPResult:
    transform: SimilarityTransform
    mean_distance: float
    iterations: int
    history: list = field(default_factory=list)


def icp_align(source: LandmarkSet, target: LandmarkSet,
              max_iters: int = 50, tol: float = 1e-10) -> ICPResult:
    """Alternate nearest-neighbor correspondence and similarity fitting
    until the mean correspondence distance stops improving."""
    src = source.points
    tgt = target.points
    best = SimilarityTransform.identity()
    moved = src
    nn = _nearest_indices(moved, tgt)
    best_dist = float(np.linalg.norm(moved - tgt[nn], axis=1).mean())
    history = [best_dist]
    iterations = 0

    for iterations in range(1, max_iters + 1):
        corr = LandmarkSet(tgt[nn])
        candidate = fit_similarity(corr, source)
        moved = apply_transform(candidate, source).points
        nn = _nearest_indices(moved, tgt)
        dist = float(np.linalg.norm(moved - tgt[nn], axis=1).mean())
        if dist < best_dist:
            improvement = best_dist - dist
            best, best_dist = candidate, dist
            history.append(dist)
            if improvement < tol:
                break
        else:
            break
    return ICPResult(transform=best, mean_distance=best_dist,
                     iterations=iterations, history=history)


# ---------------------------------------------------------------------------
# plain-text landmark and index-map files
# ---------------------------------------------------------------------------

def save_landmarks(path, landmarks: LandmarkSet) -> None:
    with open(path, "w") as f:
        f.write(f"# {len(landmarks.points)} points, semantic={landmarks.semantic}\n")
        for x, y, z in landmarks.points:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_landmarks(path, semantic: str = "geometry") -> LandmarkSet:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}: expected 'x y z' per line, got {line!r}")
        rows.append([float(p) for p in parts])
    return LandmarkSet(np.array(rows), semantic=semantic)


def save_index_map(path, indices: np.ndarray) -> None:
    with open(path, "w") as f:
        for i in np.asarray(indices).ravel():
            f.write(f"{int(i)}\n")


def load_index_map(path) -> np.ndarray:
    values = [int(line.split("#", 1)[0]) for line in Path(path).read_text().splitlines()
              if line.split("#", 1)[0].strip()]
    return np.array(values, dtype=np.int64)
