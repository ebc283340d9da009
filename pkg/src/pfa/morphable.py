"""Synthetic morphable face model.

A seeded stand-in for a licensed 3DMM asset: a face-like mean point
lattice, orthonormal identity/expression bases, a 68-keypoint subset, and
the z-score codec for the 62-dim parameter vector
``q = [R(9, scale folded in), T(3), alpha_id(40), alpha_exp(10)]``.

Frame convention: x right, y down (image axes), z toward the camera. The
mean geometry lives in model units with extent ``50 / sqrt(n_geometry)``
so that one unit of any basis parameter displaces points by about 2% of
the face extent; the scaled rotation in q maps model units to pixels.

Layout of the geometry array (also how the basis file is interpreted):
midline keypoints, midline shell points, then mirror pairs stored
adjacently (keypoint pairs first, shell pairs after). This makes the
left-right flip a pure index permutation combined with an x sign flip,
and the bases are built inside the +/-1 eigenspaces of that flip operator
so mirroring a face maps exactly onto a sign pattern over (alpha_id,
alpha_exp) plus a conjugated rotation block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, ShapeError
from .geometry import LandmarkSet
from .rng import stream

BASIS_MAGIC = b"PFABAS1"
N_ID = 40
N_EXP = 10
N_PARAMS = 62
SIGMA_FLOOR = 1e-8

# 21-point subset used by the visible-landmark evaluation protocol
# (brows, eye corners, nose, mouth cross, jaw extremes).
VISIBLE21 = np.array([17, 19, 21, 22, 24, 26, 36, 39, 42, 45,
                      27, 30, 31, 35, 48, 51, 54, 57, 0, 8, 16])


# ---------------------------------------------------------------------------
# canonical 68-keypoint template (normalized units, x right / y down)
# ---------------------------------------------------------------------------

def _canonical_keypoints() -> tuple[np.ndarray, list[tuple[int, int]], list[int]]:
    """Keypoint template plus its mirror pairs and midline indices.

    Ordering: 0-16 jaw (left to right), 17-21 left brow, 22-26 right brow,
    27-30 nose bridge, 31-35 nostril row, 36-41 left eye, 42-47 right eye,
    48-59 outer mouth, 60-67 inner mouth.
    """
    pts = np.zeros((68, 3))
    pairs: list[tuple[int, int]] = []
    midline: list[int] = []

    # Jaw arc: ear level at the sides, chin at bottom center.
    for i in range(17):
        u = (i - 8) / 8.0
        phi = u * np.radians(100.0)
        pts[i] = (0.90 * np.sin(phi), 0.894 * np.cos(phi) + 0.056,
                  0.05 - 0.45 * abs(np.sin(phi)))
    pairs += [(i, 16 - i) for i in range(8)]
    midline.append(8)

    # Brows: left 17-21 outer to inner, right 22-26 inner to outer.
    brow_x = np.array([-0.70, -0.56, -0.42, -0.29, -0.15])
    brow_y = -0.50 - 0.08 * np.sin(np.linspace(0, np.pi, 5))
    for j in range(5):
        pts[17 + j] = (brow_x[j], brow_y[j], 0.50)
        pts[26 - j] = (-brow_x[j], brow_y[j], 0.50)
    pairs += [(17 + j, 26 - j) for j in range(5)]

    # Nose bridge (midline) and nostril row.
    for j, (y, z) in enumerate([(-0.35, 0.60), (-0.20, 0.68), (-0.05, 0.76), (0.10, 0.85)]):
        pts[27 + j] = (0.0, y, z)
        midline.append(27 + j)
    nostril_x = np.array([-0.18, -0.09, 0.0, 0.09, 0.18])
    for j in range(5):
        pts[31 + j] = (nostril_x[j], 0.22, 0.55)
    pairs += [(31, 35), (32, 34)]
    midline.append(33)

    # Eyes: hexagons, outer corners at 36 (left) and 45 (right).
    left_eye = np.array([
        (-0.55, -0.30, 0.42), (-0.45, -0.36, 0.46), (-0.32, -0.36, 0.46),
        (-0.22, -0.30, 0.46), (-0.32, -0.24, 0.46), (-0.45, -0.24, 0.46)])
    for j in range(6):
        pts[36 + j] = left_eye[j]
    eye_map = {42: 39, 43: 38, 44: 37, 45: 36, 46: 41, 47: 40}
    for right, left in eye_map.items():
        pts[right] = pts[left] * np.array([-1.0, 1.0, 1.0])
        pairs.append((left, right))

    # Outer mouth 48-59 (clockwise from left corner), inner mouth 60-67.
    outer = [(-0.32, 0.52), (-0.21, 0.46), (-0.10, 0.42), (0.0, 0.40),
             (0.10, 0.42), (0.21, 0.46), (0.32, 0.52), (0.21, 0.59),
             (0.10, 0.63), (0.0, 0.64), (-0.10, 0.63), (-0.21, 0.59)]
    for j, (x, y) in enumerate(outer):
        pts[48 + j] = (x, y, 0.50)
    pairs += [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    midline += [51, 57]
    inner = [(-0.22, 0.52), (-0.10, 0.49), (0.0, 0.48), (0.10, 0.49),
             (0.22, 0.52), (0.10, 0.55), (0.0, 0.56), (-0.10, 0.55)]
    for j, (x, y) in enumerate(inner):
        pts[60 + j] = (x, y, 0.50)
    pairs += [(60, 64), (61, 63), (65, 67)]
    midline += [62, 66]

    return pts, pairs, midline


def keypoint_flip_permutation() -> np.ndarray:
    """Index permutation applied to the 68 keypoints under a left-right flip."""
    _, pairs, midline = _canonical_keypoints()
    perm = np.empty(68, dtype=np.int64)
    for i in midline:
        perm[i] = i
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return perm


# ---------------------------------------------------------------------------
# basis types
# ---------------------------------------------------------------------------

@dataclass
class PCAParams:
    """62-dim parameter vector [R(9), T(3), alpha_id(40), alpha_exp(10)]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape != (N_PARAMS,):
            raise ShapeError(f"PCAParams needs exactly {N_PARAMS} values, "
                             f"got {self.values.shape}")

    @property
    def rotation(self) -> np.ndarray:
        """Scaled rotation, the 9 leading values reshaped row-major to 3x3."""
        return self.values[:9].reshape(3, 3)

    @property
    def translation(self) -> np.ndarray:
        return self.values[9:12]

    @property
    def alpha_id(self) -> np.ndarray:
        return self.values[12:12 + N_ID]

    @property
    def alpha_exp(self) -> np.ndarray:
        return self.values[12 + N_ID:]

    @classmethod
    def pack(cls, scaled_rotation: np.ndarray, translation: np.ndarray,
             alpha_id: np.ndarray, alpha_exp: np.ndarray) -> "PCAParams":
        return cls(np.concatenate([np.asarray(scaled_rotation).reshape(9),
                                   np.asarray(translation).reshape(3),
                                   np.asarray(alpha_id).reshape(N_ID),
                                   np.asarray(alpha_exp).reshape(N_EXP)]))


@dataclass
class ParamStats:
    """Per-dimension z-score statistics over a training set."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(N_PARAMS)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(N_PARAMS)
        if np.any(self.sigma <= 0):
            raise ValueError("sigma entries must be positive")


@dataclass
class MorphableBasis:
    mean_geometry: LandmarkSet
    shape_basis: np.ndarray        # (3*N_g, 40), orthonormal columns
    expression_basis: np.ndarray   # (3*N_g, 10), orthonormal columns
    keypoint_index_map: np.ndarray
    seed: int
    flip_permutation: Optional[np.ndarray] = None   # geometry index permutation
    shape_parity: Optional[np.ndarray] = None       # +/-1 per shape column
    expression_parity: Optional[np.ndarray] = None  # +/-1 per expression column
    keypoint_flip: np.ndarray = field(default_factory=keypoint_flip_permutation)

    @property
    def n_geometry(self) -> int:
        return len(self.mean_geometry.points)

    def mean_keypoints(self) -> LandmarkSet:
        return LandmarkSet(self.mean_geometry.points[self.keypoint_index_map],
                           semantic="keypoints68")


def _shell_counts(n_shell: int) -> tuple[int, int]:
    """Split shell points into (midline, pairs) with matching parity."""
    n_mid = max(2, int(round(0.08 * n_shell)))
    if (n_shell - n_mid) % 2:
        n_mid += 1
    return n_mid, (n_shell - n_mid) // 2


def _flip_operator(perm: np.ndarray):
    """Apply the mirror operator to stacked (3n,) column vectors."""
    sign = np.tile([-1.0, 1.0, 1.0], len(perm))

    def op(vec: np.ndarray) -> np.ndarray:
        v = vec.reshape(len(perm), 3)[perm].reshape(-1)
        return v * sign

    return op


def _orthonormal_block(rng, columns: int, op, parity: float, dim: int) -> np.ndarray:
    """Random orthonormal columns inside one eigenspace of the flip operator."""
    raw = rng.normal(size=(dim, columns))
    projected = 0.5 * (raw + parity * np.apply_along_axis(op, 0, raw))
    q, r = np.linalg.qr(projected)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def build_synthetic_basis(seed: int, n_geometry: int) -> MorphableBasis:
    """Deterministic face-like basis: ellipsoid shell with feature clusters,
    mirror-paired layout, and flip-equivariant orthonormal bases."""
    if n_geometry < 500:
        raise ValueError(f"n_geometry must be >= 500, got {n_geometry}")

    kp, kp_pairs, kp_midline = _canonical_keypoints()
    n_shell = n_geometry - 68
    n_mid_shell, n_pair_shell = _shell_counts(n_shell)
    rng = stream(seed, "basis", n_geometry)

    # Midline shell points: profile curve from forehead over nose to chin.
    t = rng.uniform(0.0, 1.0, size=n_mid_shell)
    phi = (t - 0.5) * np.radians(160.0)
    mid_shell = np.stack([np.zeros(n_mid_shell),
                          1.05 * np.sin(phi),
                          0.75 * np.cos(phi) + rng.normal(scale=0.02, size=n_mid_shell)],
                         axis=1)

    # Paired shell points: front half-ellipsoid plus feature clusters.
    n_uniform = int(0.6 * n_pair_shell)
    theta = rng.uniform(np.radians(5), np.radians(85), size=n_uniform)
    elev = rng.uniform(-np.radians(75), np.radians(75), size=n_uniform)
    uniform = np.stack([0.95 * np.sin(theta) * np.cos(elev),
                        1.05 * np.sin(elev),
                        0.75 * np.cos(theta) * np.cos(elev)], axis=1)
    centers = np.array([(0.40, -0.30, 0.45),   # eye region
                        (0.12, 0.10, 0.70),    # nose flank
                        (0.20, 0.52, 0.50),    # mouth corner region
                        (0.55, 0.15, 0.25)])   # cheek
    n_cluster = n_pair_shell - n_uniform
    which = rng.integers(0, len(centers), size=n_cluster)
    cluster = centers[which] + rng.normal(scale=0.12, size=(n_cluster, 3))
    cluster[:, 0] = np.abs(cluster[:, 0]) + 0.01  # keep off the midline
    half = np.vstack([uniform, cluster])
    pair_shell = np.empty((2 * n_pair_shell, 3))
    pair_shell[0::2] = half
    pair_shell[1::2] = half * np.array([-1.0, 1.0, 1.0])

    # Assemble: kp midline, shell midline, kp pairs (adjacent), shell pairs.
    n_kp_mid = len(kp_midline)
    points = np.vstack([kp[kp_midline], mid_shell,
                        np.vstack([[kp[a], kp[b]] for a, b in kp_pairs]).reshape(-1, 3),
                        pair_shell])
    assert points.shape == (n_geometry, 3)

    kp_index = np.empty(68, dtype=np.int64)
    for slot, i in enumerate(kp_midline):
        kp_index[i] = slot
    pair_base = n_kp_mid + n_mid_shell
    for p, (a, b) in enumerate(kp_pairs):
        kp_index[a] = pair_base + 2 * p
        kp_index[b] = pair_base + 2 * p + 1

    n_mid_total = n_kp_mid + n_mid_shell
    perm = np.arange(n_geometry)
    perm[n_mid_total::2] = np.arange(n_mid_total + 1, n_geometry, 2)
    perm[n_mid_total + 1::2] = np.arange(n_mid_total, n_geometry, 2)

    # Model units: extent 50/sqrt(n) makes a unit parameter displace points
    # by ~2% of the extent given unit-norm basis columns.
    extent = 50.0 / np.sqrt(n_geometry)
    span = points[:, 1].max() - points[:, 1].min()
    points = points * (extent / span)

    op = _flip_operator(perm)
    dim = 3 * n_geometry
    rng_basis = stream(seed, "basis-columns", n_geometry)
    sym = _orthonormal_block(rng_basis, 25, op, +1.0, dim)
    anti = _orthonormal_block(rng_basis, 25, op, -1.0, dim)
    shape_basis = np.concatenate([sym[:, :20], anti[:, :20]], axis=1)
    expression_basis = np.concatenate([sym[:, 20:25], anti[:, 20:25]], axis=1)
    shape_parity = np.concatenate([np.ones(20), -np.ones(20)])
    expression_parity = np.concatenate([np.ones(5), -np.ones(5)])

    return MorphableBasis(
        mean_geometry=LandmarkSet(points),
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        keypoint_index_map=kp_index,
        seed=seed,
        flip_permutation=perm,
        shape_parity=shape_parity,
        expression_parity=expression_parity,
    )


# ---------------------------------------------------------------------------
# reconstruction and the z-score codec
# ---------------------------------------------------------------------------

def reconstruct(q: PCAParams, basis: MorphableBasis) -> LandmarkSet:
    """Geometry from raw (denormalized) parameters:
    ``x = R @ (mean + A_id a_id + A_exp a_exp) + T`` with scale folded in R."""
    offset = basis.shape_basis @ q.alpha_id + basis.expression_basis @ q.alpha_exp
    base = basis.mean_geometry.points + offset.reshape(-1, 3)
    out = base @ q.rotation.T + q.translation
    return LandmarkSet(out)


def reconstruct_keypoints(q: PCAParams, basis: MorphableBasis) -> LandmarkSet:
    """Keypoint rows of the reconstruction (bit-identical to slicing it)."""
    full = reconstruct(q, basis)
    return LandmarkSet(full.points[basis.keypoint_index_map], semantic="keypoints68")


def compute_param_stats(training_params: Sequence[PCAParams]) -> ParamStats:
    """Per-dimension mean and population standard deviation, floored."""
    if len(training_params) < 2:
        raise ValueError(f"need at least 2 samples, got {len(training_params)}")
    mat = np.stack([p.values for p in training_params])
    mu = mat.mean(axis=0)
    sigma = np.maximum(mat.std(axis=0), SIGMA_FLOOR)
    return ParamStats(mu=mu, sigma=sigma)


def normalize(q: PCAParams, stats: ParamStats) -> PCAParams:
    return PCAParams((q.values - stats.mu) / stats.sigma)


def denormalize(q_norm: PCAParams, stats: ParamStats) -> PCAParams:
    return PCAParams(q_norm.values * stats.sigma + stats.mu)


def flip_params(q: PCAParams, basis: MorphableBasis, image_width: float) -> PCAParams:
    """Parameters of the horizontally mirrored face (x -> width-1-x).

    With the mirror operator F = diag(-1,1,1) and the flip-equivariant
    basis, the mirrored face is F R F (mean + A (parity * alpha)) + F T + c.
    """
    if basis.flip_permutation is None:
        raise ValueError("basis has no flip structure; cannot mirror parameters")
    f = np.diag([-1.0, 1.0, 1.0])
    offset = np.array([image_width - 1.0, 0.0, 0.0])
    return PCAParams.pack(f @ q.rotation @ f,
                          f @ q.translation + offset,
                          basis.shape_parity * q.alpha_id,
                          basis.expression_parity * q.alpha_exp)


# ---------------------------------------------------------------------------
# basis file format
# ---------------------------------------------------------------------------

def save_basis(path, basis: MorphableBasis) -> None:
    n = basis.n_geometry
    with open(path, "wb") as f:
        f.write(BASIS_MAGIC)
        f.write(struct.pack("<Q", basis.seed))
        f.write(struct.pack("<I", n))
        f.write(basis.mean_geometry.points.astype("<f8").tobytes())
        f.write(basis.shape_basis.astype("<f8").tobytes())
        f.write(basis.expression_basis.astype("<f8").tobytes())
        f.write(basis.keypoint_index_map.astype("<u4").tobytes())


def load_basis(path) -> MorphableBasis:
    raw = Path(path).read_bytes()
    if raw[:7] != BASIS_MAGIC:
        raise CheckpointError(f"{path}: unknown magic {raw[:7]!r}")
    pos = 7
    (seed,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4

    def block(count):
        nonlocal pos
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        return arr.astype(np.float64)

    mean = block(3 * n).reshape(n, 3)
    shape_basis = block(3 * n * N_ID).reshape(3 * n, N_ID)
    expression_basis = block(3 * n * N_EXP).reshape(3 * n, N_EXP)
    kp_index = np.frombuffer(raw, dtype="<u4", count=68, offset=pos).astype(np.int64)
    pos += 4 * 68
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")

    basis = MorphableBasis(mean_geometry=LandmarkSet(mean), shape_basis=shape_basis,
                           expression_basis=expression_basis,
                           keypoint_index_map=kp_index, seed=int(seed))
    _recover_flip_structure(basis)
    return basis


def _recover_flip_structure(basis: MorphableBasis) -> None:
    """Rebuild the mirror permutation/parities from the layout convention,
    keeping them only if the loaded arrays actually satisfy the symmetry."""
    n = basis.n_geometry
    n_mid_shell, _ = _shell_counts(n - 68)
    n_mid_total = len(_canonical_keypoints()[2]) + n_mid_shell
    if (n - n_mid_total) % 2:
        return
    perm = np.arange(n)
    perm[n_mid_total::2] = np.arange(n_mid_total + 1, n, 2)
    perm[n_mid_total + 1::2] = np.arange(n_mid_total, n, 2)
    mirrored = basis.mean_geometry.points[perm] * np.array([-1.0, 1.0, 1.0])
    if np.abs(mirrored - basis.mean_geometry.points).max() > 1e-9:
        return
    op = _flip_operator(perm)

    def parities(mat):
        out = np.empty(mat.shape[1])
        for j in range(mat.shape[1]):
            col = mat[:, j]
            flipped = op(col)
            if np.abs(flipped - col).max() < 1e-9:
                out[j] = 1.0
            elif np.abs(flipped + col).max() < 1e-9:
                out[j] = -1.0
            else:
                return None
        return out

    sp = parities(basis.shape_basis)
    ep = parities(basis.expression_basis)
    if sp is None or ep is None:
        return
    basis.flip_permutation = perm
    basis.shape_parity = sp
    basis.expression_parity = ep
