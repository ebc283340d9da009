"""Deterministic synthetic dataset.

Each sample is a morphable-model face: parameters are drawn per-sample
from counter-derived streams (worker-count independent), the geometry is
reconstructed exactly from those parameters, and the image is rendered as
anti-aliased Gaussian splats of the keypoints over a low-frequency noise
background. Depth is painted into the green channel so z is recoverable
from the image. Keypoints are always the exact subset of the geometry,
including after every augmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import HeadPose, LandmarkSet, euler_to_rot, fit_similarity, rot_to_euler
from .morphable import (MorphableBasis, PCAParams, flip_params, reconstruct)
from .rng import stream

PHOTOMETRIC_OPS = ("identity", "noise", "quantize", "grayscale", "contrast",
                   "gamma", "histogram")
FRONTAL_YAW_LIMIT = math.radians(60.0)   # |yaw| below this counts as frontal
TRANSLATE_FRAC = 25.0 / 256.0            # +/-25 px at the published 256 input


@dataclass
class SynthConfig:
    image_size: int = 32
    n_geometry: int = 800
    balanced: bool = True
    splat_sigma: float = 1.0
    background_amplitude: float = 0.18
    face_frac_range: tuple = (0.55, 0.75)   # face extent as a fraction of image
    center_jitter: float = 0.05
    yaw_limit_deg: float = 90.0
    pitch_limit_deg: float = 45.0
    roll_limit_deg: float = 45.0
    augment: bool = False                   # bake one augmentation pass per sample


@dataclass
class Sample:
    id: int
    image: np.ndarray              # (3, res, res) in [0, 1]
    keypoints: LandmarkSet
    geometry: LandmarkSet
    q: PCAParams                   # raw (denormalized) parameters
    prepose_gt: HeadPose
    yaw_bin: int
    occluded: np.ndarray = field(default_factory=lambda: np.zeros(68, dtype=bool))


@dataclass
class Dataset:
    samples: list
    basis: MorphableBasis
    config: SynthConfig
    seed: int

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])


_BIN_30 = math.radians(30.0)
_BIN_60 = math.radians(60.0)


def yaw_bin_of(yaw: float) -> int:
    """Half-open bins over |yaw|: ties at 30/60 degrees go up."""
    a = abs(yaw)
    if a < _BIN_30:
        return 0
    if a < _BIN_60:
        return 1
    return 2


def derive_prepose_gt(keypoints: LandmarkSet, mean_keypoints: LandmarkSet) -> HeadPose:
    """Ground-truth pre-pose: rotation of the similarity fit from the mean
    keypoints onto the sample keypoints, as Euler angles."""
    return rot_to_euler(fit_similarity(keypoints, mean_keypoints).rotation)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _low_freq_background(rng, res: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(res // 4 + 2, res // 4 + 2))
    # Bilinear upsample of the coarse grid onto pixel centers.
    xs = np.linspace(0.0, res // 4, res)
    x0 = np.floor(xs).astype(int)
    fx = xs - x0
    rows = coarse[x0][:, x0] * np.outer(1 - fx, 1 - fx) \
        + coarse[x0 + 1][:, x0] * np.outer(fx, 1 - fx) \
        + coarse[x0][:, x0 + 1] * np.outer(1 - fx, fx) \
        + coarse[x0 + 1][:, x0 + 1] * np.outer(fx, fx)
    return rows


def render_image(keypoints: LandmarkSet, res: int, sigma: float,
                 bg_rng, bg_amplitude: float) -> np.ndarray:
    """Anti-aliased Gaussian splats over a low-frequency background.

    Red carries splat intensity, green carries splat intensity weighted by
    normalized depth, blue is background only.
    """
    pts = keypoints.points
    inv = -0.5 / sigma ** 2
    grid = np.arange(res, dtype=np.float64)
    splat = np.zeros((res, res))
    splat_z = np.zeros((res, res))
    z_amp = np.clip(0.5 + pts[:, 2] / res, 0.0, 1.0)
    for (x, y, _), za in zip(pts, z_amp):
        gx = np.exp(inv * (grid - x) ** 2)
        gy = np.exp(inv * (grid - y) ** 2)
        blob = gy[:, None] * gx[None, :]
        np.maximum(splat, blob, out=splat)
        np.maximum(splat_z, blob * za, out=splat_z)
    bg = np.stack([_low_freq_background(bg_rng, res) for _ in range(3)])
    image = np.empty((3, res, res))
    image[0] = np.clip(0.8 * splat + bg_amplitude * bg[0], 0.0, 1.0)
    image[1] = np.clip(0.8 * splat_z + bg_amplitude * bg[1], 0.0, 1.0)
    image[2] = np.clip(0.25 + 0.5 * bg_amplitude * bg[2] + 0.15 * splat, 0.0, 1.0)
    return image


def _render_sample(sample_id: int, keypoints: LandmarkSet, seed: int,
                   config: SynthConfig, sigma_scale: float = 1.0) -> np.ndarray:
    bg_rng = stream(seed, "background", sample_id)
    return render_image(keypoints, config.image_size,
                        config.splat_sigma * sigma_scale, bg_rng,
                        config.background_amplitude)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _sample_pose(rng, config: SynthConfig, index: int) -> HeadPose:
    if config.balanced:
        bin_id = index % 3
        lo, hi = 30.0 * bin_id, min(30.0 * (bin_id + 1), config.yaw_limit_deg)
        yaw = math.radians(rng.uniform(lo, hi)) * (1 if rng.uniform() < 0.5 else -1)
    else:
        yaw = math.radians(rng.uniform(-config.yaw_limit_deg, config.yaw_limit_deg))
    pitch = math.radians(rng.uniform(-config.pitch_limit_deg, config.pitch_limit_deg))
    roll = math.radians(rng.uniform(-config.roll_limit_deg, config.roll_limit_deg))
    return HeadPose(pitch, yaw, roll)


def generate_sample(seed: int, index: int, basis: MorphableBasis,
                    config: SynthConfig) -> Sample:
    rng = stream(seed, "sample", index)
    alpha_id = np.clip(rng.normal(size=40), -3.0, 3.0)
    alpha_exp = np.clip(rng.normal(size=10), -3.0, 3.0)
    pose = _sample_pose(rng, config, index)
    rot = euler_to_rot(pose)

    pts = basis.mean_geometry.points
    extent = float((pts.max(axis=0) - pts.min(axis=0)).max())
    res = config.image_size
    scale = res * rng.uniform(*config.face_frac_range) / extent
    jitter = config.center_jitter * res
    translation = np.array([res / 2.0 + rng.uniform(-jitter, jitter),
                            res / 2.0 + rng.uniform(-jitter, jitter),
                            rng.uniform(-jitter, jitter)])

    q = PCAParams.pack(scale * rot, translation, alpha_id, alpha_exp)
    geometry = reconstruct(q, basis)
    keypoints = LandmarkSet(geometry.points[basis.keypoint_index_map],
                            semantic="keypoints68")
    image = _render_sample(index, keypoints, seed, config)
    prepose = derive_prepose_gt(keypoints, basis.mean_keypoints())
    sample = Sample(id=index, image=image, keypoints=keypoints, geometry=geometry,
                    q=q, prepose_gt=prepose, yaw_bin=yaw_bin_of(prepose.yaw))
    if config.augment:
        sample = augment(sample, stream(seed, "augment", index), basis, config, seed)
    return sample


def generate_dataset(seed: int, n_samples: int, basis: MorphableBasis,
                     config: Optional[SynthConfig] = None) -> Dataset:
    config = config or SynthConfig()
    if basis.n_geometry != config.n_geometry:
        config = replace(config, n_geometry=basis.n_geometry)
    samples = [generate_sample(seed, i, basis, config) for i in range(n_samples)]
    return Dataset(samples=samples, basis=basis, config=config, seed=seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentParams:
    roll: float = 0.0
    scale: float = 1.0
    translate: tuple = (0.0, 0.0)
    flip: bool = False
    occlusion_frac: float = 0.0
    occlusion_anchor: tuple = (0.5, 0.5)
    photometric: str = "identity"
    photometric_seed: int = 0

    @classmethod
    def neutral(cls) -> "AugmentParams":
        return cls()


def draw_augment_params(sample: Sample, rng) -> AugmentParams:
    frontal = abs(sample.prepose_gt.yaw) < FRONTAL_YAW_LIMIT
    roll_limit = math.pi if frontal else math.pi / 2.0
    res = sample.image.shape[-1]
    t_max = TRANSLATE_FRAC * res
    return AugmentParams(
        roll=rng.uniform(-roll_limit, roll_limit),
        scale=rng.uniform(0.85, 1.15),
        translate=(rng.uniform(-t_max, t_max), rng.uniform(-t_max, t_max)),
        flip=bool(rng.uniform() < 0.5),
        occlusion_frac=rng.uniform(0.0, 0.5),
        occlusion_anchor=(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)),
        photometric=PHOTOMETRIC_OPS[rng.integers(0, len(PHOTOMETRIC_OPS))],
        photometric_seed=int(rng.integers(0, 2 ** 31)),
    )


def _apply_photometric(image: np.ndarray, op: str, seed: int) -> np.ndarray:
    rng = stream(seed, "photometric")
    if op == "identity":
        return image
    if op == "noise":
        return np.clip(image + rng.normal(scale=0.05, size=image.shape), 0.0, 1.0)
    if op == "quantize":
        # Blockwise quantization as the compression-artifact stand-in.
        levels = 12
        blocky = np.round(image * levels) / levels
        return np.clip(blocky, 0.0, 1.0)
    if op == "grayscale":
        gray = image.mean(axis=0, keepdims=True)
        w = rng.uniform(0.4, 0.9)
        return (1.0 - w) * image + w * gray
    if op == "contrast":
        c = rng.uniform(0.6, 1.4)
        return np.clip((image - 0.5) * c + 0.5, 0.0, 1.0)
    if op == "gamma":
        g = rng.uniform(0.5, 1.8)
        return np.clip(image, 0.0, 1.0) ** g
    if op == "histogram":
        flat = image.ravel()
        order = np.argsort(flat, kind="stable")
        ranks = np.empty_like(order, dtype=np.float64)
        ranks[order] = np.arange(len(flat))
        return (ranks / max(len(flat) - 1, 1)).reshape(image.shape)
    raise ValueError(f"unknown photometric op {op!r}")


def augment_with(sample: Sample, params: AugmentParams, basis: MorphableBasis,
                 config: SynthConfig, dataset_seed: int) -> Sample:
    """Apply one augmentation draw consistently to the image, every landmark
    set, and the rotation/translation block of q.

    The background is re-rendered from the dataset's per-sample stream, so
    a neutral draw reproduces the original sample bit-exactly."""
    res = config.image_size
    center = np.array([res / 2.0 - 0.5, res / 2.0 - 0.5, 0.0])
    q = sample.q
    geometry_pts = sample.geometry.points
    keypoint_perm = np.arange(68)

    if params.flip:
        q = flip_params(q, basis, float(res))
        geometry_pts = geometry_pts[basis.flip_permutation] * np.array([-1.0, 1.0, 1.0])
        geometry_pts = geometry_pts + np.array([res - 1.0, 0.0, 0.0])
        keypoint_perm = basis.keypoint_flip

    neutral_geo = params.roll == 0.0 and params.scale == 1.0 \
        and params.translate == (0.0, 0.0)
    if not neutral_geo:
        cr, sr = math.cos(params.roll), math.sin(params.roll)
        rot_z = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
        mat = params.scale * rot_z
        shift = center + np.array([params.translate[0], params.translate[1], 0.0]) \
            - mat @ center
        geometry_pts = geometry_pts @ mat.T + shift
        q = PCAParams.pack(mat @ q.rotation, mat @ q.translation + shift,
                           q.alpha_id, q.alpha_exp)

    geometry = LandmarkSet(geometry_pts)
    keypoints = LandmarkSet(geometry_pts[basis.keypoint_index_map],
                            semantic="keypoints68")
    image = _render_sample(sample.id, keypoints, dataset_seed, config,
                           sigma_scale=params.scale)

    occluded = sample.occluded[keypoint_perm].copy()
    if params.occlusion_frac > 0.0:
        xy = keypoints.points[:, :2]
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        box = hi - lo
        side = np.sqrt(params.occlusion_frac)
        rect_size = box * side
        anchor = lo + (box - rect_size) * np.asarray(params.occlusion_anchor)
        x0, y0 = anchor
        x1, y1 = anchor + rect_size
        xi0, yi0 = max(0, int(math.floor(x0))), max(0, int(math.floor(y0)))
        xi1, yi1 = min(res, int(math.ceil(x1))), min(res, int(math.ceil(y1)))
        if xi1 > xi0 and yi1 > yi0:
            image[:, yi0:yi1, xi0:xi1] = 0.0
        inside = (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & \
                 (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
        occluded |= inside

    image = _apply_photometric(image, params.photometric, params.photometric_seed)
    prepose = derive_prepose_gt(keypoints, basis.mean_keypoints())
    return Sample(id=sample.id, image=image, keypoints=keypoints, geometry=geometry,
                  q=q, prepose_gt=prepose, yaw_bin=yaw_bin_of(prepose.yaw),
                  occluded=occluded)


def augment(sample: Sample, rng, basis: MorphableBasis, config: SynthConfig,
            dataset_seed: int) -> Sample:
    params = draw_augment_params(sample, rng)
    return augment_with(sample, params, basis, config, dataset_seed)


# ---------------------------------------------------------------------------
# dataset directory: basis, manifest, per-sample dumps
# ---------------------------------------------------------------------------

def write_dataset(out_dir, dataset: Dataset) -> "Path":
    """Write basis, per-sample dumps, and the manifest.

    Manifest line: id, image path, keypoint path, geometry path, occlusion
    flags (68 chars of 0/1), then the 62 raw q values space-separated.
    """
    from pathlib import Path

    from .geometry import save_landmarks
    from .heatmap import save_image
    from .morphable import save_basis

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "landmarks").mkdir(parents=True, exist_ok=True)
    save_basis(out_dir / "basis.pfabas", dataset.basis)

    lines = []
    for s in dataset.samples:
        img_rel = f"images/sample_{s.id:06d}.pfaimg"
        kp_rel = f"landmarks/sample_{s.id:06d}_kp.txt"
        geo_rel = f"landmarks/sample_{s.id:06d}_geo.txt"
        save_image(out_dir / img_rel, s.image)
        save_landmarks(out_dir / kp_rel, s.keypoints)
        save_landmarks(out_dir / geo_rel, s.geometry)
        flags = "".join("1" if f else "0" for f in s.occluded)
        qtext = " ".join(repr(float(v)) for v in s.q.values)
        lines.append(f"{s.id}\t{img_rel}\t{kp_rel}\t{geo_rel}\t{flags}\t{qtext}")

    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    cfg = dataset.config
    meta = [
        "[synth]",
        f"seed = {dataset.seed}",
        f"n_samples = {len(dataset.samples)}",
        f"image_size = {cfg.image_size}",
        f"n_geometry = {cfg.n_geometry}",
        f"balanced = {cfg.balanced}",
        f"augment = {cfg.augment}",
    ]
    (out_dir / "synth.cfg").write_text("\n".join(meta) + "\n")
    return manifest


def load_dataset(data_dir) -> Dataset:
    """Rebuild a Dataset from a directory written by write_dataset."""
    import configparser
    from pathlib import Path

    from .geometry import load_landmarks
    from .heatmap import load_image
    from .morphable import load_basis

    data_dir = Path(data_dir)
    basis = load_basis(data_dir / "basis.pfabas")
    parser = configparser.ConfigParser()
    parser.read_string((data_dir / "synth.cfg").read_text())
    meta = parser["synth"]
    config = SynthConfig(image_size=meta.getint("image_size"),
                         n_geometry=meta.getint("n_geometry"),
                         balanced=meta.getboolean("balanced"),
                         augment=meta.getboolean("augment"))
    mean_kp = basis.mean_keypoints()

    samples = []
    for line in (data_dir / "manifest.tsv").read_text().splitlines():
        sid, img_rel, kp_rel, geo_rel, flags, qtext = line.split("\t")
        keypoints = load_landmarks(data_dir / kp_rel, semantic="keypoints68")
        geometry = load_landmarks(data_dir / geo_rel)
        q = PCAParams(np.array([float(v) for v in qtext.split()]))
        prepose = derive_prepose_gt(keypoints, mean_kp)
        samples.append(Sample(
            id=int(sid),
            image=load_image(data_dir / img_rel),
            keypoints=keypoints,
            geometry=geometry,
            q=q,
            prepose_gt=prepose,
            yaw_bin=yaw_bin_of(prepose.yaw),
            occluded=np.array([c == "1" for c in flags], dtype=bool),
        ))
    return Dataset(samples=samples, basis=basis, config=config,
                   seed=meta.getint("seed"))
