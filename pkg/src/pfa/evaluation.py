"""Evaluation harnesses: NME with balanced-subset aggregation, head-pose
MAE, reconstruction NME behind ICP, pre-pose/feature ablations, and the
pose-sweep experiment.

Binning uses the ground-truth yaw (half-open bins, ties up). Mean(A) is
the sample-weighted mean over all evaluated samples; Mean(B) is the
unweighted mean over the per-bin means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datasynth import Dataset, Sample
from .errors import PrerequisiteError, ShapeError
from .geometry import (LEFT_EYE_OUTER, RIGHT_EYE_OUTER, LandmarkSet, align_g2k,
                       icp_align, wrap_angle)
from .heatmap import VoxelMap, save_volume, volume_diff, write_pgm_slices
from .morphable import VISIBLE21, MorphableBasis, ParamStats, PCAParams, denormalize, reconstruct
from .network import PFAModel

PROTOCOLS = ("keypoints", "geometry", "reconstruction", "visible21")


def nme(pred: LandmarkSet, gt: LandmarkSet, normalizer="bbox_sqrt_area",
        dims: int = 2) -> float:
    """Mean landmark distance over the normalization factor.

    normalizer: "bbox_sqrt_area" (tight xy box of gt), "interocular"
    (outer eye corners; gt must be a 68-keypoint set), or an explicit
    positive number. dims selects xy (2) or xyz (3) distances.
    """
    if len(pred) != len(gt):
        raise ShapeError(f"landmark counts differ: {len(pred)} vs {len(gt)}")
    if dims not in (2, 3):
        raise ValueError(f"dims must be 2 or 3, got {dims}")
    if isinstance(normalizer, str):
        if normalizer == "bbox_sqrt_area":
            xy = gt.points[:, :2]
            extent = xy.max(axis=0) - xy.min(axis=0)
            d = math.sqrt(extent[0] * extent[1])
        elif normalizer == "interocular":
            if len(gt) != 68:
                raise ShapeError("interocular normalizer needs a 68-keypoint gt set")
            delta = gt.points[RIGHT_EYE_OUTER, :dims] - gt.points[LEFT_EYE_OUTER, :dims]
            d = float(np.linalg.norm(delta))
        else:
            raise ValueError(f"unknown normalizer {normalizer!r}")
    else:
        d = float(normalizer)
    if d <= 0.0:
        raise ValueError(f"degenerate normalizer {d}")
    errs = np.linalg.norm(pred.points[:, :dims] - gt.points[:, :dims], axis=1)
    return float(errs.mean() / d)


@dataclass
class EvalReport:
    protocol: str
    per_bin_nme: list            # 3 entries, None where the bin is empty
    mean_a: float
    mean_b: float
    n_samples: list              # per bin
    pose_mae: Optional[tuple] = None    # (yaw, pitch, roll, mean) in degrees
    warnings: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"protocol\t{self.protocol}"]
        for b, (v, n) in enumerate(zip(self.per_bin_nme, self.n_samples)):
            shown = "absent" if v is None else repr(v)
            lines.append(f"bin{b}\t{shown}\t{n}")
        lines.append(f"mean_a\t{self.mean_a!r}")
        lines.append(f"mean_b\t{self.mean_b!r}")
        if self.pose_mae is not None:
            yaw, pitch, roll, mean = self.pose_mae
            lines.append(f"pose_mae\t{yaw!r}\t{pitch!r}\t{roll!r}\t{mean!r}")
        for w in self.warnings:
            lines.append(f"warning\t{w}")
        return "\n".join(lines) + "\n"


def report_from_sample_errors(protocol: str, errors: Sequence[float],
                              bins: Sequence[int]) -> EvalReport:
    errors = np.asarray(errors, dtype=np.float64)
    bins = np.asarray(bins)
    per_bin = []
    counts = []
    warnings = []
    for b in range(3):
        mask = bins == b
        counts.append(int(mask.sum()))
        if counts[-1] == 0:
            per_bin.append(None)
            warnings.append(f"bin {b} empty; Mean(B) over present bins")
        else:
            per_bin.append(float(errors[mask].mean()))
    present = [v for v in per_bin if v is not None]
    return EvalReport(protocol=protocol, per_bin_nme=per_bin,
                      mean_a=float(errors.mean()),
                      mean_b=float(np.mean(present)),
                      n_samples=counts, warnings=warnings)


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

class ModelPredictor:
    """Batched eval-mode adapter producing keypoints, dense geometry and
    (for pose-head models) Euler angles."""

    def __init__(self, model: PFAModel, basis: MorphableBasis,
                 stats: Optional[ParamStats] = None,
                 pose_source: str = "predicted", apply_g2k: bool = False,
                 batch: int = 64):
        self.model = model
        self.basis = basis
        self.stats = stats
        self.pose_source = pose_source
        self.apply_g2k = apply_g2k
        self.batch = batch

    def predict(self, dataset: Dataset) -> dict:
        n = len(dataset)
        imgs = dataset.images()
        gt_pose = np.stack([s.prepose_gt.as_array() for s in dataset.samples])
        keypoints = np.empty((n, 68, 3))
        pose = np.empty((n, 3))
        params = np.empty((n, 62))
        has_sparse = self.model.config.head != "pose"
        for i in range(0, n, self.batch):
            out = self.model.predict(imgs[i:i + self.batch],
                                     pose_source=self.pose_source,
                                     gt_pose=gt_pose[i:i + self.batch])
            if has_sparse:
                keypoints[i:i + self.batch] = out.keypoints()
                pose[i:i + self.batch] = out.pred_pose.data
            else:
                pose[i:i + self.batch] = out.pose_head.data
            params[i:i + self.batch] = out.dense.data
        result = {"pose": pose, "params_norm": params}
        if has_sparse:
            result["keypoints"] = keypoints
        return result

    def geometry_for(self, params_norm: np.ndarray,
                     keypoints: Optional[np.ndarray]) -> list[LandmarkSet]:
        if self.stats is None:
            raise ValueError("dense evaluation needs ParamStats")
        out = []
        for i in range(params_norm.shape[0]):
            q = denormalize(PCAParams(params_norm[i]), self.stats)
            geo = reconstruct(q, self.basis)
            if self.apply_g2k:
                if keypoints is None:
                    raise ValueError("G2K alignment needs sparse keypoints")
                geo = align_g2k(geo, LandmarkSet(keypoints[i], semantic="keypoints68"),
                                self.basis.keypoint_index_map)
            out.append(geo)
        return out


class OraclePredictor:
    """Returns ground truth; used to pin the all-zero-report contract."""

    def __init__(self, basis: MorphableBasis):
        self.basis = basis
        self.apply_g2k = False

    def predict(self, dataset: Dataset) -> dict:
        return {
            "keypoints": np.stack([s.keypoints.points for s in dataset.samples]),
            "pose": np.stack([s.prepose_gt.as_array() for s in dataset.samples]),
            "params_norm": None,
        }

    def geometry_for(self, params_norm, keypoints):
        raise NotImplementedError

    def geometry_oracle(self, dataset: Dataset) -> list[LandmarkSet]:
        return [s.geometry for s in dataset.samples]


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def evaluate(predictor, dataset: Dataset, protocol: str = "keypoints",
             dims: int = 2) -> EvalReport:
    """Evaluate one protocol over the dataset, binned by ground-truth yaw."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    preds = predictor.predict(dataset)
    bins = [s.yaw_bin for s in dataset.samples]
    errors = []

    if protocol == "keypoints":
        for i, s in enumerate(dataset.samples):
            errors.append(nme(LandmarkSet(preds["keypoints"][i], semantic="keypoints68"),
                              s.keypoints, "bbox_sqrt_area", dims=dims))
    elif protocol == "visible21":
        for i, s in enumerate(dataset.samples):
            visible = VISIBLE21[~s.occluded[VISIBLE21]]
            if len(visible) < 2:
                visible = VISIBLE21
            d = _bbox_sqrt_area(s.keypoints.points)
            errors.append(nme(LandmarkSet(preds["keypoints"][i][visible]),
                              LandmarkSet(s.keypoints.points[visible]),
                              d, dims=dims))
    else:
        if isinstance(predictor, OraclePredictor):
            geos = predictor.geometry_oracle(dataset)
        else:
            geos = predictor.geometry_for(preds["params_norm"],
                                          preds.get("keypoints"))
        for i, s in enumerate(dataset.samples):
            pred_geo = geos[i]
            if protocol == "reconstruction":
                res = icp_align(pred_geo, s.geometry)
                from .geometry import apply_transform
                aligned = apply_transform(res.transform, pred_geo)
                d = _interocular(s.keypoints.points, dims=3)
                errors.append(nme(aligned, s.geometry, d, dims=3))
            else:
                errors.append(nme(pred_geo, s.geometry, "bbox_sqrt_area", dims=dims))

    return report_from_sample_errors(protocol, errors, bins)


def _bbox_sqrt_area(points: np.ndarray) -> float:
    xy = points[:, :2]
    extent = xy.max(axis=0) - xy.min(axis=0)
    return math.sqrt(extent[0] * extent[1])


def _interocular(points68: np.ndarray, dims: int = 3) -> float:
    return float(np.linalg.norm(points68[RIGHT_EYE_OUTER, :dims]
                                - points68[LEFT_EYE_OUTER, :dims]))


def pose_mae(predictor, dataset: Dataset,
             range_filter_deg: float = 99.0) -> tuple:
    """Per-axis mean absolute pose error in degrees over samples whose
    ground-truth angles all lie within the filter range."""
    preds = predictor.predict(dataset)["pose"]
    limit = math.radians(range_filter_deg)
    rows = []
    for i, s in enumerate(dataset.samples):
        gt = s.prepose_gt.as_array()
        if np.any(np.abs(gt) > limit):
            continue
        diff = [wrap_angle(p - g) for p, g in zip(preds[i], gt)]
        rows.append(np.abs(np.degrees(diff)))
    if not rows:
        raise ValueError("no samples inside the pose filter range")
    mat = np.stack(rows)
    pitch, yaw, roll = mat.mean(axis=0)
    return (float(yaw), float(pitch), float(roll),
            float((yaw + pitch + roll) / 3.0))


@dataclass
class PreposeAblation:
    ground_truth: EvalReport
    predicted: EvalReport
    none: EvalReport

    @property
    def ordered(self) -> tuple:
        return (self.ground_truth, self.predicted, self.none)

    @property
    def trend_holds(self) -> bool:
        gt, pred, none = (r.mean_b for r in self.ordered)
        return gt <= pred <= none


def ablation_prepose(dataset: Dataset, predictors: dict) -> PreposeAblation:
    """Evaluate the three pre-pose-quality variants.

    predictors maps {"ground_truth", "predicted", "none"} to predictors;
    missing entries raise with the full list of what is absent.
    """
    missing = [k for k in ("ground_truth", "predicted", "none")
               if k not in predictors]
    if missing:
        raise PrerequisiteError(f"pre-pose ablation is missing variants: {missing}")
    return PreposeAblation(
        ground_truth=evaluate(predictors["ground_truth"], dataset, "keypoints"),
        predicted=evaluate(predictors["predicted"], dataset, "keypoints"),
        none=evaluate(predictors["none"], dataset, "keypoints"),
    )


# ---------------------------------------------------------------------------
# pose sweep
# ---------------------------------------------------------------------------

SWEEP_STEP_DEG = {"pitch": 10.0, "yaw": 10.0, "roll": 20.0}
SWEEP_RANGE_DEG = {"pitch": 90.0, "yaw": 90.0, "roll": 180.0}


def sweep_angles(axis: str) -> np.ndarray:
    if axis not in SWEEP_STEP_DEG:
        raise ValueError(f"axis must be pitch, yaw or roll, got {axis!r}")
    limit, step = SWEEP_RANGE_DEG[axis], SWEEP_STEP_DEG[axis]
    return np.arange(-limit, limit + 0.5 * step, step)


@dataclass
class SweepEntry:
    angle_deg: float
    volume_path: Path
    diff_path: Path
    diff_norm: float


def pose_sweep(model: PFAModel, sample: Sample, axis: str, out_dir,
               emit_pgm: bool = False) -> list[SweepEntry]:
    """Fuse a grid of fixed poses into a trained model on one image, fixing
    the other axes to zero, and dump each predicted volume plus its diff
    against the volume at the sample's own pose."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axis_index = {"pitch": 0, "yaw": 1, "roll": 2}[axis]
    image = sample.image[None]

    ref_out = model.predict(image, pose_source="override",
                            pose_override=sample.prepose_gt.as_array()[None])
    extents = model.config.volume_extents
    mapping = VoxelMap.for_image(extents, model.config.input_resolution)
    from .heatmap import HeatmapVolume
    ref = HeatmapVolume(ref_out.volume.data[0], mapping)

    entries = []
    for angle in sweep_angles(axis):
        pose = np.zeros(3)
        pose[axis_index] = math.radians(angle)
        out = model.predict(image, pose_source="override", pose_override=pose[None])
        vol = HeatmapVolume(out.volume.data[0], mapping)
        diff = volume_diff(vol, ref)
        tag = f"{axis}_{int(round(angle)):+04d}"
        vol_path = out_dir / f"sweep_{tag}.pfavol"
        diff_path = out_dir / f"sweep_{tag}_diff.pfavol"
        save_volume(vol_path, vol.values)
        save_volume(diff_path, diff)
        if emit_pgm:
            write_pgm_slices(vol.values, out_dir / "pgm", f"sweep_{tag}")
            write_pgm_slices(diff, out_dir / "pgm", f"sweep_{tag}_diff", signed=True)
        entries.append(SweepEntry(angle_deg=float(angle), volume_path=vol_path,
                                  diff_path=diff_path,
                                  diff_norm=float(np.linalg.norm(diff))))
    return entries
