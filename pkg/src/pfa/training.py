"""Staged training: pre-stage, sparse alignment, dense alignment via
keypoint-to-geometry distillation, and small-model distillation.

Stage ordering is enforced through prerequisite checkpoints. The pre-stage
trains the feature extractor, pre-pose regressor and heatmap hourglasses
jointly; later stages freeze everything upstream and cache the frozen
activations once (eval-mode batch norm, fixed pose policy), which makes
the freeze contract structural: frozen parameters are never touched by an
optimizer and their arrays are checksummed before and after the stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import SGD, Tensor, backward, no_grad, save_checkpoint, load_checkpoint
from .core import functional as F
from .core.tensor import make_output
from .datasynth import Dataset
from .errors import NumericalError, PrerequisiteError, ShapeError
from .geometry import LandmarkSet
from .heatmap import VoxelMap, awing_loss, encode
from .morphable import MorphableBasis, ParamStats, PCAParams
from .network import PFAModel
from .rng import stream

STAGES = ("prestage", "sparse", "dense", "distill_small")
PREREQUISITE = {"prestage": None, "sparse": "prestage",
                "dense": "sparse", "distill_small": "prestage"}


@dataclass
class TrainPlan:
    stage: str
    epochs: int
    lr_initial: float
    schedule: str = "step"            # step(0.1, 15) | adaptive(0.9, window 10)
    batch_size: int = 10
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step_decay: float = 0.1
    step_every: int = 15
    adaptive_decay: float = 0.9
    adaptive_window: int = 10
    adaptive_rule: str = "all"        # exceed "all" of the window, or its "mean"
    pose_source: str = "predicted"    # gt | predicted | none
    teacher_forcing_prob: float = 0.5  # prestage: probability of feeding gt pose
    kd_weight: float = 1.0            # dense: 0 recovers the PCA-only baseline
    prerequisite_checkpoint: Optional[Path] = None
    teacher_predictions: Optional[Path] = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.schedule not in ("step", "adaptive"):
            raise ValueError(f"schedule must be 'step' or 'adaptive'")
        if self.schedule == "adaptive" and self.stage in ("prestage",):
            raise ValueError("adaptive schedule is reserved for distillation stages")
        if self.stage == "distill_small" and self.teacher_predictions is None:
            raise ValueError("distill_small needs teacher_predictions")


def plan_prestage(epochs: int = 60, lr: float = 1e-2, **kw) -> TrainPlan:
    return TrainPlan(stage="prestage", epochs=epochs, lr_initial=lr, schedule="step", **kw)


def plan_sparse(epochs: int = 40, lr: float = 1e-2, **kw) -> TrainPlan:
    return TrainPlan(stage="sparse", epochs=epochs, lr_initial=lr, schedule="step", **kw)


def plan_dense(epochs: int = 20, lr: float = 1e-3, **kw) -> TrainPlan:
    # Dense alignment is a distillation phase: adaptive schedule. The lr is
    # desk-scaled; the published absolute value belongs to full-scale runs.
    return TrainPlan(stage="dense", epochs=epochs, lr_initial=lr,
                     schedule="adaptive", **kw)


def plan_distill(epochs: int = 40, lr: float = 1e-2, **kw) -> TrainPlan:
    return TrainPlan(stage="distill_small", epochs=epochs, lr_initial=lr,
                     schedule="adaptive", **kw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_prestage(pred_volume: Tensor, gt_volume: np.ndarray,
                  pred_pose: Tensor, gt_pose: np.ndarray) -> Tensor:
    """AWing on the volume plus one third of the squared Euler error,
    averaged over the batch."""
    if pred_pose.data.shape != np.asarray(gt_pose).shape:
        raise ShapeError(f"pose shapes differ: {pred_pose.data.shape} vs "
                         f"{np.asarray(gt_pose).shape}")
    n = pred_pose.data.shape[0]
    heat = awing_loss(pred_volume, gt_volume)
    diff = F.sub(pred_pose, Tensor(gt_pose))
    pose = F.scale(F.sum_all(F.mul(diff, diff)), 1.0 / (3.0 * n))
    return F.add(heat, pose)


def loss_sparse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared coordinate error divided by the landmark count:
    sum of squared diffs over all coordinates / (68 * batch)."""
    target = np.asarray(target, dtype=np.float64)
    n = target.shape[0]
    flat = target.reshape(n, -1)
    if pred.data.shape != flat.shape:
        raise ShapeError(f"loss_sparse: prediction {pred.data.shape} vs target "
                         f"{flat.shape}")
    diff = F.sub(pred, Tensor(flat))
    return F.scale(F.sum_all(F.mul(diff, diff)), 1.0 / (68.0 * n))


def loss_sparse_sets(pred: LandmarkSet, target: LandmarkSet) -> float:
    """Single-sample convenience on landmark sets."""
    if len(pred) != len(target):
        raise ShapeError(f"landmark counts differ: {len(pred)} vs {len(target)}")
    return float(((pred.points - target.points) ** 2).sum() / len(pred))


def loss_distill_small(student: Tensor, teacher_keypoints: np.ndarray) -> Tensor:
    """Sparse loss against the teacher's predictions instead of ground truth."""
    return loss_sparse(student, teacher_keypoints)


def reconstruct_keypoints_op(q_norm: Tensor, stats: ParamStats,
                             basis: MorphableBasis) -> Tensor:
    """Differentiable keypoints-of-reconstruction for normalized parameters.

    Denormalizes, reshapes the scaled rotation, applies mean + bases on the
    keypoint rows, and returns (N, 68, 3) with analytic gradients back to
    the normalized parameter vector.
    """
    if q_norm.data.ndim != 2 or q_norm.data.shape[1] != 62:
        raise ShapeError(f"expected (N, 62) normalized params, got {q_norm.data.shape}")
    idx = basis.keypoint_index_map
    rows = (3 * idx[:, None] + np.arange(3)[None, :]).reshape(-1)
    a_kp = np.concatenate([basis.shape_basis[rows], basis.expression_basis[rows]],
                          axis=1)                     # (204, 50)
    mean_kp = basis.mean_geometry.points[idx]         # (68, 3)

    q_raw = q_norm.data * stats.sigma + stats.mu
    n = q_raw.shape[0]
    rot = q_raw[:, :9].reshape(n, 3, 3)
    trans = q_raw[:, 9:12]
    alpha = q_raw[:, 12:]
    base = mean_kp[None] + (alpha @ a_kp.T).reshape(n, 68, 3)
    out = np.einsum("nij,nkj->nki", rot, base) + trans[:, None, :]

    def bwd(g):
        d_rot = np.einsum("nki,nkj->nij", g, base)
        d_trans = g.sum(axis=1)
        d_base = np.einsum("nki,nij->nkj", g, rot)
        d_alpha = d_base.reshape(n, 204) @ a_kp
        d_raw = np.concatenate([d_rot.reshape(n, 9), d_trans, d_alpha], axis=1)
        return (d_raw * stats.sigma,)

    return make_output(out, (q_norm,), bwd)


def loss_dense_k2g(pred_q_norm: Tensor, gt_q_norm: np.ndarray,
                   teacher_keypoints: np.ndarray, stats: ParamStats,
                   basis: MorphableBasis, kd_weight: float = 1.0) -> Tensor:
    """PCA term (/62) plus knowledge-distillation term (/68): the keypoint
    rows of the reconstruction are pulled toward the sparse head's own
    predictions. kd_weight 0 recovers the PCA-only baseline."""
    gt_q_norm = np.asarray(gt_q_norm, dtype=np.float64)
    if pred_q_norm.data.shape != gt_q_norm.shape:
        raise ShapeError(f"loss_dense_k2g: parameters {pred_q_norm.data.shape} vs "
                         f"{gt_q_norm.shape}")
    n = gt_q_norm.shape[0]
    dq = F.sub(pred_q_norm, Tensor(gt_q_norm))
    pca = F.scale(F.sum_all(F.mul(dq, dq)), 1.0 / (62.0 * n))
    if kd_weight == 0.0:
        return pca
    kig = reconstruct_keypoints_op(pred_q_norm, stats, basis)
    dk = F.sub(Tensor(np.asarray(teacher_keypoints, dtype=np.float64)), kig)
    kd = F.scale(F.sum_all(F.mul(dk, dk)), kd_weight / (68.0 * n))
    return F.add(pca, kd)


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

class LRSchedule:
    """Step: lr0 * 0.1^(epoch // 15). Adaptive: multiply by 0.9 whenever the
    finished epoch's mean loss exceeds the losses of the comparison window
    (all 10 previous epochs by default, or their mean)."""

    def __init__(self, plan: TrainPlan):
        self.plan = plan
        self.lr = plan.lr_initial
        self.history: list[float] = []

    def lr_for_epoch(self, epoch: int) -> float:
        if self.plan.schedule == "step":
            self.lr = self.plan.lr_initial * self.plan.step_decay ** (epoch // self.plan.step_every)
        return self.lr

    def end_epoch(self, mean_loss: float) -> None:
        if self.plan.schedule == "adaptive":
            window = self.history[-self.plan.adaptive_window:]
            if len(window) == self.plan.adaptive_window:
                if self.plan.adaptive_rule == "all":
                    triggered = all(mean_loss > h for h in window)
                else:
                    triggered = mean_loss > float(np.mean(window))
                if triggered:
                    self.lr *= self.plan.adaptive_decay
        self.history.append(mean_loss)


def lr_schedule_step(plan: TrainPlan, epoch: int, history: list[float],
                     current_lr: float) -> float:
    """Functional form: next epoch's learning rate given the loss history."""
    if plan.schedule == "step":
        return plan.lr_initial * plan.step_decay ** (epoch // plan.step_every)
    window = history[-plan.adaptive_window - 1:-1]
    if len(window) == plan.adaptive_window and history:
        current = history[-1]
        if plan.adaptive_rule == "all":
            if all(current > h for h in window):
                return current_lr * plan.adaptive_decay
        elif current > float(np.mean(window)):
            return current_lr * plan.adaptive_decay
    return current_lr


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    checkpoint: Path
    metrics: Path
    epoch_losses: list
    batch_losses: list = field(default_factory=list)   # per-epoch lists
    final_lr: float = 0.0


def _volume_map(image_size: int, extents) -> VoxelMap:
    return VoxelMap.for_image(tuple(extents), image_size)


def _gt_volumes(dataset: Dataset, extents, image_size: int) -> np.ndarray:
    mapping = _volume_map(image_size, extents)
    out = np.empty((len(dataset),) + tuple(extents))
    for i, s in enumerate(dataset.samples):
        out[i] = encode(s.keypoints, tuple(extents), mapping=mapping).values
    return out


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_prerequisite(plan: TrainPlan, model: PFAModel) -> None:
    needed = PREREQUISITE[plan.stage]
    if needed is None:
        return
    path = plan.prerequisite_checkpoint
    if path is None or not Path(path).exists():
        raise PrerequisiteError(
            f"stage {plan.stage!r} requires a {needed!r} checkpoint; "
            f"got {path}")
    model.load_state_arrays(load_checkpoint(path))


def _pose9_for(model: PFAModel, dataset: Dataset, plan: TrainPlan) -> Optional[np.ndarray]:
    """Fused pose per sample under the plan's fixed pose policy."""
    from .network.model import pose_to_rot9
    if not model.config.pose_fused or plan.pose_source == "none":
        return None
    if plan.pose_source == "gt":
        euler = np.stack([s.prepose_gt.as_array() for s in dataset.samples])
        return pose_to_rot9(euler)
    preds = predict_poses(model, dataset)
    return pose_to_rot9(preds)


def predict_poses(model: PFAModel, dataset: Dataset, batch: int = 64) -> np.ndarray:
    """Eval-mode pre-pose predictions for every sample."""
    out = np.empty((len(dataset), 3))
    imgs = dataset.images()
    with no_grad():
        for i in range(0, len(dataset), batch):
            feats = model.extractor.forward(Tensor(imgs[i:i + batch]), "eval")
            out[i:i + batch] = model.prepose.forward(feats, "eval").data
    return out


def _cache_prestage(model: PFAModel, dataset: Dataset,
                    pose9: Optional[np.ndarray], batch: int = 64):
    """Frozen pre-stage outputs (eval mode): volumes and multilevel maps."""
    imgs = dataset.images()
    vols = None
    levels = None
    with no_grad():
        for i in range(0, len(dataset), batch):
            feats = model.extractor.forward(Tensor(imgs[i:i + batch]), "eval")
            p9 = pose9[i:i + batch] if pose9 is not None else None
            volume, multilevel = model.heatmap.forward(feats, p9, "eval")
            if vols is None:
                vols = np.empty((len(dataset),) + volume.data.shape[1:])
                levels = [np.empty((len(dataset),) + m.data.shape[1:])
                          for m in multilevel]
            vols[i:i + batch] = volume.data
            for buf, m in zip(levels, multilevel):
                buf[i:i + batch] = m.data
    return vols, levels


def _cache_features(model: PFAModel, dataset: Dataset,
                    pose9: Optional[np.ndarray], batch: int = 64):
    """Frozen trunk outputs for dense training: fused feature vectors and
    the sparse head's own keypoint predictions (the distilled knowledge)."""
    imgs = dataset.images()
    vecs = None
    sparse = np.empty((len(dataset), 68, 3))
    with no_grad():
        for i in range(0, len(dataset), batch):
            feats = model.extractor.forward(Tensor(imgs[i:i + batch]), "eval")
            p9 = pose9[i:i + batch] if pose9 is not None else None
            volume, multilevel = model.heatmap.forward(feats, p9, "eval")
            vec = model.dual.forward(multilevel, volume, p9, "eval")
            if vecs is None:
                vecs = np.empty((len(dataset), vec.data.shape[1]))
            vecs[i:i + batch] = vec.data
            sparse[i:i + batch] = model.sparse_head.forward(vec).data.reshape(-1, 68, 3)
    return vecs, sparse


def cache_teacher_predictions(teacher: PFAModel, dataset: Dataset, path,
                              pose_source: str = "predicted") -> Path:
    """Run the teacher once over the dataset and persist its keypoints."""
    path = Path(path)
    preds = np.empty((len(dataset), 68, 3))
    imgs = dataset.images()
    gt = np.stack([s.prepose_gt.as_array() for s in dataset.samples])
    for i in range(0, len(dataset), 64):
        out = teacher.predict(imgs[i:i + 64], pose_source=pose_source,
                              gt_pose=gt[i:i + 64])
        preds[i:i + 64] = out.keypoints()
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, preds)
    return path


def run_stage(plan: TrainPlan, dataset: Dataset, model: PFAModel,
              out_dir, stats: Optional[ParamStats] = None) -> StageResult:
    """Train one stage; writes checkpoint and a tab-separated metrics log.

    Deterministic given (plan.seed, dataset, model init). Aborts with
    diagnostics on non-finite loss. The dense stage verifies that every
    non-head parameter is bit-identical afterwards.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_prerequisite(plan, model)
    cfg = model.config

    if plan.stage == "dense" and stats is None:
        raise ValueError("dense stage needs ParamStats for the q codec")

    # Assemble the stage's trainable set and any frozen caches.
    gt_pose = np.stack([s.prepose_gt.as_array() for s in dataset.samples])
    keypoints = np.stack([s.keypoints.points for s in dataset.samples])
    imgs = dataset.images()

    if plan.stage == "prestage":
        params = (model.extractor.parameters() + model.prepose.parameters()
                  + model.heatmap.parameters())
        gt_vols = _gt_volumes(dataset, cfg.volume_extents, cfg.input_resolution)
    elif plan.stage in ("sparse", "distill_small"):
        pose9 = _pose9_for(model, dataset, plan)
        vols, levels = _cache_prestage(model, dataset, pose9)
        params = model.dual.parameters() + model.sparse_head.parameters()
        if plan.stage == "distill_small":
            teacher_kp = np.load(plan.teacher_predictions)
            if teacher_kp.shape != (len(dataset), 68, 3):
                raise ShapeError(f"teacher predictions {teacher_kp.shape} do not "
                                 f"match dataset of {len(dataset)}")
    else:  # dense
        pose9 = _pose9_for(model, dataset, plan)
        vecs, teacher_kp = _cache_features(model, dataset, pose9)
        params = model.dense_head.parameters()
        from .morphable import normalize
        gt_q_norm = np.stack([normalize(s.q, stats).values for s in dataset.samples])
        trunk_before = {name: arr.copy() for name, arr in model.state_arrays().items()
                        if not name.startswith("dense_head.")}

    optimizer = SGD(params, lr=plan.lr_initial, momentum=plan.momentum,
                    weight_decay=plan.weight_decay)
    schedule = LRSchedule(plan)
    tf_rng = stream(plan.seed, "teacher-forcing")
    epoch_losses: list[float] = []
    all_batch_losses: list[list[float]] = []
    metrics_path = out_dir / f"metrics_{plan.stage}.tsv"
    lines = []

    for epoch in range(plan.epochs):
        optimizer.lr = schedule.lr_for_epoch(epoch)
        order_rng = stream(plan.seed, "order", epoch)
        batch_losses: list[float] = []
        extras: dict[str, float] = {}

        for batch in _batches(len(dataset), plan.batch_size, order_rng):
            optimizer.zero_grad()
            if plan.stage == "prestage":
                use_gt = tf_rng.uniform() < plan.teacher_forcing_prob
                source = ("gt" if use_gt else "predicted") if cfg.pose_fused else "none"
                out = model.forward(imgs[batch], pose_source=source,
                                    gt_pose=gt_pose[batch], mode="train")
                loss = loss_prestage(out.volume, gt_vols[batch],
                                     out.pred_pose, gt_pose[batch])
            elif plan.stage in ("sparse", "distill_small"):
                p9 = pose9[batch] if pose9 is not None else None
                multilevel = [Tensor(buf[batch]) for buf in levels]
                vec = model.dual.forward(multilevel, Tensor(vols[batch]), p9, "train")
                pred = model.sparse_head.forward(vec)
                target = teacher_kp[batch] if plan.stage == "distill_small" \
                    else keypoints[batch]
                loss = loss_sparse(pred, target)
            else:
                pred_q = model.dense_head.forward(Tensor(vecs[batch]))
                loss = loss_dense_k2g(pred_q, gt_q_norm[batch], teacher_kp[batch],
                                      stats, dataset.basis, kd_weight=plan.kd_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at stage "
                                     f"{plan.stage}, epoch {epoch}")
            backward(loss)
            optimizer.step()
            batch_losses.append(value)

        mean_loss = float(np.mean(batch_losses))
        schedule.end_epoch(mean_loss)
        epoch_losses.append(mean_loss)
        all_batch_losses.append(batch_losses)
        cols = [str(epoch), repr(optimizer.lr), repr(mean_loss)]
        for key, val in extras.items():
            cols.append(f"{key}={val!r}")
        lines.append("\t".join(cols))

    metrics_path.write_text("\n".join(lines) + "\n")
    if plan.stage == "dense":
        for name, before in trunk_before.items():
            after = model.state_arrays()[name]
            if not np.array_equal(before, after):
                raise NumericalError(f"freeze contract broken: {name} changed "
                                     f"during dense training")
    ckpt_path = out_dir / f"{plan.stage}.ckpt"
    save_checkpoint(ckpt_path, model.state_arrays())
    return StageResult(checkpoint=ckpt_path, metrics=metrics_path,
                       epoch_losses=epoch_losses, batch_losses=all_batch_losses,
                       final_lr=optimizer.lr)
