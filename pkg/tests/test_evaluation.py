"""NME arithmetic, report aggregation, pose MAE, sweep mechanics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfa.datasynth import SynthConfig, generate_dataset
from pfa.errors import PrerequisiteError, ShapeError
from pfa.evaluation import (EvalReport, ModelPredictor, OraclePredictor,
                            ablation_prepose, evaluate, nme, pose_mae,
                            pose_sweep, report_from_sample_errors, sweep_angles)
from pfa.geometry import HeadPose, LandmarkSet, SimilarityTransform, euler_to_rot
from pfa.morphable import build_synthetic_basis, compute_param_stats
from pfa.network import PFAModel, desk_s
from pfa.rng import stream


@pytest.fixture(scope="module")
def basis():
    return build_synthetic_basis(seed=31, n_geometry=600)


@pytest.fixture(scope="module")
def dataset(basis):
    cfg = SynthConfig(image_size=32, n_geometry=600)
    return generate_dataset(seed=400, n_samples=18, basis=basis, config=cfg)


def keypoint_cloud(rng):
    return LandmarkSet(rng.uniform(0, 64, size=(68, 3)), semantic="keypoints68")


class TestNME:
    def test_zero_for_identical(self):
        gt = keypoint_cloud(stream(0, "nme"))
        assert nme(gt, gt) == 0.0

    def test_single_offset_hand_value(self):
        gt = keypoint_cloud(stream(1, "nme"))
        xy = gt.points[:, :2]
        d = math.sqrt(np.prod(xy.max(axis=0) - xy.min(axis=0)))
        pred = LandmarkSet(gt.points.copy(), semantic="keypoints68")
        pred.points[7, 0] += d
        assert nme(pred, gt) == pytest.approx(1.0 / 68.0, rel=1e-12)

    def test_dims_split_on_z_error(self):
        gt = keypoint_cloud(stream(2, "nme"))
        pred = LandmarkSet(gt.points.copy(), semantic="keypoints68")
        pred.points[:, 2] += 3.0
        assert nme(pred, gt, dims=2) == 0.0
        assert nme(pred, gt, dims=3) > 0.0

    def test_scale_covariance(self):
        gt = keypoint_cloud(stream(3, "nme"))
        pred = LandmarkSet(gt.points + stream(4, "nme").normal(size=(68, 3)),
                           semantic="keypoints68")
        base = nme(pred, gt)
        for k in (0.25, 3.0, 17.0):
            scaled = nme(LandmarkSet(pred.points * k), LandmarkSet(gt.points * k))
            assert scaled == pytest.approx(base, abs=1e-12)

    def test_interocular_normalizer(self):
        gt = keypoint_cloud(stream(5, "nme"))
        pred = LandmarkSet(gt.points.copy(), semantic="keypoints68")
        pred.points[:, 0] += 1.0
        from pfa.geometry import LEFT_EYE_OUTER, RIGHT_EYE_OUTER
        d = np.linalg.norm(gt.points[RIGHT_EYE_OUTER, :2] - gt.points[LEFT_EYE_OUTER, :2])
        assert nme(pred, gt, "interocular") == pytest.approx(1.0 / d, rel=1e-12)

    def test_degenerate_normalizer_rejected(self):
        flat = LandmarkSet(np.zeros((68, 3)), semantic="keypoints68")
        with pytest.raises(ValueError):
            nme(flat, flat)

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            nme(LandmarkSet(np.ones((5, 3))), LandmarkSet(np.ones((6, 3))))


class TestReportArithmetic:
    def test_mean_b_of_bins(self):
        report = report_from_sample_errors(
            "keypoints", [2.0, 3.0, 4.0], [0, 1, 2])
        assert report.per_bin_nme == [2.0, 3.0, 4.0]
        assert report.mean_b == pytest.approx(3.0)
        assert report.mean_a == pytest.approx(3.0)

    def test_mean_a_weighted_mean_b_unweighted(self):
        errors = [1.0, 1.0, 1.0, 5.0]
        bins = [0, 0, 0, 1]
        report = report_from_sample_errors("keypoints", errors, bins)
        assert report.mean_a == pytest.approx(2.0)
        assert report.mean_b == pytest.approx(3.0)
        assert report.n_samples == [3, 1, 0]
        assert report.per_bin_nme[2] is None
        assert report.warnings

    def test_equal_bin_counts_make_means_agree(self):
        rng = stream(6, "report")
        errors = rng.uniform(0, 1, size=30)
        bins = np.repeat([0, 1, 2], 10)
        report = report_from_sample_errors("keypoints", errors, bins)
        assert report.mean_a == pytest.approx(report.mean_b, abs=1e-12)

    def test_text_roundtrip_parseable(self):
        report = report_from_sample_errors("keypoints", [1.0, 2.0, 3.0], [0, 1, 2])
        text = report.to_text()
        fields = dict(line.split("\t", 1) for line in text.splitlines())
        assert float(fields["mean_b"]) == pytest.approx(2.0)


class TestEvaluateProtocols:
    def test_oracle_gives_zero_report(self, dataset, basis):
        report = evaluate(OraclePredictor(basis), dataset, "keypoints")
        assert report.mean_a == 0.0
        assert all(v == 0.0 for v in report.per_bin_nme if v is not None)

    def test_oracle_geometry_protocols_zero(self, dataset, basis):
        geo = evaluate(OraclePredictor(basis), dataset, "geometry")
        assert geo.mean_a == 0.0
        rec = evaluate(OraclePredictor(basis), dataset, "reconstruction")
        assert rec.mean_a < 1e-9

    def test_model_predictor_runs_all_protocols(self, dataset, basis):
        stats = compute_param_stats([s.q for s in dataset.samples])
        model = PFAModel(desk_s(), seed=60)
        pred = ModelPredictor(model, basis, stats=stats, pose_source="gt")
        for protocol in ("keypoints", "visible21", "geometry"):
            report = evaluate(pred, dataset, protocol)
            assert report.mean_a > 0.0
            assert sum(report.n_samples) == len(dataset)

    def test_reconstruction_invariant_to_similarity_on_predictions(self, dataset, basis):
        stats = compute_param_stats([s.q for s in dataset.samples])
        model = PFAModel(desk_s(), seed=61)

        class Shifted(ModelPredictor):
            def geometry_for(self, params_norm, keypoints):
                geos = super().geometry_for(params_norm, keypoints)
                t = SimilarityTransform(1.3, euler_to_rot(HeadPose(0.1, 0.2, -0.1)),
                                        np.array([5.0, -3.0, 2.0]))
                from pfa.geometry import apply_transform
                return [apply_transform(t, g) for g in geos]

        small = dataset.samples[:6]
        from pfa.datasynth import Dataset
        sub = Dataset(samples=small, basis=basis, config=dataset.config,
                      seed=dataset.seed)
        base = evaluate(ModelPredictor(model, basis, stats=stats, pose_source="gt"),
                        sub, "reconstruction")
        moved = evaluate(Shifted(model, basis, stats=stats, pose_source="gt"),
                         sub, "reconstruction")
        assert moved.mean_a == pytest.approx(base.mean_a, abs=1e-6)

    def test_visible21_ignores_occluded(self, dataset, basis):
        import copy
        sub = copy.deepcopy(dataset)
        # Occlude some non-VISIBLE21 landmark — report must be unchanged by
        # corrupting the prediction there.
        from pfa.morphable import VISIBLE21
        hidden = [i for i in range(68) if i not in set(VISIBLE21.tolist())][0]

        class Corrupt(OraclePredictor):
            def predict(self, ds):
                out = super().predict(ds)
                out["keypoints"] = out["keypoints"].copy()
                out["keypoints"][:, hidden] += 100.0
                return out

        report = evaluate(Corrupt(basis), sub, "visible21")
        assert report.mean_a == 0.0


class TestPoseMAE:
    def test_oracle_zero(self, dataset, basis):
        assert pose_mae(OraclePredictor(basis), dataset) == (0.0, 0.0, 0.0, 0.0)

    def test_constant_yaw_offset(self, dataset, basis):
        class Off(OraclePredictor):
            def predict(self, ds):
                out = super().predict(ds)
                out["pose"] = out["pose"].copy()
                out["pose"][:, 1] += math.radians(1.0)
                return out

        yaw, pitch, roll, mean = pose_mae(Off(basis), dataset)
        assert yaw == pytest.approx(1.0, abs=1e-9)
        assert pitch == pytest.approx(0.0, abs=1e-9)
        assert roll == pytest.approx(0.0, abs=1e-9)
        assert mean == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_filter_excludes_wide_angles(self, dataset, basis):
        # Push one sample's gt yaw past 99 degrees and check the count drops.
        import copy
        sub = copy.deepcopy(dataset)
        sub.samples[0].prepose_gt = HeadPose(0.0, math.radians(120.0), 0.0)

        class Counting(OraclePredictor):
            def predict(self, ds):
                return super().predict(ds)

        all_in = pose_mae(Counting(basis), dataset, range_filter_deg=179.0)
        filtered = pose_mae(Counting(basis), sub, range_filter_deg=99.0)
        assert filtered == (0.0, 0.0, 0.0, 0.0)
        assert all_in == (0.0, 0.0, 0.0, 0.0)


class TestAblationAndSweep:
    def test_ablation_missing_variant_listed(self, dataset, basis):
        with pytest.raises(PrerequisiteError, match="none"):
            ablation_prepose(dataset, {"ground_truth": OraclePredictor(basis),
                                       "predicted": OraclePredictor(basis)})

    def test_ablation_runs_with_oracles(self, dataset, basis):
        result = ablation_prepose(dataset, {
            "ground_truth": OraclePredictor(basis),
            "predicted": OraclePredictor(basis),
            "none": OraclePredictor(basis)})
        assert result.trend_holds    # all zero: <= chain holds

    def test_sweep_angle_grids(self):
        assert len(sweep_angles("yaw")) == 19
        assert len(sweep_angles("pitch")) == 19
        assert len(sweep_angles("roll")) == 19
        assert sweep_angles("yaw")[1] - sweep_angles("yaw")[0] == pytest.approx(10.0)
        assert sweep_angles("roll")[1] - sweep_angles("roll")[0] == pytest.approx(20.0)

    def test_pose_sweep_dumps(self, dataset, tmp_path):
        model = PFAModel(desk_s(), seed=62)
        entries = pose_sweep(model, dataset.samples[0], "yaw", tmp_path)
        assert len(entries) == 19
        for e in entries:
            assert e.volume_path.exists() and e.diff_path.exists()
            assert "yaw" in e.volume_path.name
        zero_entry = [e for e in entries if e.angle_deg == 0.0]
        assert len(zero_entry) == 1

    def test_sweep_diff_against_itself_zero(self, dataset, tmp_path):
        import copy
        model = PFAModel(desk_s(), seed=63)
        s = copy.deepcopy(dataset.samples[0])
        s.prepose_gt = HeadPose(0.0, math.radians(40.0), 0.0)
        entries = pose_sweep(model, s, "yaw", tmp_path)
        at_gt = [e for e in entries if e.angle_deg == 40.0][0]
        from pfa.heatmap import load_volume
        assert np.abs(load_volume(at_gt.diff_path)).max() == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_nme_scale_covariance_property(seed):
    rng = stream(seed, "nme-prop")
    gt = LandmarkSet(rng.uniform(0, 32, size=(68, 3)), semantic="keypoints68")
    pred = LandmarkSet(gt.points + rng.normal(size=(68, 3)))
    k = rng.uniform(0.1, 10.0)
    a = nme(pred, gt)
    b = nme(LandmarkSet(pred.points * k), LandmarkSet(gt.points * k))
    assert b == pytest.approx(a, abs=1e-12)
