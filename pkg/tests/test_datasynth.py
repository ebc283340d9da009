"""Synthetic dataset generation, pre-pose derivation, and augmentation."""

import math

import numpy as np
import pytest

from pfa.datasynth import (AugmentParams, SynthConfig, augment, augment_with,
                           derive_prepose_gt, generate_dataset, generate_sample,
                           load_dataset, write_dataset, yaw_bin_of)
from pfa.geometry import HeadPose, LandmarkSet, euler_to_rot, fit_similarity
from pfa.morphable import PCAParams, build_synthetic_basis, reconstruct
from pfa.rng import stream


@pytest.fixture(scope="module")
def basis():
    return build_synthetic_basis(seed=11, n_geometry=800)


@pytest.fixture(scope="module")
def config():
    return SynthConfig(image_size=32, n_geometry=800)


@pytest.fixture(scope="module")
def dataset(basis, config):
    return generate_dataset(seed=100, n_samples=24, basis=basis, config=config)


class TestGeneration:
    def test_same_seed_bit_identical(self, basis, config):
        a = generate_dataset(seed=5, n_samples=6, basis=basis, config=config)
        b = generate_dataset(seed=5, n_samples=6, basis=basis, config=config)
        for sa, sb in zip(a.samples, b.samples):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.keypoints.points, sb.keypoints.points)
            np.testing.assert_array_equal(sa.q.values, sb.q.values)

    def test_keypoints_inside_image(self, dataset, config):
        res = config.image_size
        for s in dataset.samples:
            xy = s.keypoints.points[:, :2]
            assert xy.min() >= -1.0 and xy.max() <= res

    def test_keypoints_are_exact_geometry_subset(self, dataset, basis):
        for s in dataset.samples:
            np.testing.assert_array_equal(
                s.keypoints.points, s.geometry.points[basis.keypoint_index_map])

    def test_q_reconstructs_geometry(self, dataset, basis):
        s = dataset.samples[0]
        np.testing.assert_array_equal(reconstruct(s.q, basis).points,
                                      s.geometry.points)

    def test_yaw_bins_balanced(self, basis):
        cfg = SynthConfig(image_size=32, n_geometry=800, balanced=True)
        data = generate_dataset(seed=6, n_samples=300, basis=basis, config=cfg)
        counts = np.bincount([s.yaw_bin for s in data.samples], minlength=3)
        assert (counts / len(data.samples)).min() >= 0.25

    def test_yaw_bin_boundaries_go_up(self):
        assert yaw_bin_of(math.radians(29.999)) == 0
        assert yaw_bin_of(math.radians(30.0)) == 1
        assert yaw_bin_of(math.radians(-30.0)) == 1
        assert yaw_bin_of(math.radians(60.0)) == 2
        assert yaw_bin_of(math.radians(-89.0)) == 2

    def test_image_range_and_shape(self, dataset, config):
        s = dataset.samples[0]
        assert s.image.shape == (3, config.image_size, config.image_size)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


class TestDerivePrepose:
    def test_known_rotation_recovered(self, basis, config):
        pose = HeadPose(0.2, -0.6, 0.3)
        scale, translation = 8.0, np.array([16.0, 16.0, 0.0])
        q = PCAParams.pack(scale * euler_to_rot(pose), translation,
                           np.zeros(40), np.zeros(10))
        keypoints = LandmarkSet(reconstruct(q, basis).points[basis.keypoint_index_map],
                                semantic="keypoints68")
        got = derive_prepose_gt(keypoints, basis.mean_keypoints())
        assert abs(got.pitch - pose.pitch) < 1e-9
        assert abs(got.yaw - pose.yaw) < 1e-9
        assert abs(got.roll - pose.roll) < 1e-9

    def test_frontal_gives_zero(self, basis):
        q = PCAParams.pack(7.0 * np.eye(3), np.array([16.0, 16.0, 0.0]),
                           np.zeros(40), np.zeros(10))
        keypoints = LandmarkSet(reconstruct(q, basis).points[basis.keypoint_index_map],
                                semantic="keypoints68")
        got = derive_prepose_gt(keypoints, basis.mean_keypoints())
        assert abs(got.pitch) < 1e-9 and abs(got.yaw) < 1e-9 and abs(got.roll) < 1e-9

    def test_shape_offset_sensitivity_measured_not_asserted(self, basis, dataset):
        # Shape offsets tilt the fitted rotation; near |yaw| ~ 90 deg the
        # Euler decomposition couples pitch and roll, so per-angle deviation
        # explodes there while the yaw axis itself stays stable. Record the
        # measurement; only yaw (the binning axis) gets a bound.
        from pfa.geometry import rot_to_euler
        yaw_devs = []
        for s in dataset.samples:
            clean_kp = LandmarkSet(reconstruct(PCAParams.pack(
                s.q.rotation, s.q.translation, np.zeros(40), np.zeros(10)),
                basis).points[basis.keypoint_index_map], semantic="keypoints68")
            ref = rot_to_euler(fit_similarity(clean_kp, basis.mean_keypoints()).rotation)
            yaw_devs.append(abs(s.prepose_gt.yaw - ref.yaw))
        print(f"\nmax yaw deviation from shape offsets: "
              f"{math.degrees(max(yaw_devs)):.2f} deg")
        assert math.degrees(max(yaw_devs)) < 10.0


class TestAugment:
    def test_identity_draw_unchanged(self, dataset, basis, config):
        s = dataset.samples[3]
        out = augment_with(s, AugmentParams.neutral(), basis, config,
                           dataset_seed=dataset.seed)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.keypoints.points, s.keypoints.points)
        np.testing.assert_array_equal(out.q.values, s.q.values)
        np.testing.assert_array_equal(out.occluded, s.occluded)

    def test_flip_twice_restores_landmarks(self, dataset, basis, config):
        s = dataset.samples[4]
        flip = AugmentParams(flip=True)
        once = augment_with(s, flip, basis, config, dataset_seed=dataset.seed)
        twice = augment_with(once, flip, basis, config, dataset_seed=dataset.seed)
        np.testing.assert_allclose(twice.keypoints.points, s.keypoints.points,
                                   atol=1e-9)
        np.testing.assert_allclose(twice.q.values, s.q.values, atol=1e-9)

    def test_augment_keeps_q_consistent(self, dataset, basis, config):
        rng = stream(1, "aug")
        for s in dataset.samples[:6]:
            out = augment(s, rng, basis, config, dataset_seed=dataset.seed)
            np.testing.assert_allclose(reconstruct(out.q, basis).points,
                                       out.geometry.points, atol=1e-8)
            np.testing.assert_array_equal(
                out.keypoints.points, out.geometry.points[basis.keypoint_index_map])

    def test_prepose_matches_after_augment(self, dataset, basis, config):
        rng = stream(2, "aug")
        for s in dataset.samples[:6]:
            out = augment(s, rng, basis, config, dataset_seed=dataset.seed)
            again = derive_prepose_gt(out.keypoints, basis.mean_keypoints())
            assert abs(again.pitch - out.prepose_gt.pitch) < 1e-6
            assert abs(again.yaw - out.prepose_gt.yaw) < 1e-6
            assert abs(again.roll - out.prepose_gt.roll) < 1e-6

    def test_occlusion_zeroes_pixels_and_flags(self, dataset, basis, config):
        s = dataset.samples[5]
        params = AugmentParams(occlusion_frac=0.5, occlusion_anchor=(0.5, 0.5))
        out = augment_with(s, params, basis, config, dataset_seed=dataset.seed)
        assert (out.image == 0.0).any()
        assert out.occluded.any()

    def test_splat_peaks_near_keypoints(self, dataset, basis, config):
        s = dataset.samples[6]
        params = AugmentParams(roll=0.4, scale=1.1, translate=(2.0, -1.5))
        out = augment_with(s, params, basis, config, dataset_seed=dataset.seed)
        res = config.image_size
        red = out.image[0]
        checked = 0
        for x, y, _ in out.keypoints.points:
            xi, yi = int(round(x)), int(round(y))
            if not (2 <= xi < res - 2 and 2 <= yi < res - 2):
                continue
            window = red[yi - 1:yi + 2, xi - 1:xi + 2]
            far = red[max(0, yi - 4):yi + 5:4, max(0, xi - 4):xi + 5:4]
            if window.max() >= far.min():
                checked += 1
        assert checked >= 30   # spot check: most visible splats peak locally

    def test_photometric_ops_stay_in_range(self, dataset, basis, config):
        from pfa.datasynth import PHOTOMETRIC_OPS, _apply_photometric
        s = dataset.samples[7]
        for op in PHOTOMETRIC_OPS:
            out = _apply_photometric(s.image, op, seed=3)
            assert out.shape == s.image.shape
            assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-12


class TestDatasetIO:
    def test_roundtrip(self, tmp_path, dataset):
        write_dataset(tmp_path / "data", dataset)
        loaded = load_dataset(tmp_path / "data")
        assert len(loaded) == len(dataset)
        for a, b in zip(dataset.samples, loaded.samples):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.keypoints.points, b.keypoints.points)
            np.testing.assert_array_equal(a.q.values, b.q.values)
            np.testing.assert_array_equal(a.occluded, b.occluded)
            assert a.yaw_bin == b.yaw_bin

    def test_manifest_deterministic(self, tmp_path, dataset):
        write_dataset(tmp_path / "a", dataset)
        write_dataset(tmp_path / "b", dataset)
        assert (tmp_path / "a" / "manifest.tsv").read_bytes() == \
            (tmp_path / "b" / "manifest.tsv").read_bytes()
