"""Synthetic basis construction, reconstruction algebra, z-score codec."""

import numpy as np
import pytest

from pfa.morphable import (N_EXP, N_ID, N_PARAMS, SIGMA_FLOOR, MorphableBasis,
                           ParamStats, PCAParams, build_synthetic_basis,
                           compute_param_stats, denormalize, flip_params,
                           keypoint_flip_permutation, load_basis, normalize,
                           reconstruct, reconstruct_keypoints, save_basis)
from pfa.rng import stream


@pytest.fixture(scope="module")
def basis():
    return build_synthetic_basis(seed=42, n_geometry=600)


def identity_q(**over):
    values = np.zeros(N_PARAMS)
    values[:9] = np.eye(3).reshape(-1)
    q = PCAParams(values)
    for key, val in over.items():
        setattr(q, key, val)
    return q


def random_q(rng, scale=1.0):
    from pfa.geometry import HeadPose, euler_to_rot
    rot = euler_to_rot(HeadPose(*rng.uniform(-0.6, 0.6, size=3)))
    return PCAParams.pack(scale * rot, rng.uniform(-20, 20, size=3),
                          rng.normal(size=N_ID), rng.normal(size=N_EXP))


class TestBasisConstruction:
    def test_same_seed_bit_identical(self):
        a = build_synthetic_basis(seed=7, n_geometry=520)
        b = build_synthetic_basis(seed=7, n_geometry=520)
        np.testing.assert_array_equal(a.mean_geometry.points, b.mean_geometry.points)
        np.testing.assert_array_equal(a.shape_basis, b.shape_basis)
        np.testing.assert_array_equal(a.expression_basis, b.expression_basis)
        np.testing.assert_array_equal(a.keypoint_index_map, b.keypoint_index_map)

    def test_different_seed_differs(self):
        a = build_synthetic_basis(seed=7, n_geometry=520)
        b = build_synthetic_basis(seed=8, n_geometry=520)
        assert not np.array_equal(a.shape_basis, b.shape_basis)

    def test_columns_orthonormal(self, basis):
        for mat in (basis.shape_basis, basis.expression_basis):
            gram = mat.T @ mat
            np.testing.assert_allclose(gram, np.eye(mat.shape[1]), atol=1e-9)

    def test_keypoint_subset_is_68(self, basis):
        assert basis.keypoint_index_map.shape == (68,)
        assert len(np.unique(basis.keypoint_index_map)) == 68
        assert basis.mean_keypoints().points.shape == (68, 3)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            build_synthetic_basis(seed=0, n_geometry=100)

    def test_mean_geometry_mirror_symmetric(self, basis):
        perm = basis.flip_permutation
        mirrored = basis.mean_geometry.points[perm] * np.array([-1.0, 1.0, 1.0])
        np.testing.assert_array_equal(mirrored, basis.mean_geometry.points)

    def test_keypoint_flip_consistent_with_geometry_permutation(self, basis):
        kp_flip = keypoint_flip_permutation()
        np.testing.assert_array_equal(basis.keypoint_index_map[kp_flip],
                                      basis.flip_permutation[basis.keypoint_index_map])

    def test_unit_parameter_displacement_near_two_percent(self, basis):
        # RMS per-point displacement of one parameter unit vs face extent.
        pts = basis.mean_geometry.points
        extent = (pts.max(axis=0) - pts.min(axis=0)).max()
        col = basis.shape_basis[:, 0].reshape(-1, 3)
        rms = np.sqrt((np.linalg.norm(col, axis=1) ** 2).mean())
        assert 0.01 < rms / extent < 0.04


class TestReconstruct:
    def test_identity_gives_mean_exactly(self, basis):
        out = reconstruct(identity_q(), basis)
        np.testing.assert_array_equal(out.points, basis.mean_geometry.points)

    def test_doubling_rotation_doubles_output(self, basis):
        q = identity_q()
        doubled = PCAParams(q.values.copy())
        doubled.values[:9] *= 2.0
        np.testing.assert_array_equal(reconstruct(doubled, basis).points,
                                      2.0 * reconstruct(q, basis).points)

    def test_matches_per_point_oracle(self, basis):
        rng = stream(3, "recon-oracle")
        q = random_q(rng, scale=1.4)
        got = reconstruct(q, basis).points
        rot, t = q.rotation, q.translation
        n = basis.n_geometry
        expected = np.zeros((n, 3))
        for i in range(n):
            rows = slice(3 * i, 3 * i + 3)
            base = (basis.mean_geometry.points[i]
                    + basis.shape_basis[rows] @ q.alpha_id
                    + basis.expression_basis[rows] @ q.alpha_exp)
            expected[i] = rot @ base + t
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_linearity_in_alphas(self, basis):
        rng = stream(4, "recon-lin")
        qa, qb = random_q(rng), random_q(rng)
        qb.values[:12] = qa.values[:12]    # same rotation/translation
        merged = PCAParams(qa.values.copy())
        merged.values[12:] = qa.values[12:] + qb.values[12:]
        lhs = reconstruct(merged, basis).points
        mean_term = reconstruct(PCAParams(np.concatenate([qa.values[:12],
                                                          np.zeros(50)])), basis).points
        rhs = reconstruct(qa, basis).points + reconstruct(qb, basis).points - mean_term
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_keypoint_subset_exact(self, basis):
        q = random_q(stream(5, "recon-sub"))
        full = reconstruct(q, basis)
        sub = reconstruct_keypoints(q, basis)
        np.testing.assert_array_equal(sub.points, full.points[basis.keypoint_index_map])

    def test_flip_params_mirror_geometry(self, basis):
        width = 64.0
        q = random_q(stream(6, "recon-flip"), scale=8.0)
        original = reconstruct(q, basis).points
        flipped = reconstruct(flip_params(q, basis, width), basis).points
        expected = original[basis.flip_permutation] * np.array([-1.0, 1.0, 1.0])
        expected[:, 0] += width - 1.0
        np.testing.assert_allclose(flipped, expected, atol=1e-9)


class TestParamCodec:
    def test_mu_maps_to_zero(self):
        rng = stream(7, "codec")
        stats = ParamStats(mu=rng.normal(size=N_PARAMS),
                           sigma=rng.uniform(0.5, 2.0, size=N_PARAMS))
        out = normalize(PCAParams(stats.mu.copy()), stats)
        np.testing.assert_array_equal(out.values, np.zeros(N_PARAMS))

    def test_roundtrip(self):
        rng = stream(8, "codec")
        stats = ParamStats(mu=rng.normal(size=N_PARAMS),
                           sigma=rng.uniform(0.5, 2.0, size=N_PARAMS))
        q = PCAParams(rng.normal(size=N_PARAMS))
        back = denormalize(normalize(q, stats), stats)
        np.testing.assert_allclose(back.values, q.values, atol=1e-12)

    def test_normalized_training_set_stats(self):
        rng = stream(9, "codec")
        params = [PCAParams(rng.normal(loc=3.0, scale=2.5, size=N_PARAMS))
                  for _ in range(200)]
        stats = compute_param_stats(params)
        normed = np.stack([normalize(p, stats).values for p in params])
        assert np.abs(normed.mean(axis=0)).max() < 1e-10
        assert np.abs(normed.std(axis=0) - 1.0).max() < 1e-10

    def test_two_sample_stats(self):
        a = PCAParams(np.zeros(N_PARAMS))
        b = PCAParams(np.full(N_PARAMS, 2.0))
        stats = compute_param_stats([a, b])
        np.testing.assert_array_equal(stats.mu, np.ones(N_PARAMS))
        np.testing.assert_array_equal(stats.sigma, np.ones(N_PARAMS))

    def test_constant_dimension_gets_floor(self):
        params = [PCAParams(np.ones(N_PARAMS)) for _ in range(5)]
        stats = compute_param_stats(params)
        np.testing.assert_array_equal(stats.sigma, np.full(N_PARAMS, SIGMA_FLOOR))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_param_stats([])

    def test_wrong_length_rejected(self):
        from pfa.errors import ShapeError
        with pytest.raises(ShapeError):
            PCAParams(np.zeros(61))


class TestBasisFile:
    def test_roundtrip_preserves_arrays_and_flip_structure(self, tmp_path, basis):
        path = tmp_path / "face.basis"
        save_basis(path, basis)
        loaded = load_basis(path)
        np.testing.assert_array_equal(loaded.mean_geometry.points,
                                      basis.mean_geometry.points)
        np.testing.assert_array_equal(loaded.shape_basis, basis.shape_basis)
        np.testing.assert_array_equal(loaded.expression_basis, basis.expression_basis)
        np.testing.assert_array_equal(loaded.keypoint_index_map, basis.keypoint_index_map)
        assert loaded.seed == basis.seed
        np.testing.assert_array_equal(loaded.flip_permutation, basis.flip_permutation)
        np.testing.assert_array_equal(loaded.shape_parity, basis.shape_parity)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.basis"
        path.write_bytes(b"XXXXXXX" + b"\x00" * 64)
        from pfa.errors import CheckpointError
        with pytest.raises(CheckpointError):
            load_basis(path)
