import logging

import numpy as np
import pytest

from visilift.config import LabelConfig
from visilift.errors import ValidationError
from visilift.pseudo_label import (
    UNLABELED,
    GaussianLabels,
    assign_labels,
    candidate_set,
    class_histogram,
    density_vote,
    load_labels,
    mahalanobis_sq,
    save_labels,
    significance,
)
from visilift.scene_io import Gaussian, GaussianScene, LabeledPointCloud, covariance_of, quaternion_to_rotation


def _gaussian(mean=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0), opacity=0.5, rotation=(1.0, 0.0, 0.0, 0.0)):
    return Gaussian(mean=np.asarray(mean, dtype=np.float64), scale=np.asarray(scale, dtype=np.float64),
                    rotation=np.asarray(rotation, dtype=np.float64), opacity=opacity)


def _random_case(rng, n=50, q=500, classes=5):
    quats = rng.normal(size=(n, 4))
    scene = GaussianScene.from_arrays(
        rng.uniform(0.0, 4.0, (n, 3)),
        rng.uniform(0.05, 0.4, (n, 3)),
        quats / np.linalg.norm(quats, axis=1, keepdims=True),
        rng.uniform(0.1, 1.0, n),
    )
    cloud = LabeledPointCloud(rng.uniform(0.0, 4.0, (q, 3)), rng.integers(0, classes, q))
    return scene, cloud


def _brute_candidates(g, points, cfg):
    dist = np.linalg.norm(points - g.mean, axis=1)
    inside = np.flatnonzero(dist <= cfg.tau_radius * np.max(g.scale))
    if len(inside) < cfg.k_fallback:
        inside = np.argsort(dist, kind="stable")[:cfg.k_fallback]
    return np.sort(inside)


def _brute_labels(scene, cloud, cfg):
    points = cloud.points.astype(np.float64)
    labels = []
    for g in scene:
        idx = _brute_candidates(g, points, cfg)
        votes = np.array([density_vote(g, p) for p in points[idx]])
        sums = {}
        for label, vote in zip(cloud.labels[idx].tolist(), votes):
            sums[label] = sums.get(label, 0.0) + vote
        best = max(sorted(sums), key=lambda c: sums[c])
        labels.append(best)
    return np.array(labels, dtype=np.uint32)


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


class TestDensityVote:
    def test_mahalanobis_examples(self):
        g = _gaussian()
        assert mahalanobis_sq(g, g.mean) == 0.0
        assert mahalanobis_sq(g, (2.0, 0.0, 0.0)) == pytest.approx(4.0)
        stretched = _gaussian(mean=(1.0, 1.0, 1.0), scale=(2.0, 1.0, 1.0))
        assert mahalanobis_sq(stretched, (3.0, 1.0, 1.0)) == pytest.approx(1.0)

    def test_vote_examples(self):
        g = _gaussian()
        assert density_vote(g, g.mean) == 1.0
        assert density_vote(g, (1.0, 0.0, 0.0)) == pytest.approx(0.6065, abs=1e-4)

    def test_significance(self):
        g = _gaussian(scale=(1.0, 2.0, 3.0), opacity=0.5)
        assert significance(g) == pytest.approx(3.0)
        assert density_vote(g, g.mean, modulate=True) == pytest.approx(3.0)

    def test_mahalanobis_uses_rotation(self):
        z90 = (np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4))
        g = _gaussian(scale=(2.0, 1.0, 1.0), rotation=z90)
        assert mahalanobis_sq(g, (0.0, 2.0, 0.0)) == pytest.approx(1.0)
        assert mahalanobis_sq(g, (2.0, 0.0, 0.0)) == pytest.approx(4.0)


class TestCandidates:
    def test_point_at_mean_is_included(self, rng):
        points = np.vstack([[[0.5, 0.5, 0.5]], rng.uniform(-5, 5, (40, 3))])
        cloud = LabeledPointCloud(points, np.zeros(41, dtype=np.uint32))
        g = _gaussian(mean=(0.5, 0.5, 0.5), scale=(0.01, 0.01, 0.01))
        assert 0 in candidate_set(g, cloud, LabelConfig()).tolist()

    def test_isolated_gaussian_gets_k_nearest(self, rng):
        cloud = LabeledPointCloud(rng.uniform(0, 1, (100, 3)), np.zeros(100, dtype=np.uint32))
        g = _gaussian(mean=(50.0, 50.0, 50.0), scale=(0.1, 0.1, 0.1))
        cfg = LabelConfig(k_fallback=5)
        candidates = candidate_set(g, cloud, cfg)
        assert len(candidates) == 5
        np.testing.assert_array_equal(candidates, _brute_candidates(g, cloud.points.astype(np.float64), cfg))

    def test_fallback_capped_by_cloud_size(self):
        cloud = LabeledPointCloud(np.zeros((3, 3)), np.zeros(3, dtype=np.uint32))
        g = _gaussian(mean=(9.0, 9.0, 9.0))
        assert candidate_set(g, cloud, LabelConfig(k_fallback=8)).tolist() == [0, 1, 2]

    def test_matches_brute_force(self, rng):
        for _ in range(3):
            scene, cloud = _random_case(rng)
            cfg = LabelConfig(tau_radius=3.0, k_fallback=8)
            points = cloud.points.astype(np.float64)
            for g in scene:
                np.testing.assert_array_equal(candidate_set(g, cloud, cfg), _brute_candidates(g, points, cfg))


class TestAssignLabels:
    def test_single_point(self):
        scene = GaussianScene.from_gaussians([_gaussian()])
        cloud = LabeledPointCloud(np.zeros((1, 3)), np.array([7], dtype=np.uint32))
        labels = assign_labels(scene, cloud, LabelConfig())
        assert labels.labels.tolist() == [7]
        assert labels.vote_mass[0] == pytest.approx(0.5)

    def test_tie_goes_to_smaller_class(self):
        scene = GaussianScene.from_gaussians([_gaussian()])
        cloud = LabeledPointCloud(np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]), np.array([2, 1], dtype=np.uint32))
        assert assign_labels(scene, cloud, LabelConfig()).labels.tolist() == [1]

    def test_empty_cloud(self, caplog, make_scene):
        scene = make_scene([[0, 0, 0], [1, 1, 1]], 0.1, 0.5)
        with caplog.at_level(logging.WARNING):
            labels = assign_labels(scene, LabeledPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint32)),
                                   LabelConfig())
        assert labels.labels.tolist() == [UNLABELED, UNLABELED]
        assert not labels.labeled.any()
        assert "empty" in caplog.text

    def test_matches_brute_force_oracle(self, rng):
        scene, cloud = _random_case(rng)
        cfg = LabelConfig(tau_radius=3.0, k_fallback=8, chunk_size=7)
        labels = assign_labels(scene, cloud, cfg, workers=3)
        np.testing.assert_array_equal(labels.labels, _brute_labels(scene, cloud, cfg))
        assert labels.labeled.all()

    def test_matches_brute_force_over_many_instances(self, rng):
        for _ in range(50):
            n, q = int(rng.integers(1, 51)), int(rng.integers(1, 501))
            scene, cloud = _random_case(rng, n=n, q=q, classes=5)
            cfg = LabelConfig(tau_radius=float(rng.uniform(1.0, 4.0)), k_fallback=int(rng.integers(1, 11)),
                              chunk_size=int(rng.integers(1, 64)))
            labels = assign_labels(scene, cloud, cfg, workers=2)
            np.testing.assert_array_equal(labels.labels, _brute_labels(scene, cloud, cfg))
            assert labels.labeled.all()

    def test_chunking_and_workers_do_not_change_labels(self, rng):
        scene, cloud = _random_case(rng)
        one = assign_labels(scene, cloud, LabelConfig(chunk_size=4096), workers=1)
        many = assign_labels(scene, cloud, LabelConfig(chunk_size=5), workers=4)
        np.testing.assert_array_equal(one.labels, many.labels)
        np.testing.assert_allclose(one.vote_mass, many.vote_mass, rtol=1e-12)

    def test_significance_does_not_change_the_winner(self, rng):
        scene, cloud = _random_case(rng)
        cfg = LabelConfig()
        modulated = assign_labels(scene, cloud, cfg, modulate=True)
        plain = assign_labels(scene, cloud, cfg, modulate=False)
        np.testing.assert_array_equal(modulated.labels, plain.labels)
        np.testing.assert_allclose(modulated.vote_mass, plain.vote_mass, rtol=1e-9)
        np.testing.assert_allclose(
            modulated.gamma,
            scene.opacities.astype(np.float64) * np.prod(scene.scales.astype(np.float64), axis=1),
        )

    def test_rigid_transform_invariance(self, rng):
        scene, cloud = _random_case(rng, n=30, q=300)
        qr = rng.normal(size=4)
        qr /= np.linalg.norm(qr)
        R = quaternion_to_rotation(qr)
        t = np.array([3.0, -1.5, 10.0])

        moved_scene = GaussianScene.from_arrays(
            scene.means.astype(np.float64) @ R.T + t,
            scene.scales,
            np.stack([_quat_mul(qr, q) for q in scene.rotations.astype(np.float64)]),
            scene.opacities,
        )
        moved_cloud = LabeledPointCloud(cloud.points.astype(np.float64) @ R.T + t, cloud.labels)
        np.testing.assert_allclose(covariance_of(moved_scene[0]), R @ covariance_of(scene[0]) @ R.T, atol=1e-6)

        cfg = LabelConfig()
        np.testing.assert_array_equal(assign_labels(scene, cloud, cfg).labels,
                                      assign_labels(moved_scene, moved_cloud, cfg).labels)


class TestLabelFiles:
    def test_round_trip(self, tmp_path):
        labels = GaussianLabels(np.array([3, UNLABELED, 0], dtype=np.uint32),
                                np.array([0.5, 0.0, 1.25]), np.array([2.0, 1.0, 0.125]))
        path = tmp_path / "labels.bin"
        save_labels(labels, path)
        loaded = load_labels(path)
        np.testing.assert_array_equal(loaded.labels, labels.labels)
        np.testing.assert_array_equal(loaded.vote_mass, labels.vote_mass)
        np.testing.assert_array_equal(loaded.gamma, labels.gamma)
        assert len(path.read_bytes()) == 8 + 8 + 3 * 12

    def test_histogram_skips_unlabeled(self):
        labels = GaussianLabels(np.array([3, UNLABELED, 0, 3], dtype=np.uint32), np.zeros(4), np.ones(4))
        assert class_histogram(labels) == [(0, 1), (3, 2)]

    def test_column_lengths_must_agree(self):
        with pytest.raises(ValidationError):
            GaussianLabels(np.zeros(2, dtype=np.uint32), np.zeros(3), np.zeros(2))
