"""
Pseudo ground-truth labels for Gaussians from an annotated point cloud.

Each Gaussian collects the points inside an adaptive ball of radius
tau_radius * max(scale) around its mean (or its k_fallback nearest points when
the ball is too sparse), scores them with its own Mahalanobis density and
takes the class with the largest summed vote.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from visilift.config import LabelConfig
from visilift.errors import ValidationError
from visilift.scene_io import (
    BinaryReader,
    Gaussian,
    GaussianScene,
    LabeledPointCloud,
    PathLike,
    covariance_of,
    covariances,
    write_header,
)

UNLABELED = 0xFFFFFFFF


@dataclass(frozen=True)
class GaussianLabels:
    labels: np.ndarray     # (N,) uint32, UNLABELED when no candidate voted
    vote_mass: np.ndarray  # (N,) winning class vote sum
    gamma: np.ndarray      # (N,) significance o * sx * sy * sz

    def __post_init__(self):
        n = len(self.labels)
        if len(self.vote_mass) != n or len(self.gamma) != n:
            raise ValidationError("Label columns have different lengths")

    @property
    def count(self) -> int:
        return int(len(self.labels))

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED


def mahalanobis_sq(g: Gaussian, p) -> float:
    diff = np.asarray(p, dtype=np.float64) - np.asarray(g.mean, dtype=np.float64)
    return float(diff @ np.linalg.solve(covariance_of(g), diff))


def significance(g: Gaussian) -> float:
    return float(g.opacity * np.prod(np.asarray(g.scale, dtype=np.float64)))


def density_vote(g: Gaussian, p, modulate: bool = False) -> float:
    """exp(-d^2 / 2); scaled by the Gaussian's significance when modulate is set"""
    w = float(np.exp(-0.5 * mahalanobis_sq(g, p)))
    return significance(g) * w if modulate else w


def build_index(cloud: LabeledPointCloud) -> cKDTree:
    return cKDTree(cloud.points.astype(np.float64))


def _fallback(tree: cKDTree, center: np.ndarray, k: int) -> np.ndarray:
    k = min(k, tree.n)
    _, idx = tree.query(center, k=k)
    return np.atleast_1d(idx).astype(np.int64)


def candidate_set(g: Gaussian, cloud: LabeledPointCloud, cfg: LabelConfig,
                  tree: Optional[cKDTree] = None) -> np.ndarray:
    """Sorted point indices voting for g"""
    if cloud.count == 0:
        return np.zeros(0, dtype=np.int64)
    tree = tree if tree is not None else build_index(cloud)
    center = np.asarray(g.mean, dtype=np.float64)
    radius = cfg.tau_radius * float(np.max(g.scale))
    idx = np.asarray(tree.query_ball_point(center, radius), dtype=np.int64)
    if len(idx) < cfg.k_fallback:
        idx = _fallback(tree, center, cfg.k_fallback)
    return np.sort(idx)


def _vote(points: np.ndarray, labels: np.ndarray, mean: np.ndarray, cov_inv: np.ndarray,
          gamma: float, modulate: bool) -> Tuple[int, float]:
    """Winning class and its vote sum; ties resolve to the smallest class id"""
    diff = points - mean
    d2 = np.einsum("ki,ij,kj->k", diff, cov_inv, diff)
    votes = np.exp(-0.5 * d2)
    if modulate:
        votes = gamma * votes
    classes, inverse = np.unique(labels, return_inverse=True)
    sums = np.bincount(inverse, weights=votes, minlength=len(classes))
    best = int(np.argmax(sums))
    mass = float(sums[best]) if modulate else gamma * float(sums[best])
    return int(classes[best]), mass


def _label_chunk(scene: GaussianScene, cloud: LabeledPointCloud, tree: cKDTree, cfg: LabelConfig,
                 start: int, stop: int, gammas: np.ndarray, modulate: bool) -> Tuple[np.ndarray, np.ndarray]:
    means = scene.means[start:stop].astype(np.float64)
    radii = cfg.tau_radius * scene.scales[start:stop].astype(np.float64).max(axis=1)
    cov_inv = np.linalg.inv(covariances(scene.scales[start:stop], scene.rotations[start:stop]))
    points = cloud.points.astype(np.float64)

    neighbours = tree.query_ball_point(means, radii)
    labels = np.full(stop - start, UNLABELED, dtype=np.uint32)
    mass = np.zeros(stop - start, dtype=np.float64)
    for k in range(stop - start):
        idx = np.asarray(neighbours[k], dtype=np.int64)
        if len(idx) < cfg.k_fallback:
            idx = _fallback(tree, means[k], cfg.k_fallback)
        idx = np.sort(idx)
        labels[k], mass[k] = _vote(points[idx], cloud.labels[idx], means[k], cov_inv[k],
                                   float(gammas[start + k]), modulate)
    logging.debug(f"Labelled Gaussians {start}..{stop - 1}")
    return labels, mass


def assign_labels(scene: GaussianScene, cloud: LabeledPointCloud, cfg: LabelConfig,
                  workers: int = 4, modulate: bool = True) -> GaussianLabels:
    """
    Label every Gaussian from the point cloud.

    Args:
        scene: Gaussians to label
        cloud: annotated points
        cfg: culling radius multiplier, fallback count and chunk size
        workers: threads processing chunks
        modulate: apply the significance factor to each vote before summing

    Returns:
        GaussianLabels; all unlabeled when the cloud is empty
    """
    n = scene.count
    gammas = scene.opacities.astype(np.float64) * np.prod(scene.scales.astype(np.float64), axis=1)
    if cloud.count == 0:
        logging.warning("Point cloud is empty; every Gaussian stays unlabeled")
        return GaussianLabels(np.full(n, UNLABELED, dtype=np.uint32), np.zeros(n), gammas)

    tree = build_index(cloud)
    bounds = [(s, min(s + cfg.chunk_size, n)) for s in range(0, n, cfg.chunk_size)]
    labels = np.full(n, UNLABELED, dtype=np.uint32)
    mass = np.zeros(n, dtype=np.float64)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = executor.map(
            lambda b: _label_chunk(scene, cloud, tree, cfg, b[0], b[1], gammas, modulate), bounds
        )
        for (start, stop), (chunk_labels, chunk_mass) in zip(bounds, results):
            labels[start:stop] = chunk_labels
            mass[start:stop] = chunk_mass

    classes = np.unique(labels[labels != UNLABELED])
    logging.info(f"Labelled {n} Gaussians from {cloud.count} points into {len(classes)} classes")
    return GaussianLabels(labels, mass, gammas)


# =============================================================================
# VGLB files
# =============================================================================

MAGIC_LABELS = b"VGLB"
_LABEL_RECORD = np.dtype([("label", "<u4"), ("vote", "<f4"), ("gamma", "<f4")])


def save_labels(labels: GaussianLabels, path: PathLike):
    records = np.empty(labels.count, dtype=_LABEL_RECORD)
    records["label"] = labels.labels
    records["vote"] = labels.vote_mass
    records["gamma"] = labels.gamma
    with open(path, "wb") as f:
        write_header(f, MAGIC_LABELS)
        f.write(struct.pack("<Q", labels.count))
        f.write(records.tobytes())


def load_labels(path: PathLike) -> GaussianLabels:
    reader = BinaryReader.open(path)
    reader.header(MAGIC_LABELS)
    (count,) = reader.scalars("Q")
    records = reader.array(_LABEL_RECORD, count)
    reader.finish()
    return GaussianLabels(
        records["label"].astype(np.uint32),
        records["vote"].astype(np.float64),
        records["gamma"].astype(np.float64),
    )


def class_histogram(labels: GaussianLabels) -> List[Tuple[int, int]]:
    classes, counts = np.unique(labels.labels[labels.labeled], return_counts=True)
    return [(int(c), int(k)) for c, k in zip(classes, counts)]
