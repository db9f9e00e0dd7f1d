"""
Deterministic synthetic inputs for the lift and the aggregators.

All randomness comes from Philox streams keyed by (seed, entity index), so
any entity can be regenerated on its own and the output does not depend on
generation order.
"""

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from visilift.config import keyed_rng
from visilift.errors import ConfigError, ValidationError
from visilift.eval_harness import BinaryMask, corrupt_mask
from visilift.pseudo_label import GaussianLabels, save_labels
from visilift.robust_aggregate import FeatureObservation
from visilift.scene_io import (
    BinaryReader,
    Camera,
    FeatureMap,
    GaussianScene,
    PathLike,
    QuerySet,
    save_cameras,
    save_feature_map,
    save_queries,
    save_scene,
    write_header,
)
from visilift.splat_visibility import NEAR_PLANE, accumulate_weights

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
FRONT, BACK = 0, 1


# =============================================================================
# Occlusion scene
# =============================================================================

@dataclass(frozen=True)
class OcclusionSceneSpec:
    front_depth: float = 2.0
    back_depth: float = 4.0
    front_extent: float = 0.5   # half-size of the square wall
    back_extent: float = 1.25
    front_grid: int = 17        # Gaussians per side
    back_grid: int = 6
    front_sigma_ratio: float = 0.5  # in-plane sigma as a fraction of grid spacing
    back_sigma_ratio: float = 0.2
    front_opacity: float = 0.95
    back_opacity: float = 0.95
    dim: int = 16
    front_feature: Optional[Tuple[float, ...]] = None
    back_feature: Optional[Tuple[float, ...]] = None
    arc_cameras: int = 48
    arc_radius: float = 0.1
    side_cameras: int = 2
    side_offset: float = 2.5
    image_size: int = 64
    focal: float = 64.0
    seed: int = 0

    def __post_init__(self):
        if not self.back_depth > self.front_depth > NEAR_PLANE:
            raise ValidationError(
                f"Occlusion scene needs back depth > front depth > {NEAR_PLANE}, "
                f"got front={self.front_depth}, back={self.back_depth}"
            )
        if self.front_grid < 0 or self.back_grid < 0 or self.front_grid + self.back_grid == 0:
            raise ValidationError("Occlusion scene needs at least one Gaussian")
        if self.arc_cameras < 0 or self.side_cameras < 0 or self.arc_cameras + self.side_cameras == 0:
            raise ValidationError("Occlusion scene needs at least one camera")
        for name in ("front_feature", "back_feature"):
            value = getattr(self, name)
            if value is None:
                continue
            vec = np.asarray(value, dtype=np.float64)
            if vec.shape != (self.dim,) or abs(np.linalg.norm(vec) - 1.0) > 1e-6:
                raise ValidationError(f"{name} must be a unit vector of length {self.dim}")


@dataclass
class OcclusionScene:
    scene: GaussianScene
    cameras: List[Camera]
    feature_maps: List[FeatureMap]
    gt_features: np.ndarray   # (N, dim) per-Gaussian ground truth
    groups: np.ndarray        # (N,) FRONT or BACK
    front_feature: np.ndarray
    back_feature: np.ndarray
    arc_views: List[int] = field(default_factory=list)
    side_views: List[int] = field(default_factory=list)

    @property
    def front_count(self) -> int:
        return int(np.count_nonzero(self.groups == FRONT))

    @property
    def queries(self) -> QuerySet:
        return QuerySet(dim=len(self.front_feature), names=("front", "back"),
                        vectors=np.stack([self.front_feature, self.back_feature]))

    def save(self, out_dir: PathLike) -> Dict[str, str]:
        """Write scene, cameras, maps, queries and wall labels under out_dir"""
        os.makedirs(os.path.join(out_dir, "maps"), exist_ok=True)
        paths = {
            "scene": os.path.join(out_dir, "scene.bin"),
            "cameras": os.path.join(out_dir, "cameras.json"),
            "feature_maps": os.path.join(out_dir, "maps"),
            "queries": os.path.join(out_dir, "queries.json"),
            "labels": os.path.join(out_dir, "labels.bin"),
        }
        save_scene(self.scene, paths["scene"])
        save_cameras(self.cameras, paths["cameras"])
        for i, fmap in enumerate(self.feature_maps):
            save_feature_map(fmap, os.path.join(out_dir, "maps", f"view_{i:04d}.vfmp"))
        save_queries(self.queries, paths["queries"])
        n = self.scene.count
        save_labels(GaussianLabels(self.groups.astype(np.uint32), np.ones(n), np.ones(n)), paths["labels"])
        logging.info(f"Wrote occlusion scene with {n} Gaussians and {len(self.cameras)} views to {out_dir}")
        return paths


def _ground_truth_features(spec: OcclusionSceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Given features, or an orthonormal pair drawn from the seed"""
    if spec.front_feature is not None and spec.back_feature is not None:
        return np.asarray(spec.front_feature, dtype=np.float64), np.asarray(spec.back_feature, dtype=np.float64)
    rng = keyed_rng(spec.seed, 0)
    basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, 2)))
    front = np.asarray(spec.front_feature, dtype=np.float64) if spec.front_feature is not None else basis[:, 0]
    back = np.asarray(spec.back_feature, dtype=np.float64) if spec.back_feature is not None else basis[:, 1]
    return front, back


def _wall(grid: int, extent: float, depth: float, sigma_ratio: float, opacity: float):
    if grid == 0:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    spacing = 2.0 * extent / (grid - 1) if grid > 1 else 2.0 * extent
    coords = np.linspace(-extent, extent, grid) if grid > 1 else np.zeros(1)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    means = np.stack([xs.ravel(), ys.ravel(), np.full(grid * grid, depth)], axis=1)
    sigma = sigma_ratio * spacing
    scales = np.tile([sigma, sigma, 1e-3 * sigma], (grid * grid, 1))
    return means, scales, np.full(grid * grid, opacity)


def _cameras(spec: OcclusionSceneSpec) -> Tuple[List[Camera], List[int], List[int]]:
    target = (0.0, 0.0, spec.back_depth)
    size, focal = spec.image_size, spec.focal
    cameras, arc, side = [], [], []
    for k in range(spec.arc_cameras):
        rng = keyed_rng(spec.seed, 1000 + k)
        r = spec.arc_radius * np.sqrt((k + 0.5) / spec.arc_cameras)
        theta = k * GOLDEN_ANGLE + 0.1 * rng.uniform(-1.0, 1.0)
        arc.append(len(cameras))
        cameras.append(Camera.look_at((r * np.cos(theta), r * np.sin(theta), 0.0), target, focal, focal, size, size))
    for k in range(spec.side_cameras):
        angle = 2.0 * np.pi * k / spec.side_cameras
        position = (spec.side_offset * np.cos(angle), spec.side_offset * np.sin(angle), 0.0)
        side.append(len(cameras))
        cameras.append(Camera.look_at(position, target, focal, focal, size, size))
    return cameras, arc, side


def wall_feature_map(scene: GaussianScene, cam: Camera, groups: np.ndarray,
                     front: np.ndarray, back: np.ndarray) -> FeatureMap:
    """Front feature where the front wall accumulates >= 0.5, else back where the back wall does, else zero"""
    acc = accumulate_weights(scene, cam, groups=groups, group_count=2)
    data = np.zeros((cam.height, cam.width, len(front)), dtype=np.float32)
    front_px = acc[FRONT] >= 0.5
    back_px = ~front_px & (acc[BACK] >= 0.5)
    data[front_px] = front
    data[back_px] = back
    return FeatureMap(data)


def make_occlusion_scene(spec: OcclusionSceneSpec) -> OcclusionScene:
    """
    Two parallel walls facing the cameras.

    Front-arc cameras sit near the origin and see the front wall hiding the
    centre of the back wall; side cameras see the whole back wall around the
    front wall. Front Gaussians come first in the scene.
    """
    front, back = _ground_truth_features(spec)
    fm, fs, fo = _wall(spec.front_grid, spec.front_extent, spec.front_depth, spec.front_sigma_ratio, spec.front_opacity)
    bm, bs, bo = _wall(spec.back_grid, spec.back_extent, spec.back_depth, spec.back_sigma_ratio, spec.back_opacity)
    n_front, n_back = len(fo), len(bo)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n_front + n_back, 1))
    scene = GaussianScene.from_arrays(np.vstack([fm, bm]), np.vstack([fs, bs]), rotations, np.concatenate([fo, bo]))
    groups = np.concatenate([np.full(n_front, FRONT), np.full(n_back, BACK)]).astype(np.int64)
    gt = np.vstack([np.tile(front, (n_front, 1)), np.tile(back, (n_back, 1))])

    cameras, arc, side = _cameras(spec)
    maps = [wall_feature_map(scene, cam, groups, front, back) for cam in cameras]
    logging.info(f"Occlusion scene: {n_front} front and {n_back} back Gaussians, "
                 f"{len(arc)} arc and {len(side)} side cameras")
    return OcclusionScene(scene, cameras, maps, gt, groups, front, back, arc, side)


# =============================================================================
# Feature map corruption
# =============================================================================

def feature_regions(fmap: FeatureMap) -> List[Tuple[np.ndarray, BinaryMask]]:
    """Distinct non-zero features of a map with their pixel masks, largest region first"""
    flat = fmap.data.reshape(-1, fmap.dim)
    occupied = flat.any(axis=1)
    if not occupied.any():
        return []
    vectors, inverse = np.unique(flat[occupied], axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    labels = np.full(flat.shape[0], -1, dtype=np.int64)
    labels[occupied] = inverse
    regions = []
    for k, vec in enumerate(vectors):
        regions.append((vec, BinaryMask.from_bool((labels == k).reshape(fmap.height, fmap.width))))
    regions.sort(key=lambda item: -item[1].area)
    return regions


def corrupt_feature_map(fmap: FeatureMap, radius: int, seed: int, map_index: int, tau_min: int = 64) -> FeatureMap:
    """Erode or dilate every feature region and repaint, smaller regions on top"""
    data = np.zeros_like(fmap.data)
    for k, (vec, mask) in enumerate(feature_regions(fmap)):
        corrupted = corrupt_mask(mask, radius, seed, (map_index << 16) + k, tau_min)
        data[corrupted.bits.astype(bool)] = vec
    return FeatureMap(data)


# =============================================================================
# Feature streams
# =============================================================================

PLACEMENTS = ("antipodal", "random")
WEIGHT_DISTRIBUTIONS = ("uniform", "constant")


@dataclass(frozen=True)
class StreamSpec:
    dim: int = 512
    inlier_direction: Optional[Tuple[float, ...]] = None
    noise: float = 0.3              # tangent noise magnitude (radians, approx.)
    outlier_fraction: float = 0.2
    placement: str = "antipodal"
    count: int = 100
    weights: str = "uniform"
    weight_low: float = 0.5
    weight_high: float = 1.5
    outlier_weight_scale: float = 1.0
    leading_inliers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValidationError(f"outlier_fraction must lie in [0, 1), got {self.outlier_fraction}")
        if self.placement not in PLACEMENTS:
            raise ValidationError(f"Unknown outlier placement '{self.placement}'")
        if self.weights not in WEIGHT_DISTRIBUTIONS:
            raise ValidationError(f"Unknown weight distribution '{self.weights}'")
        if self.count < 1 or self.dim < 2:
            raise ValidationError("Stream needs count >= 1 and dim >= 2")
        if not 0 < self.weight_low <= self.weight_high or self.outlier_weight_scale <= 0:
            raise ValidationError("Stream weights must be positive")
        if self.leading_inliers < 0:
            raise ValidationError("leading_inliers must be >= 0")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _perturb(direction: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise == 0.0:
        return direction.copy()
    t = rng.standard_normal(len(direction))
    t -= (t @ direction) * direction
    t *= noise / np.sqrt(len(direction) - 1)
    return _unit(direction + t)


def outlier_positions(spec: StreamSpec) -> np.ndarray:
    """Sorted stream positions holding outliers; the first leading_inliers are never outliers"""
    n_out = int(round(spec.outlier_fraction * spec.count))
    eligible = np.arange(min(spec.leading_inliers, spec.count), spec.count)
    n_out = min(n_out, len(eligible))
    return np.sort(keyed_rng(spec.seed, 1).permutation(eligible)[:n_out])


def make_feature_stream(spec: StreamSpec) -> Tuple[List[FeatureObservation], np.ndarray]:
    """Observations in view order and the inlier direction"""
    if spec.inlier_direction is not None:
        g = _unit(np.asarray(spec.inlier_direction, dtype=np.float64))
    else:
        g = _unit(keyed_rng(spec.seed, 0).standard_normal(spec.dim))
    outliers = set(outlier_positions(spec).tolist())

    observations = []
    for k in range(spec.count):
        rng = keyed_rng(spec.seed, 2 + k)
        if spec.weights == "uniform":
            w = float(rng.uniform(spec.weight_low, spec.weight_high))
        else:
            w = float(spec.weight_low)
        if k in outliers:
            if spec.placement == "antipodal":
                f = _perturb(-g, spec.noise, rng)
            else:
                f = _unit(rng.standard_normal(spec.dim))
            w *= spec.outlier_weight_scale
        else:
            f = _perturb(g, spec.noise, rng)
        observations.append(FeatureObservation(f, w, k))
    return observations, g


MAGIC_STREAM = b"VSTR"


def _stream_record(dim: int) -> np.dtype:
    return np.dtype([("feature", "<f4", (dim,)), ("weight", "<f4"), ("view", "<u4")])


def save_stream(observations: Sequence[FeatureObservation], path: PathLike, dim: Optional[int] = None):
    dim = dim if dim is not None else (len(observations[0].feature) if observations else 0)
    records = np.empty(len(observations), dtype=_stream_record(dim))
    for k, obs in enumerate(observations):
        records[k] = (obs.feature, obs.weight, obs.view_index)
    with open(path, "wb") as f:
        write_header(f, MAGIC_STREAM)
        f.write(struct.pack("<QI", len(observations), dim))
        f.write(records.tobytes())


def load_stream(path: PathLike) -> List[FeatureObservation]:
    """Observations are renormalized after the float32 round trip"""
    reader = BinaryReader.open(path)
    reader.header(MAGIC_STREAM)
    count, dim = reader.scalars("QI")
    records = reader.array(_stream_record(dim), count)
    reader.finish()
    return [
        FeatureObservation(_unit(r["feature"].astype(np.float64)), float(r["weight"]), int(r["view"]))
        for r in records
    ]


# =============================================================================
# Spec files
# =============================================================================

def load_spec(path: Optional[PathLike], kind: str):
    """Read an OcclusionSceneSpec or StreamSpec from JSON; None gives the defaults"""
    cls = {"occlusion": OcclusionSceneSpec, "stream": StreamSpec}[kind]
    if path is None:
        return cls()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read {kind} spec {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{kind} spec {path} must be a JSON object")
    defaults = asdict(cls())
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ConfigError(f"Unknown {kind} spec keys: {', '.join(unknown)}")
    for key, value in data.items():
        data[key] = _coerce_spec_value(kind, key, value, defaults[key])
    return cls(**data)


def _coerce_spec_value(kind: str, key: str, value, default):
    """Match a JSON value to the type of the field's default"""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        # optional direction vectors
        ok = value is None or (
            isinstance(value, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
        )
        value = tuple(float(x) for x in value) if ok and value is not None else value
    if not ok:
        raise ConfigError(f"{kind} spec field '{key}' has the wrong type: {value!r}")
    return value
