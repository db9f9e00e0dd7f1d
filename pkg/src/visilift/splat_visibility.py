"""
Projection of Gaussians into a view and front-to-back compositing.

Gaussians are sorted once per view by camera-space center depth (ties by
index) and composited in that order. Every pixel inside a Gaussian's 3-sigma
ellipse gets alpha = min(0.99, o * rho), where rho is the projected density;
alphas below 1/255 are skipped. The Gaussian's weight there is alpha * T, and
T is then multiplied by (1 - alpha).

Pixel (u, v) is sampled at coordinates (u, v); a Gaussian's center pixel is
(floor(x + 0.5), floor(y + 0.5)) of its projected mean.
"""

import collections.abc
import logging
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from visilift.errors import NumericalError
from visilift.scene_io import BinaryReader, Camera, Gaussian, GaussianScene, PathLike, covariance_of, write_header

NEAR_PLANE = 0.01
FRUSTUM_PAD = 1.3
DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
SIGMA_EXTENT = 3.0


@dataclass(frozen=True)
class ProjectedGaussian:
    index: int
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray   # (2, 2) pixels^2, dilated
    depth: float
    conic: np.ndarray   # upper triangle (a, b, c) of the inverse of cov2d
    radius: int         # 3-sigma bound of the largest axis, pixels


@dataclass(frozen=True)
class ProjectedScene:
    """Columns of all Gaussians visible to one camera, in compositing order"""

    indices: np.ndarray
    means2d: np.ndarray
    covs2d: np.ndarray
    depths: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __getitem__(self, k: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            index=int(self.indices[k]),
            mean2d=self.means2d[k],
            cov2d=self.covs2d[k],
            depth=float(self.depths[k]),
            conic=self.conics[k],
            radius=int(self.radii[k]),
        )


def _project(indices: np.ndarray, means: np.ndarray, covs3d: np.ndarray, opacities: np.ndarray,
             cam: Camera) -> ProjectedScene:
    """EWA projection of float64 Gaussian columns; returns survivors in (depth, index) order"""
    R = cam.rotation
    p = means @ R.T + cam.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    in_front = z > NEAR_PLANE
    safe_z = np.where(in_front, z, 1.0)
    u = cam.fx * x / safe_z + cam.cx
    v = cam.fy * y / safe_z + cam.cy
    pad_u = 0.5 * (FRUSTUM_PAD - 1.0) * cam.width
    pad_v = 0.5 * (FRUSTUM_PAD - 1.0) * cam.height
    inside = (u >= -pad_u) & (u <= cam.width + pad_u) & (v >= -pad_v) & (v <= cam.height + pad_v)
    keep = in_front & inside

    x, y, z = x[keep], y[keep], z[keep]
    J = np.zeros((len(z), 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    T = J @ R  # (M, 2, 3)
    cov2d = T @ covs3d[keep] @ np.swapaxes(T, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    if not (np.isfinite(det).all() and (det > 0).all()):
        raise NumericalError("Projected covariance is singular after dilation")
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    lambda_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radii = np.ceil(SIGMA_EXTENT * np.sqrt(lambda_max)).astype(np.int64)

    kept_indices = indices[keep]
    order = np.lexsort((kept_indices, z))
    return ProjectedScene(
        indices=kept_indices[order],
        means2d=np.stack([u[keep], v[keep]], axis=1)[order],
        covs2d=cov2d[order],
        depths=z[order],
        conics=conics[order],
        radii=radii[order],
        opacities=opacities[keep][order],
    )


def project_scene(scene: GaussianScene, cam: Camera) -> ProjectedScene:
    return _project(
        np.arange(scene.count, dtype=np.int64),
        scene.means.astype(np.float64),
        scene.covariances(),
        scene.opacities.astype(np.float64),
        cam,
    )


def project_gaussian(g: Gaussian, cam: Camera, index: int = 0) -> Optional[ProjectedGaussian]:
    """Project one Gaussian; None when it is behind the near plane or outside the padded frustum"""
    projected = _project(
        np.array([index], dtype=np.int64),
        np.asarray(g.mean, dtype=np.float64).reshape(1, 3),
        covariance_of(g)[None],
        np.array([g.opacity], dtype=np.float64),
        cam,
    )
    return projected[0] if len(projected) else None


def _mahalanobis2d(conic: np.ndarray, dx, dy):
    return conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy


def _alpha(opacity, rho):
    raw = opacity * rho
    return np.where(raw < ALPHA_MIN, 0.0, np.minimum(ALPHA_MAX, raw))


def density_at(pg: ProjectedGaussian, u) -> float:
    """Projected density exp(-0.5 d^T Sigma^-1 d) at pixel coordinates u"""
    u = np.asarray(u, dtype=np.float64)
    dx, dy = u[0] - pg.mean2d[0], u[1] - pg.mean2d[1]
    return float(np.exp(-0.5 * _mahalanobis2d(pg.conic, dx, dy)))


def alpha_at(g: Gaussian, pg: ProjectedGaussian, u) -> float:
    return float(_alpha(float(g.opacity), density_at(pg, u)))


def center_pixel(mean2d) -> Tuple[int, int]:
    return int(np.floor(mean2d[0] + 0.5)), int(np.floor(mean2d[1] + 0.5))


# =============================================================================
# Compositing
# =============================================================================

@dataclass(frozen=True)
class Footprint:
    """Pixels one Gaussian contributes to, in the order it was composited"""

    index: int
    rows: np.ndarray
    cols: np.ndarray
    alphas: np.ndarray
    weights: np.ndarray
    center: Optional[Tuple[int, int]]
    center_weight: float


def composite(scene: GaussianScene, cam: Camera, subset: Optional[np.ndarray] = None,
              projected: Optional[ProjectedScene] = None) -> Iterator[Footprint]:
    """
    Front-to-back compositing; yields one Footprint per contributing Gaussian in depth order.

    Args:
        subset: optional boolean mask over Gaussian indices; others are transparent
        projected: reuse an existing projection of scene into cam
    """
    if projected is None:
        projected = project_scene(scene, cam)
    height, width = cam.height, cam.width
    transmittance = np.ones((height, width), dtype=np.float64)

    for k in range(len(projected)):
        index = int(projected.indices[k])
        if subset is not None and not subset[index]:
            continue
        mx, my = projected.means2d[k]
        r = int(projected.radii[k])
        x0, x1 = max(0, int(np.floor(mx)) - r), min(width, int(np.ceil(mx)) + r + 1)
        y0, y1 = max(0, int(np.floor(my)) - r), min(height, int(np.ceil(my)) + r + 1)
        if x0 >= x1 or y0 >= y1:
            continue

        dx = np.arange(x0, x1, dtype=np.float64)[None, :] - mx
        dy = np.arange(y0, y1, dtype=np.float64)[:, None] - my
        m = _mahalanobis2d(projected.conics[k], dx, dy)
        alpha = _alpha(projected.opacities[k], np.exp(-0.5 * m))
        alpha[m > SIGMA_EXTENT * SIGMA_EXTENT] = 0.0
        hit = alpha > 0
        if not hit.any():
            continue

        patch = transmittance[y0:y1, x0:x1]
        center, center_weight = None, 0.0
        cu, cv = center_pixel((mx, my))
        if x0 <= cu < x1 and y0 <= cv < y1:
            center = (cu, cv)
            center_weight = float(alpha[cv - y0, cu - x0] * patch[cv - y0, cu - x0])

        before = patch[hit]
        hit_alpha = alpha[hit]
        weights = hit_alpha * before
        patch[hit] = before * (1.0 - hit_alpha)

        rows, cols = np.nonzero(hit)
        yield Footprint(
            index=index,
            rows=rows + y0,
            cols=cols + x0,
            alphas=hit_alpha,
            weights=weights,
            center=center,
            center_weight=center_weight,
        )


@dataclass(frozen=True)
class VisibilityRecord:
    gaussian_index: int
    view_index: int
    pixel: Tuple[int, int]
    weight: float


class ViewVisibility(collections.abc.Sequence):
    """Visibility records of one view as columns, sorted by Gaussian index"""

    def __init__(self, view_index: int, indices: np.ndarray, pixels: np.ndarray, weights: np.ndarray):
        self.view_index = view_index
        self.indices = indices
        self.pixels = pixels
        self.weights = weights

    @classmethod
    def from_records(cls, records: Sequence[VisibilityRecord]) -> "ViewVisibility":
        if isinstance(records, ViewVisibility):
            return records
        view_index = records[0].view_index if len(records) else 0
        return cls(
            view_index,
            np.array([r.gaussian_index for r in records], dtype=np.int64),
            np.array([r.pixel for r in records], dtype=np.int64).reshape(-1, 2),
            np.array([r.weight for r in records], dtype=np.float64),
        )

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        return VisibilityRecord(
            gaussian_index=int(self.indices[k]),
            view_index=self.view_index,
            pixel=(int(self.pixels[k, 0]), int(self.pixels[k, 1])),
            weight=float(self.weights[k]),
        )


VisibilityInput = Union[ViewVisibility, Sequence[VisibilityRecord]]


def view_visibilities(scene: GaussianScene, cam: Camera, view_index: int) -> ViewVisibility:
    """Per-Gaussian marginal contribution alpha * T at the Gaussian's own center pixel"""
    indices, pixels, weights = [], [], []
    for fp in composite(scene, cam):
        if fp.center is not None and fp.center_weight > 0:
            indices.append(fp.index)
            pixels.append(fp.center)
            weights.append(fp.center_weight)

    indices = np.asarray(indices, dtype=np.int64)
    order = np.argsort(indices, kind="stable")
    visibility = ViewVisibility(
        view_index,
        indices[order],
        np.asarray(pixels, dtype=np.int64).reshape(-1, 2)[order],
        np.asarray(weights, dtype=np.float64)[order],
    )
    logging.debug(f"View {view_index}: {len(visibility)} of {scene.count} Gaussians visible")
    return visibility


class WeightMap:
    """Per-pixel lists of (gaussian_index, weight) in compositing order"""

    def __init__(self, height: int, width: int, pixels: Optional[List[List[Tuple[int, float]]]] = None):
        self.height = height
        self.width = width
        self.pixels = pixels if pixels is not None else [[] for _ in range(height * width)]

    def at(self, u: int, v: int) -> List[Tuple[int, float]]:
        return self.pixels[v * self.width + u]

    def sums(self) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=np.float64)
        for flat, entries in enumerate(self.pixels):
            total = 0.0
            for _, w in entries:
                total += w
            out[flat // self.width, flat % self.width] = total
        return out


def per_pixel_weights(scene: GaussianScene, cam: Camera) -> WeightMap:
    wmap = WeightMap(cam.height, cam.width)
    for fp in composite(scene, cam):
        for row, col, w in zip(fp.rows.tolist(), fp.cols.tolist(), fp.weights.tolist()):
            wmap.pixels[row * cam.width + col].append((fp.index, w))
    return wmap


def accumulate_weights(scene: GaussianScene, cam: Camera, subset: Optional[np.ndarray] = None,
                       groups: Optional[np.ndarray] = None, group_count: int = 1) -> np.ndarray:
    """
    Accumulated weight per pixel, optionally split by Gaussian group.

    Returns (height, width) when groups is None, else (group_count, height, width).
    """
    if groups is None:
        acc = np.zeros((cam.height, cam.width), dtype=np.float64)
        for fp in composite(scene, cam, subset=subset):
            acc[fp.rows, fp.cols] += fp.weights
        return acc

    acc = np.zeros((group_count, cam.height, cam.width), dtype=np.float64)
    for fp in composite(scene, cam, subset=subset):
        acc[groups[fp.index], fp.rows, fp.cols] += fp.weights
    return acc


# =============================================================================
# Weight map debug dump
# =============================================================================

MAGIC_WEIGHT_MAP = b"VWMP"
_WEIGHT_ENTRY = np.dtype([("index", "<u4"), ("weight", "<f4")])


def save_weight_map(wmap: WeightMap, path: PathLike):
    with open(path, "wb") as f:
        write_header(f, MAGIC_WEIGHT_MAP)
        f.write(struct.pack("<II", wmap.height, wmap.width))
        for entries in wmap.pixels:
            f.write(struct.pack("<I", len(entries)))
            if entries:
                records = np.empty(len(entries), dtype=_WEIGHT_ENTRY)
                records["index"] = [i for i, _ in entries]
                records["weight"] = [w for _, w in entries]
                f.write(records.tobytes())


def load_weight_map(path: PathLike) -> WeightMap:
    """Load a VWMP dump; weights come back at float32 precision"""
    reader = BinaryReader.open(path)
    reader.header(MAGIC_WEIGHT_MAP)
    height, width = reader.scalars("II")
    pixels: List[List[Tuple[int, float]]] = []
    for _ in range(height * width):
        (count,) = reader.scalars("I")
        records = reader.array(_WEIGHT_ENTRY, count)
        pixels.append([(int(i), float(w)) for i, w in zip(records["index"], records["weight"])])
    reader.finish()
    return WeightMap(height, width, pixels)

