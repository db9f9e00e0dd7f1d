"""
Domain types for scenes, cameras, feature maps, fields and labeled clouds,
plus their on-disk formats.

Binary formats are little-endian and start with a 4-byte magic and a u32
version (always 1):
- VGSC scene: count u64, then per Gaussian mean 3f, scale 3f, quat 4f (w,x,y,z), opacity f
- VFMP feature map: height u32, width u32, dim u32, then H*W*dim f32 (row, column, channel)
- VGFT field: count u64, dim u32, then per Gaussian dim f32 feature and f32 weight
- VLPC labeled cloud: count u64, then per point 3f position and u32 label

Cameras and query embeddings are UTF-8 JSON.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from visilift.errors import FormatError, ValidationError

FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI")

PathLike = Union[str, Path]


# =============================================================================
# Binary helpers shared by every format
# =============================================================================

def write_header(f: BinaryIO, magic: bytes):
    f.write(_HEADER.pack(magic, FORMAT_VERSION))


class BinaryReader:
    """Sequential reader over a whole file, raising FormatError on any layout problem"""

    def __init__(self, data: bytes, path: PathLike):
        self.data = data
        self.path = str(path)
        self.offset = 0

    @classmethod
    def open(cls, path: PathLike) -> "BinaryReader":
        try:
            return cls(Path(path).read_bytes(), path)
        except FileNotFoundError as e:
            raise FormatError(f"File not found: {path}") from e

    def header(self, magic: bytes):
        if len(self.data) < _HEADER.size:
            raise FormatError(f"{self.path}: file too short for a {magic.decode()} header")
        found, version = _HEADER.unpack_from(self.data, 0)
        if found != magic:
            raise FormatError(f"{self.path}: bad magic {found!r}, expected {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.path}: unsupported {magic.decode()} version {version}")
        self.offset = _HEADER.size

    def scalars(self, fmt: str) -> Tuple:
        layout = struct.Struct("<" + fmt)
        if self.offset + layout.size > len(self.data):
            raise FormatError(f"{self.path}: truncated header fields")
        values = layout.unpack_from(self.data, self.offset)
        self.offset += layout.size
        return values

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        nbytes = dtype.itemsize * count
        if self.offset + nbytes > len(self.data):
            raise FormatError(
                f"{self.path}: payload holds {len(self.data) - self.offset} bytes, header announces {nbytes}"
            )
        values = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset).copy()
        self.offset += nbytes
        return values

    def finish(self):
        if self.offset != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.offset} trailing bytes after payload")


def _readonly(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# =============================================================================
# Gaussians
# =============================================================================

@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray      # (3,) world units
    scale: np.ndarray     # (3,) per-axis standard deviations
    rotation: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    opacity: float


def quaternion_to_rotation(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions in (w, x, y, z) order"""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_of(g: Gaussian) -> np.ndarray:
    """Sigma = R diag(s^2) R^T for one Gaussian"""
    R = quaternion_to_rotation(g.rotation)
    s2 = np.asarray(g.scale, dtype=np.float64) ** 2
    cov = (R * s2) @ R.T
    return 0.5 * (cov + cov.T)


def covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Vectorized covariance_of over (N, 3) scales and (N, 4) quaternions"""
    R = quaternion_to_rotation(rotations)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    cov = np.einsum("nij,nj,nkj->nik", R, s2, R)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def _check_gaussians(means, scales, rotations, opacities) -> np.ndarray:
    """Validate Gaussian arrays; returns possibly renormalized quaternions"""
    n = len(opacities)
    for name, arr, width in (("mean", means, 3), ("scale", scales, 3), ("rotation", rotations, 4)):
        if arr.shape != (n, width):
            raise ValidationError(f"{name} array has shape {arr.shape}, expected ({n}, {width})")

    finite = (np.isfinite(means).all(axis=1) & np.isfinite(scales).all(axis=1)
              & np.isfinite(rotations).all(axis=1) & np.isfinite(opacities))
    if not finite.all():
        raise ValidationError("Gaussian has non-finite parameters", int(np.argmin(finite)))
    bad_scale = ~(scales > 0).all(axis=1)
    if bad_scale.any():
        raise ValidationError("Gaussian scale must be strictly positive", int(np.argmax(bad_scale)))
    bad_opacity = ~((opacities > 0) & (opacities <= 1))
    if bad_opacity.any():
        raise ValidationError("Gaussian opacity must lie in (0, 1]", int(np.argmax(bad_opacity)))

    norms = np.linalg.norm(rotations.astype(np.float64), axis=1)
    off = np.abs(norms - 1.0)
    if (off > 1e-3).any():
        raise ValidationError("Gaussian quaternion is not unit length", int(np.argmax(off > 1e-3)))
    fix = off > 1e-6
    if fix.any():
        logging.debug(f"Renormalizing {int(fix.sum())} near-unit quaternions")
        rotations = rotations.copy()
        rotations[fix] = (rotations[fix] / norms[fix, None]).astype(rotations.dtype)
    return rotations


@dataclass(frozen=True)
class GaussianScene:
    """Ordered, immutable set of Gaussians stored as float32 columns; index i is stable"""

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray

    @classmethod
    def from_arrays(cls, means, scales, rotations, opacities) -> "GaussianScene":
        means = np.asarray(means, dtype=np.float32).reshape(-1, 3)
        scales = np.asarray(scales, dtype=np.float32).reshape(-1, 3)
        rotations = np.asarray(rotations, dtype=np.float32).reshape(-1, 4)
        opacities = np.asarray(opacities, dtype=np.float32).reshape(-1)
        rotations = _check_gaussians(means, scales, rotations, opacities)
        return cls(
            means=_readonly(means, np.float32),
            scales=_readonly(scales, np.float32),
            rotations=_readonly(rotations, np.float32),
            opacities=_readonly(opacities, np.float32),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianScene":
        if not gaussians:
            return cls.empty()
        return cls.from_arrays(
            [g.mean for g in gaussians],
            [g.scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity for g in gaussians],
        )

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @property
    def count(self) -> int:
        return int(self.opacities.shape[0])

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].astype(np.float64),
            scale=self.scales[i].astype(np.float64),
            rotation=self.rotations[i].astype(np.float64),
            opacity=float(self.opacities[i]),
        )

    def __iter__(self) -> Iterator[Gaussian]:
        for i in range(self.count):
            yield self[i]

    @property
    def gaussians(self) -> List[Gaussian]:
        return list(self)

    def covariances(self) -> np.ndarray:
        return covariances(self.scales, self.rotations)


MAGIC_SCENE = b"VGSC"


def save_scene(scene: GaussianScene, path: PathLike):
    payload = np.concatenate(
        [scene.means, scene.scales, scene.rotations, scene.opacities[:, None]], axis=1
    ).astype("<f4")
    with open(path, "wb") as f:
        write_header(f, MAGIC_SCENE)
        f.write(struct.pack("<Q", scene.count))
        f.write(payload.tobytes())


def load_scene(path: PathLike) -> GaussianScene:
    """
    Load a VGSC scene file.

    Raises:
        FormatError: bad magic, version or payload size
        ValidationError: a Gaussian breaks an invariant (the index is reported)
    """
    reader = BinaryReader.open(path)
    reader.header(MAGIC_SCENE)
    (count,) = reader.scalars("Q")
    payload = reader.array("<f4", count * 11).reshape(count, 11)
    reader.finish()
    scene = GaussianScene.from_arrays(payload[:, 0:3], payload[:, 3:6], payload[:, 6:10], payload[:, 10])
    logging.info(f"Loaded scene {path} with {scene.count} Gaussians")
    return scene


# =============================================================================
# Cameras
# =============================================================================

@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4) rigid transform, row-major

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"Camera focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"Camera resolution must be at least 1x1, got {self.width}x{self.height}")
        M = np.asarray(self.world_to_camera, dtype=np.float64)
        if M.shape != (4, 4) or not np.isfinite(M).all():
            raise ValidationError("world_to_camera must be a finite 4x4 matrix")
        R = M[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5, rtol=0.0) or np.linalg.det(R) <= 0:
            raise ValidationError("world_to_camera rotation block is not a proper orthonormal rotation")
        if not np.allclose(M[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9, rtol=0.0):
            raise ValidationError("world_to_camera bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "world_to_camera", _readonly(M, np.float64))

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, position, target, fx: float, fy: float, width: int, height: int,
                up=(0.0, -1.0, 0.0), cx: Optional[float] = None, cy: Optional[float] = None) -> "Camera":
        """Camera at position looking at target (x right, y down, z forward)"""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(-np.asarray(up, dtype=np.float64), forward)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        M = np.eye(4)
        M[:3, :3] = np.stack([right, down, forward])
        M[:3, 3] = -M[:3, :3] @ position
        return cls(
            fx=float(fx), fy=float(fy),
            cx=float(width) / 2.0 if cx is None else float(cx),
            cy=float(height) / 2.0 if cy is None else float(cy),
            width=int(width), height=int(height), world_to_camera=M,
        )

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
        }


def save_cameras(cameras: Sequence[Camera], path: PathLike):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps([cam.to_dict() for cam in cameras], indent=2) + "\n")


def load_cameras(path: PathLike) -> List[Camera]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise FormatError(f"Cameras file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Cameras file {path} is not valid JSON: {e}") from e
    if not isinstance(data, list):
        raise FormatError(f"Cameras file {path} must hold a JSON array")

    cameras = []
    for idx, entry in enumerate(data):
        try:
            matrix = np.asarray(entry["world_to_camera"], dtype=np.float64)
            if matrix.size != 16:
                raise FormatError(f"{path}: camera {idx} world_to_camera has {matrix.size} numbers, expected 16")
            cameras.append(Camera(
                fx=float(entry["fx"]), fy=float(entry["fy"]),
                cx=float(entry["cx"]), cy=float(entry["cy"]),
                width=int(entry["width"]), height=int(entry["height"]),
                world_to_camera=matrix.reshape(4, 4),
            ))
        except FormatError:
            raise
        except ValidationError as e:
            raise ValidationError(f"{path}: camera {idx}: {e}") from e
        except (KeyError, TypeError, ValueError) as e:
            # ValueError covers non-numeric intrinsics and ragged matrices
            raise FormatError(f"{path}: camera {idx} is missing or has malformed field {e}") from e
    logging.info(f"Loaded {len(cameras)} cameras from {path}")
    return cameras


# =============================================================================
# Feature maps
# =============================================================================

@dataclass(frozen=True)
class FeatureMap:
    """Per-pixel unit features; an all-zero pixel marks "no feature" """

    data: np.ndarray  # (height, width, dim) float32

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValidationError(f"Feature map must be (height, width, dim), got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("Feature map contains non-finite values")
        norms = np.linalg.norm(data.astype(np.float64), axis=2)
        occupied = (data != 0).any(axis=2)
        bad = occupied & (np.abs(norms - 1.0) > 1e-4)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise ValidationError(f"Feature map pixel ({row}, {col}) has norm {norms[row, col]:.6f}, expected 1")
        object.__setattr__(self, "data", _readonly(data, np.float32))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])

    def feature_at(self, u: int, v: int) -> Optional[np.ndarray]:
        """Feature at column u, row v, or None for a zero pixel"""
        f = self.data[v, u]
        if not f.any():
            return None
        return f.astype(np.float64)


MAGIC_FEATURE_MAP = b"VFMP"


def save_feature_map(fmap: FeatureMap, path: PathLike):
    with open(path, "wb") as f:
        write_header(f, MAGIC_FEATURE_MAP)
        f.write(struct.pack("<III", fmap.height, fmap.width, fmap.dim))
        f.write(fmap.data.astype("<f4").tobytes())


def load_feature_map(path: PathLike) -> FeatureMap:
    reader = BinaryReader.open(path)
    reader.header(MAGIC_FEATURE_MAP)
    height, width, dim = reader.scalars("III")
    data = reader.array("<f4", height * width * dim).reshape(height, width, dim)
    reader.finish()
    return FeatureMap(data)


# =============================================================================
# Feature fields
# =============================================================================

@dataclass(frozen=True)
class GaussianFeatureField:
    """Per-Gaussian unit feature z_i and cumulative weight W_i (W_i = 0 iff z_i = 0)"""

    features: np.ndarray  # (N, dim) float32
    weights: np.ndarray   # (N,) float32

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float32)
        weights = np.asarray(self.weights, dtype=np.float32).reshape(-1)
        if features.ndim != 2 or features.shape[0] != weights.shape[0]:
            raise ValidationError(
                f"Field features {features.shape} and weights {weights.shape} disagree on Gaussian count"
            )
        if not (np.isfinite(features).all() and np.isfinite(weights).all()):
            raise ValidationError("Field contains non-finite values")
        if (weights < 0).any():
            raise ValidationError("Field cumulative weight must be >= 0", int(np.argmax(weights < 0)))
        empty = weights == 0
        zero = ~features.any(axis=1)
        mismatch = empty != zero
        if mismatch.any():
            raise ValidationError("Field weight is zero exactly when the feature is zero", int(np.argmax(mismatch)))
        norms = np.linalg.norm(features.astype(np.float64), axis=1)
        bad = ~empty & (np.abs(norms - 1.0) > 1e-5)
        if bad.any():
            raise ValidationError("Field feature is not unit length", int(np.argmax(bad)))
        object.__setattr__(self, "features", _readonly(features, np.float32))
        object.__setattr__(self, "weights", _readonly(weights, np.float32))

    @classmethod
    def empty(cls, count: int, dim: int) -> "GaussianFeatureField":
        return cls(np.zeros((count, dim), dtype=np.float32), np.zeros(count, dtype=np.float32))

    @property
    def count(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def valid(self) -> np.ndarray:
        """Mask of Gaussians that received at least one observation"""
        return self.weights > 0


MAGIC_FIELD = b"VGFT"


def save_field(field: GaussianFeatureField, path: PathLike):
    payload = np.concatenate([field.features, field.weights[:, None]], axis=1).astype("<f4")
    with open(path, "wb") as f:
        write_header(f, MAGIC_FIELD)
        f.write(struct.pack("<QI", field.count, field.dim))
        f.write(payload.tobytes())


def load_field(path: PathLike) -> GaussianFeatureField:
    reader = BinaryReader.open(path)
    reader.header(MAGIC_FIELD)
    count, dim = reader.scalars("QI")
    payload = reader.array("<f4", count * (dim + 1)).reshape(count, dim + 1)
    reader.finish()
    return GaussianFeatureField(payload[:, :dim], payload[:, dim])


# =============================================================================
# Labeled point clouds
# =============================================================================

@dataclass(frozen=True)
class LabeledPointCloud:
    points: np.ndarray  # (Q, 3) float32
    labels: np.ndarray  # (Q,) uint32

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        raw_labels = np.asarray(self.labels).reshape(-1)
        if points.shape[0] != raw_labels.shape[0]:
            raise ValidationError(f"Cloud has {points.shape[0]} points but {raw_labels.shape[0]} labels")
        if not np.isfinite(points).all():
            raise ValidationError("Cloud contains non-finite points", int(np.argmin(np.isfinite(points).all(axis=1))))
        if raw_labels.size and (raw_labels.min() < 0 or raw_labels.max() >= 0xFFFFFFFF):
            raise ValidationError("Cloud labels must be non-negative 32-bit class ids")
        object.__setattr__(self, "points", _readonly(points, np.float32))
        object.__setattr__(self, "labels", _readonly(raw_labels, np.uint32))

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])


MAGIC_CLOUD = b"VLPC"
_CLOUD_RECORD = np.dtype([("position", "<f4", (3,)), ("label", "<u4")])


def save_point_cloud(cloud: LabeledPointCloud, path: PathLike):
    records = np.empty(cloud.count, dtype=_CLOUD_RECORD)
    records["position"] = cloud.points
    records["label"] = cloud.labels
    with open(path, "wb") as f:
        write_header(f, MAGIC_CLOUD)
        f.write(struct.pack("<Q", cloud.count))
        f.write(records.tobytes())


def load_point_cloud(path: PathLike) -> LabeledPointCloud:
    reader = BinaryReader.open(path)
    reader.header(MAGIC_CLOUD)
    (count,) = reader.scalars("Q")
    records = reader.array(_CLOUD_RECORD, count)
    reader.finish()
    return LabeledPointCloud(records["position"], records["label"])


# =============================================================================
# Query embeddings
# =============================================================================

@dataclass(frozen=True)
class QuerySet:
    dim: int
    names: Tuple[str, ...]
    vectors: np.ndarray           # (k, dim) unit rows
    negative_names: Tuple[str, ...] = ()
    negatives: Optional[np.ndarray] = None

    def vector(self, name: str) -> np.ndarray:
        try:
            return self.vectors[self.names.index(name)]
        except ValueError as e:
            raise ValidationError(f"Unknown query '{name}'") from e


def _normalized_rows(entries, dim: int, path: PathLike, kind: str) -> Tuple[Tuple[str, ...], np.ndarray]:
    names, rows = [], []
    for idx, entry in enumerate(entries):
        try:
            name, vec = str(entry["name"]), np.asarray(entry["vec"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: {kind} {idx} is malformed: {e}") from e
        if vec.shape != (dim,):
            raise FormatError(f"{path}: {kind} '{name}' has {vec.size} components, expected {dim}")
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm == 0:
            raise ValidationError(f"{path}: {kind} '{name}' cannot be normalized")
        names.append(name)
        rows.append(vec / norm)
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return tuple(names), _readonly(matrix, np.float64)


def load_queries(path: PathLike) -> QuerySet:
    """Load query embeddings; vectors are normalized on load"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise FormatError(f"Query file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Query file {path} is not valid JSON: {e}") from e
    try:
        dim = int(data["dim"])
        queries = data["queries"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: query file needs 'dim' and 'queries'") from e

    names, vectors = _normalized_rows(queries, dim, path, "query")
    negative_names, negatives = (), None
    if data.get("negatives"):
        negative_names, negatives = _normalized_rows(data["negatives"], dim, path, "negative")
    return QuerySet(dim=dim, names=names, vectors=vectors,
                    negative_names=negative_names, negatives=negatives)


def save_queries(queries: QuerySet, path: PathLike):
    doc = {
        "dim": queries.dim,
        "queries": [{"name": n, "vec": v.tolist()} for n, v in zip(queries.names, queries.vectors)],
        "negatives": [] if queries.negatives is None else [
            {"name": n, "vec": v.tolist()} for n, v in zip(queries.negative_names, queries.negatives)
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(doc, indent=2) + "\n")
