"""
Query selection, segmentation metrics and the mask corruption protocol.

Relevancy without negatives is (cos + 1) / 2. With negatives it is the
minimum over negatives of the pairwise softmax exp(z.q) / (exp(z.q) + exp(z.n)).
Gaussians (or pixels) without a feature always score 0.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from visilift.config import keyed_rng
from visilift.errors import ValidationError
from visilift.pseudo_label import UNLABELED
from visilift.scene_io import (
    BinaryReader,
    Camera,
    GaussianFeatureField,
    GaussianScene,
    PathLike,
    write_header,
)
from visilift.splat_visibility import accumulate_weights, composite


# =============================================================================
# Binary masks
# =============================================================================

@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValidationError(f"Mask must be 2-D, got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValidationError("Mask values must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @classmethod
    def from_bool(cls, array) -> "BinaryMask":
        return cls(np.asarray(array, dtype=bool).astype(np.uint8))

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def bounding_box(self) -> Optional[Tuple[int, int, int, int]]:
        """(x0, y0, x1, y1) inclusive, or None for an empty mask"""
        rows, cols = np.nonzero(self.bits)
        if len(rows) == 0:
            return None
        return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


MAGIC_MASK = b"VMSK"


def save_mask(mask: BinaryMask, path: PathLike):
    with open(path, "wb") as f:
        write_header(f, MAGIC_MASK)
        f.write(struct.pack("<II", mask.height, mask.width))
        f.write(np.ascontiguousarray(mask.bits, dtype=np.uint8).tobytes())


def load_mask(path: PathLike) -> BinaryMask:
    reader = BinaryReader.open(path)
    reader.header(MAGIC_MASK)
    height, width = reader.scalars("II")
    bits = reader.array(np.dtype(np.uint8), height * width).reshape(height, width)
    reader.finish()
    return BinaryMask(bits)


# =============================================================================
# Relevancy and selection
# =============================================================================

def _scores(vectors: np.ndarray, present: np.ndarray, query: np.ndarray,
            negatives: Optional[np.ndarray]) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if vectors.shape[-1] != query.shape[0]:
        raise ValidationError(f"Query has {query.shape[0]} dims, features have {vectors.shape[-1]}")
    sim = vectors @ query
    if negatives is None or len(negatives) == 0:
        score = 0.5 * (sim + 1.0)
    else:
        negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
        if negatives.shape[1] != query.shape[0]:
            raise ValidationError(f"Negatives have {negatives.shape[1]} dims, query has {query.shape[0]}")
        neg = vectors @ negatives.T
        score = np.min(1.0 / (1.0 + np.exp(neg - sim[..., None])), axis=-1)
    return np.where(present, score, 0.0)


def relevancy(field: GaussianFeatureField, query, negatives=None) -> np.ndarray:
    """Per-Gaussian relevancy in [0, 1]"""
    return _scores(field.features.astype(np.float64), field.valid, query, negatives)


def select_3d(field: GaussianFeatureField, query, threshold: float = 0.6, negatives=None) -> np.ndarray:
    scores = relevancy(field, query, negatives)
    return np.flatnonzero(field.valid & (scores >= threshold))


def _subset(scene: GaussianScene, selected) -> np.ndarray:
    subset = np.zeros(scene.count, dtype=bool)
    subset[np.fromiter(selected, dtype=np.int64)] = True
    return subset


def selection_weights(scene: GaussianScene, cam: Camera, selected) -> np.ndarray:
    """Per-pixel accumulated weight of the selected Gaussians, composited in the full scene order"""
    return accumulate_weights(scene, cam, subset=_subset(scene, selected))


def render_selection(scene: GaussianScene, cam: Camera, selected, threshold: float = 0.5) -> BinaryMask:
    return BinaryMask.from_bool(selection_weights(scene, cam, selected) >= threshold)


def render_feature_image(scene: GaussianScene, cam: Camera, field: GaussianFeatureField) -> np.ndarray:
    """Normalized per-pixel sum of w * z over Gaussians with a feature; zero where nothing lands"""
    image = np.zeros((cam.height, cam.width, field.dim), dtype=np.float64)
    valid = field.valid
    features = field.features.astype(np.float64)
    for fp in composite(scene, cam):
        if valid[fp.index]:
            image[fp.rows, fp.cols] += fp.weights[:, None] * features[fp.index]
    norms = np.linalg.norm(image, axis=2, keepdims=True)
    return np.where(norms > 1e-12, image / np.where(norms > 1e-12, norms, 1.0), 0.0)


def relevancy_map_2d(image: np.ndarray, query, negatives=None) -> np.ndarray:
    present = np.linalg.norm(image, axis=2) > 0
    return _scores(image, present, query, negatives)


def select_2d(scene: GaussianScene, cam: Camera, field: GaussianFeatureField, query,
              threshold: float = 0.5, negatives=None) -> BinaryMask:
    scores = relevancy_map_2d(render_feature_image(scene, cam, field), query, negatives)
    return BinaryMask.from_bool(scores >= threshold)


def semantic_segment(field: GaussianFeatureField, class_embeddings) -> np.ndarray:
    """Most similar class per Gaussian; ties go to the smaller id, featureless Gaussians stay unlabeled"""
    classes = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    if classes.shape[1] != field.dim:
        raise ValidationError(f"Class embeddings have {classes.shape[1]} dims, field has {field.dim}")
    labels = np.full(field.count, UNLABELED, dtype=np.uint32)
    valid = field.valid
    if valid.any() and len(classes):
        labels[valid] = np.argmax(field.features[valid].astype(np.float64) @ classes.T, axis=1)
    return labels


# =============================================================================
# Metrics
# =============================================================================

LabelsOrMask = Union[np.ndarray, BinaryMask, Sequence[BinaryMask]]


def _as_labels(value: LabelsOrMask, class_count: int) -> np.ndarray:
    """Masks become class 0 on foreground and void elsewhere"""
    if isinstance(value, BinaryMask):
        return np.where(value.bits.reshape(-1) == 1, 0, class_count).astype(np.int64)
    if isinstance(value, (list, tuple)) and value and isinstance(value[0], BinaryMask):
        return np.concatenate([_as_labels(m, class_count) for m in value])
    return np.asarray(value).astype(np.int64).reshape(-1)


def segmentation_scores(pred: LabelsOrMask, gt: LabelsOrMask, class_count: int) -> Dict:
    """
    Per-class IoU and accuracy plus their means over classes present in gt.

    Labels outside [0, class_count) are void: never scored as a class, but a
    void prediction on a class pixel is a miss and a class prediction on a
    void pixel is a false positive.
    """
    pred_flat, gt_flat = _as_labels(pred, class_count), _as_labels(gt, class_count)
    if pred_flat.shape != gt_flat.shape:
        raise ValidationError(f"Prediction has {pred_flat.size} entries, ground truth has {gt_flat.size}")
    void = class_count
    pred_flat = np.where((pred_flat >= 0) & (pred_flat < class_count), pred_flat, void)
    gt_flat = np.where((gt_flat >= 0) & (gt_flat < class_count), gt_flat, void)
    size = class_count + 1
    confusion = np.bincount(gt_flat * size + pred_flat, minlength=size * size).reshape(size, size)

    per_class: Dict[str, Dict[str, float]] = {}
    for c in range(class_count):
        tp = int(confusion[c, c])
        fn = int(confusion[c, :].sum()) - tp
        fp = int(confusion[:, c].sum()) - tp
        if tp + fn == 0:
            continue
        per_class[str(c)] = {"iou": tp / (tp + fp + fn), "acc": tp / (tp + fn), "support": tp + fn}

    if not per_class:
        logging.warning("Ground truth contains no scored class; metrics are reported as 0")
        return {"miou": 0.0, "macc": 0.0, "per_class": {}}
    return {
        "miou": float(np.mean([v["iou"] for v in per_class.values()])),
        "macc": float(np.mean([v["acc"] for v in per_class.values()])),
        "per_class": per_class,
    }


def miou_macc(pred: LabelsOrMask, gt: LabelsOrMask, class_count: int) -> Tuple[float, float]:
    scores = segmentation_scores(pred, gt, class_count)
    return scores["miou"], scores["macc"]


def class_purity(field: GaussianFeatureField, gt_labels: np.ndarray, class_embeddings) -> Dict[str, float]:
    """Mean cosine between z and the class embedding over featured Gaussians of each gt class"""
    classes = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    gt_labels = np.asarray(gt_labels).astype(np.int64)
    valid = field.valid
    purity = {}
    for c in range(len(classes)):
        members = valid & (gt_labels == c)
        if members.any():
            purity[str(c)] = float(np.mean(field.features[members].astype(np.float64) @ classes[c]))
    return purity


# =============================================================================
# Mask corruption
# =============================================================================

def disk(radius: int) -> np.ndarray:
    """Structuring element {(x, y): x^2 + y^2 <= r^2}"""
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return (x * x + y * y) <= radius * radius


def erode(mask: BinaryMask, radius: int) -> BinaryMask:
    return BinaryMask.from_bool(ndimage.binary_erosion(mask.bits.astype(bool), structure=disk(radius), border_value=0))


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    return BinaryMask.from_bool(ndimage.binary_dilation(mask.bits.astype(bool), structure=disk(radius)))


def corruption_sign(seed: int, mask_index: int) -> int:
    """-1 (erode) or +1 (dilate) with probability 0.5, keyed by (seed, mask index)"""
    return -1 if keyed_rng(seed, mask_index).random() < 0.5 else 1


def corrupt_mask(mask: BinaryMask, radius: int, seed: int = 0, mask_index: int = 0,
                 tau_min: int = 64, sign: Optional[int] = None) -> BinaryMask:
    """
    Erode or dilate a mask by a disk of the given radius.

    Args:
        mask: input mask
        radius: disk radius in pixels (>= 1)
        seed: run seed
        mask_index: position of the mask in its collection; with seed, fixes the sign
        tau_min: eroded masks smaller than this many pixels are dilated instead
        sign: force -1 (erode) or +1 (dilate) instead of drawing it
    """
    if radius < 1:
        raise ValidationError(f"Corruption radius must be >= 1, got {radius}")
    sign = corruption_sign(seed, mask_index) if sign is None else sign
    if sign < 0:
        eroded = erode(mask, radius)
        if eroded.area >= tau_min:
            return eroded
        logging.debug(f"Mask {mask_index}: eroded area {eroded.area} < {tau_min}, dilating instead")
    return dilate(mask, radius)


def corrupt_masks(masks: Iterable[BinaryMask], radius: int, seed: int, tau_min: int = 64) -> List[BinaryMask]:
    return [corrupt_mask(m, radius, seed, i, tau_min) for i, m in enumerate(masks)]
