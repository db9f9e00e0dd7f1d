"""
Lift orchestration: visibility -> gate -> per-Gaussian aggregation, view by view.

Views are prepared (visibility, gate, feature lookup) on a thread pool in
windows of `workers` views; the prepared observations are always applied to
the aggregator in ascending view order, so the field never depends on the
schedule. Only one window of prepared views is alive at a time.
"""

import collections.abc
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from itertools import islice
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from visilift.config import PipelineConfig, with_overrides
from visilift.errors import ConfigError, ValidationError
from visilift.eval_harness import class_purity, segmentation_scores, semantic_segment
from visilift.pseudo_label import load_labels
from visilift.robust_aggregate import DispersionAccumulator, make_aggregator
from visilift.scene_io import (
    Camera,
    FeatureMap,
    GaussianFeatureField,
    GaussianScene,
    load_cameras,
    load_feature_map,
    load_queries,
    load_scene,
    save_field,
)
from visilift.splat_visibility import view_visibilities
from visilift.synth_bench import corrupt_feature_map
from visilift.visibility_gate import apply_gate


# =============================================================================
# Inputs
# =============================================================================

class LazyFeatureMaps(collections.abc.Sequence):
    """Feature maps read from disk on access"""

    def __init__(self, paths: Sequence[str]):
        self.paths = list(paths)

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i):
        return load_feature_map(self.paths[i])


class TransformedMaps(collections.abc.Sequence):
    """A feature-map sequence with a per-view transform applied on access"""

    def __init__(self, maps: Sequence[FeatureMap], transform: Callable[[int, FeatureMap], FeatureMap]):
        self.maps = maps
        self.transform = transform

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i):
        return self.transform(i, self.maps[i])


@dataclass
class LiftInputs:
    scene: GaussianScene
    cameras: Sequence[Camera]
    maps: Sequence[FeatureMap]

    def __post_init__(self):
        if len(self.cameras) != len(self.maps):
            raise ValidationError(f"Got {len(self.cameras)} cameras but {len(self.maps)} feature maps")

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "LiftInputs":
        config.require_inputs()
        return cls(load_scene(config.scene), load_cameras(config.cameras), LazyFeatureMaps(config.feature_maps))

    def views(self) -> Iterator[Tuple[int, Camera, FeatureMap]]:
        """(view index, camera, map) in ascending view order"""
        for i, cam in enumerate(self.cameras):
            yield i, cam, self.maps[i]

    def with_maps(self, maps: Sequence[FeatureMap]) -> "LiftInputs":
        return LiftInputs(self.scene, self.cameras, maps)


@dataclass
class ViewObservations:
    view_index: int
    indices: np.ndarray   # kept Gaussians with a feature at their center pixel
    features: np.ndarray  # (k, dim)
    weights: np.ndarray
    dim: int
    records: int = 0
    kept: int = 0
    zero_skips: int = 0


def prepare_view(scene: GaussianScene, cam: Camera, fmap: FeatureMap, view_index: int,
                 config: PipelineConfig) -> ViewObservations:
    """Visibility, gate and center-pixel feature lookup for one view"""
    if (fmap.height, fmap.width) != (cam.height, cam.width):
        raise ValidationError(
            f"Feature map is {fmap.width}x{fmap.height} but camera is {cam.width}x{cam.height}", view_index
        )
    visibility = view_visibilities(scene, cam, view_index)
    result = apply_gate(visibility, config.gate, config.gating_enabled)
    kept = np.asarray(result.kept, dtype=np.int64)
    positions = np.searchsorted(visibility.indices, kept)
    pixels = visibility.pixels[positions].reshape(-1, 2)
    weights = visibility.weights[positions]
    features = fmap.data[pixels[:, 1], pixels[:, 0]].astype(np.float64).reshape(len(kept), fmap.dim)
    has_feature = features.any(axis=1)
    return ViewObservations(
        view_index=view_index,
        indices=kept[has_feature],
        features=features[has_feature],
        weights=weights[has_feature],
        dim=fmap.dim,
        records=len(visibility),
        kept=len(kept),
        zero_skips=int(np.count_nonzero(~has_feature)),
    )


def _windows(iterable: Iterable, size: int) -> Iterator[list]:
    it = iter(iterable)
    while True:
        window = list(islice(it, size))
        if not window:
            return
        yield window


def stream_views(inputs: LiftInputs, config: PipelineConfig) -> Iterator[ViewObservations]:
    """Prepared views in ascending order; at most `workers` are prepared ahead"""
    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        for window in _windows(inputs.views(), config.workers):
            yield from executor.map(
                lambda view: prepare_view(inputs.scene, view[1], view[2], view[0], config), window
            )


# =============================================================================
# Lift
# =============================================================================

def lift_views(inputs: LiftInputs, config: PipelineConfig) -> Tuple[GaussianFeatureField, Dict]:
    """
    Lift 2D features onto the scene's Gaussians.

    Args:
        inputs: scene, cameras and one feature map per camera
        config: gate, aggregator and worker settings

    Returns:
        (field, summary) where summary counts views, records and skips
    """
    started = time.perf_counter()
    summary = {
        "start_time": datetime.now(timezone.utc).isoformat(),
        "aggregator": config.aggregator,
        "gating_enabled": config.gating_enabled,
        "epochs": config.epochs,
        "views_processed": 0,
        "records_seen": 0,
        "records_kept": 0,
        "zero_feature_skips": 0,
        "gaussians_with_weight": 0,
    }
    if config.aggregator == "l1-median":
        summary["weiszfeld_iters"] = config.weiszfeld_iters
        summary["weiszfeld_eps"] = config.weiszfeld_eps
    if len(inputs.cameras) == 0:
        raise ValidationError("Nothing to lift: no views given")

    aggregator = None
    dim = None
    for epoch in range(config.epochs):
        for view in stream_views(inputs, config):
            if dim is None:
                dim = view.dim
                aggregator = make_aggregator(config.aggregator, inputs.scene.count, dim,
                                             config.weiszfeld_iters, config.weiszfeld_eps)
            elif view.dim != dim:
                raise ValidationError(f"Feature map has dim {view.dim}, earlier maps have {dim}", view.view_index)
            aggregator.update(view.indices, view.features, view.weights)
            if epoch == 0:
                summary["views_processed"] += 1
                summary["records_seen"] += view.records
                summary["records_kept"] += view.kept
                summary["zero_feature_skips"] += view.zero_skips
        logging.debug(f"Epoch {epoch + 1}/{config.epochs} done")

    lifted = aggregator.field()
    summary["gaussians_with_weight"] = int(np.count_nonzero(lifted.valid))
    summary["aggregator_bytes"] = int(aggregator.nbytes)
    summary["end_time"] = datetime.now(timezone.utc).isoformat()
    summary["elapsed_seconds"] = round(time.perf_counter() - started, 3)
    if summary["zero_feature_skips"]:
        logging.warning(f"{summary['zero_feature_skips']} kept Gaussians hit pixels without a feature")
    logging.info(
        f"Lifted {summary['views_processed']} views: kept {summary['records_kept']} of "
        f"{summary['records_seen']} records, {summary['gaussians_with_weight']} of "
        f"{inputs.scene.count} Gaussians carry a feature"
    )
    return lifted, summary


def write_json(data: Dict, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(data, indent=2) + "\n")


def lift(config: PipelineConfig, inputs: Optional[LiftInputs] = None) -> GaussianFeatureField:
    """Run the lift from config paths (or given inputs) and write the configured outputs"""
    inputs = inputs if inputs is not None else LiftInputs.from_config(config)
    lifted, summary = lift_views(inputs, config)
    if config.output:
        save_field(lifted, config.output)
        logging.info(f"Wrote feature field to {config.output}")
    if config.summary:
        write_json(summary, config.summary)
    return lifted


def dispersion_pass(inputs: LiftInputs, config: PipelineConfig,
                    lifted: GaussianFeatureField) -> Tuple[float, np.ndarray]:
    """Re-stream the views and measure mean (1 - f.z) against a lifted field"""
    accumulator = DispersionAccumulator(lifted)
    for view in stream_views(inputs, config):
        accumulator.update(view.indices, view.features)
    return accumulator.value(), accumulator.per_gaussian()


# =============================================================================
# Evaluation targets, ablations and the corruption sweep
# =============================================================================

@dataclass(frozen=True)
class EvalTargets:
    class_embeddings: np.ndarray  # (C, dim)
    gt_labels: np.ndarray         # (N,) per-Gaussian ground truth class
    class_names: Tuple[str, ...] = ()

    @classmethod
    def from_files(cls, queries_path: str, labels_path: str) -> "EvalTargets":
        queries = load_queries(queries_path)
        labels = load_labels(labels_path)
        return cls(queries.vectors, labels.labels, queries.names)

    @property
    def class_count(self) -> int:
        return int(len(self.class_embeddings))


def evaluate_field(lifted: GaussianFeatureField, targets: EvalTargets) -> Dict:
    """Semantic segmentation scores and per-class purity of a lifted field"""
    if len(targets.gt_labels) != lifted.count:
        raise ValidationError(f"Ground truth covers {len(targets.gt_labels)} Gaussians, field has {lifted.count}")
    predicted = semantic_segment(lifted, targets.class_embeddings)
    scores = segmentation_scores(predicted, targets.gt_labels, targets.class_count)
    scores["purity"] = class_purity(lifted, targets.gt_labels, targets.class_embeddings)
    return scores


# cell name -> config overrides
STANDARD_CELLS: Dict[str, Dict] = {
    "baseline": {"gating_enabled": False, "aggregator": "weighted-mean"},
    "cosine_only": {"gating_enabled": False, "aggregator": "cosine-median"},
    "mass_cosine": {"gating_enabled": True, "use_mass_stage": True, "use_quantile_stage": False,
                    "aggregator": "cosine-median"},
    "quantile_cosine": {"gating_enabled": True, "use_mass_stage": False, "use_quantile_stage": True,
                        "aggregator": "cosine-median"},
    "full": {"gating_enabled": True, "use_mass_stage": True, "use_quantile_stage": True,
             "aggregator": "cosine-median"},
    "gated_mean": {"gating_enabled": True, "use_mass_stage": True, "use_quantile_stage": True,
                   "aggregator": "weighted-mean"},
    "gated_l1": {"gating_enabled": True, "use_mass_stage": True, "use_quantile_stage": True,
                 "aggregator": "l1-median"},
}

Cell = Union[str, Dict]


def _resolve_cell(cell: Cell) -> Tuple[str, Dict]:
    if isinstance(cell, str):
        if cell not in STANDARD_CELLS:
            raise ConfigError(f"Unknown ablation cell '{cell}', expected one of {', '.join(STANDARD_CELLS)}")
        return cell, dict(STANDARD_CELLS[cell])
    overrides = dict(cell)
    name = str(overrides.pop("name", "cell"))
    if "base" in overrides:
        base = overrides.pop("base")
        if base not in STANDARD_CELLS:
            raise ConfigError(f"Unknown ablation base cell '{base}'")
        merged = dict(STANDARD_CELLS[base])
        merged.update(overrides)
        overrides = merged
    return name, overrides


def ablation_run(inputs: LiftInputs, config: PipelineConfig, cells: Sequence[Cell],
                 targets: Optional[EvalTargets] = None) -> List[Dict]:
    """One lift (+ evaluation) per cell over shared inputs; one row per cell"""
    rows = []
    for cell in cells:
        name, overrides = _resolve_cell(cell)
        cell_config = with_overrides(config, **overrides)
        logging.info(f"Ablation cell '{name}': {overrides}")
        lifted, summary = lift_views(inputs, cell_config)
        dispersion, _ = dispersion_pass(inputs, cell_config, lifted)
        row = {
            "cell": name,
            "gating_enabled": cell_config.gating_enabled,
            "use_mass_stage": cell_config.gate.use_mass_stage,
            "use_quantile_stage": cell_config.gate.use_quantile_stage,
            "aggregator": cell_config.aggregator,
            "records_kept": summary["records_kept"],
            "gaussians_with_weight": summary["gaussians_with_weight"],
            "dispersion": dispersion,
        }
        if targets is not None:
            scores = evaluate_field(lifted, targets)
            row.update({"miou": scores["miou"], "macc": scores["macc"], "purity": scores["purity"]})
        rows.append(row)
    return rows


def write_table_csv(rows: Sequence[Dict], path: str):
    """Flatten rows (purity entries become purity_<class>) into a CSV file"""
    flat_rows = []
    for row in rows:
        flat = {k: v for k, v in row.items() if k != "purity"}
        for cls, value in row.get("purity", {}).items():
            flat[f"purity_{cls}"] = value
        flat_rows.append(flat)
    columns: List[str] = []
    for flat in flat_rows:
        columns.extend(k for k in flat if k not in columns)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(flat_rows)


def corruption_sweep(inputs: LiftInputs, config: PipelineConfig, radii: Sequence[int] = (5, 10, 15, 20, 25, 30),
                     seed: Optional[int] = None, targets: Optional[EvalTargets] = None) -> List[Dict]:
    """Lift from maps whose feature regions were eroded or dilated, one row per radius"""
    seed = config.seed if seed is None else seed
    rows = []
    for radius in radii:
        corrupted = inputs.with_maps(TransformedMaps(
            inputs.maps, lambda i, fmap, r=radius: corrupt_feature_map(fmap, r, seed, i, config.eval.tau_min)
        ))
        lifted, summary = lift_views(corrupted, config)
        dispersion, _ = dispersion_pass(corrupted, config, lifted)
        row = {"radius": int(radius), "dispersion": dispersion,
               "gaussians_with_weight": summary["gaussians_with_weight"]}
        if targets is not None:
            scores = evaluate_field(lifted, targets)
            row.update({"miou": scores["miou"], "macc": scores["macc"], "purity": scores["purity"]})
        logging.info(f"Corruption radius {radius}: dispersion {dispersion:.4f}")
        rows.append(row)
    return rows
