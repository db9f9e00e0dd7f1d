"""
Command-line entry point.

Subcommands: lift, label, query, eval, corrupt, synth, disp, ablate.
Metric outputs are JSON on stdout (or --out). Exit codes: 0 ok, 2 config
error, 3 data-format error, 4 validation error.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from visilift.config import PipelineConfig, configure_logging, load_config
from visilift.errors import ConfigError, VisiliftError
from visilift.eval_harness import (
    corrupt_mask,
    corruption_sign,
    load_mask,
    render_selection,
    save_mask,
    segmentation_scores,
    select_2d,
    select_3d,
)
from visilift.pipeline import (
    EvalTargets,
    LiftInputs,
    STANDARD_CELLS,
    ablation_run,
    corruption_sweep,
    dispersion_pass,
    evaluate_field,
    lift,
    write_json,
    write_table_csv,
)
from visilift.pseudo_label import assign_labels, class_histogram, save_labels
from visilift.scene_io import load_cameras, load_field, load_point_cloud, load_queries, load_scene
from visilift.synth_bench import load_spec, make_feature_stream, make_occlusion_scene, save_stream


def _emit(data: Any, out: Optional[str]):
    if out:
        write_json(data, out)
        logging.info(f"Wrote {out}")
    else:
        sys.stdout.write(json.dumps(data, indent=2) + "\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


# =============================================================================
# Config plumbing
# =============================================================================

def _add_lift_options(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("lift inputs")
    group.add_argument("--config", help="JSON config file")
    group.add_argument("--scene", help="Gaussian scene (VGSC)")
    group.add_argument("--cameras", help="cameras JSON")
    group.add_argument("--maps", help="feature map directory or comma-separated VFMP files")
    group.add_argument("--aggregator", choices=["cosine-median", "weighted-mean", "l1-median"])
    group.add_argument("--no-gating", action="store_true", help="keep every visible Gaussian")
    group.add_argument("--tau-view", type=float)
    group.add_argument("--tau-abs", type=float)
    group.add_argument("--q", "--gate-q", dest="q", type=float, help="gate quantile parameter")
    group.add_argument("--weiszfeld-iters", type=int, help="l1-median iteration cap")
    group.add_argument("--weiszfeld-eps", type=float, help="l1-median convergence tolerance")
    group.add_argument("--workers", type=int)
    group.add_argument("--epochs", type=int)
    group.add_argument("--seed", type=int)


def _config_from_args(args: argparse.Namespace, **extra: Any) -> PipelineConfig:
    overrides: Dict[str, Any] = {
        "scene": getattr(args, "scene", None),
        "cameras": getattr(args, "cameras", None),
        "feature_maps": getattr(args, "maps", None),
        "aggregator": getattr(args, "aggregator", None),
        "tau_view": getattr(args, "tau_view", None),
        "tau_abs": getattr(args, "tau_abs", None),
        "gate_q": getattr(args, "q", None),
        "weiszfeld_iters": getattr(args, "weiszfeld_iters", None),
        "weiszfeld_eps": getattr(args, "weiszfeld_eps", None),
        "workers": getattr(args, "workers", None),
        "epochs": getattr(args, "epochs", None),
        "seed": getattr(args, "seed", None),
        "log_level": getattr(args, "log_level", None),
    }
    if getattr(args, "no_gating", False):
        overrides["gating_enabled"] = False
    overrides.update(extra)
    return load_config(getattr(args, "config", None), overrides)


def _targets(args: argparse.Namespace) -> Optional[EvalTargets]:
    if args.queries and args.labels:
        return EvalTargets.from_files(args.queries, args.labels)
    if args.queries or args.labels:
        raise ConfigError("Evaluation needs both --queries and --labels")
    return None


# =============================================================================
# Subcommands
# =============================================================================

def cmd_lift(args: argparse.Namespace) -> int:
    config = _config_from_args(args, output=args.out, summary=args.summary)
    if not config.output:
        raise ConfigError("Missing required output: pass --out or set 'output' in the config")
    lift(config)
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    config = _config_from_args(args, tau_radius=args.tau_radius, k_fallback=args.k_fallback,
                               chunk_size=args.chunk_size)
    scene = load_scene(args.scene)
    cloud = load_point_cloud(args.points)
    labels = assign_labels(scene, cloud, config.label, workers=config.workers)
    save_labels(labels, args.out)
    _emit({
        "gaussians": labels.count,
        "labeled": int(np.count_nonzero(labels.labeled)),
        "classes": {str(c): n for c, n in class_histogram(labels)},
    }, args.summary)
    return 0


def _query_masks(mode: str, scene, cameras, field, queries, name: str, threshold: float,
                 config: PipelineConfig) -> List:
    """Per-view masks for one query: the 3D selection rendered, or the 2D relevancy thresholded"""
    if mode == "2d":
        return [select_2d(scene, cam, field, queries.vector(name), threshold, queries.negatives) for cam in cameras]
    selected = select_3d(field, queries.vector(name), threshold, queries.negatives)
    return [render_selection(scene, cam, selected, config.eval.render_threshold) for cam in cameras]


def _query_threshold(args: argparse.Namespace, config: PipelineConfig) -> float:
    if args.threshold is not None:
        return args.threshold
    return config.eval.relevancy_threshold_2d if args.mode == "2d" else config.eval.select_threshold


def cmd_query(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    field = load_field(args.field)
    queries = load_queries(args.queries)
    threshold = _query_threshold(args, config)
    names = [args.name] if args.name else list(queries.names)
    if args.mode == "2d" and not (args.scene and args.cameras):
        raise ConfigError("2D relevancy needs --scene and --cameras")

    render = args.mask_dir or args.mode == "2d"
    scene = load_scene(args.scene) if render else None
    cameras = load_cameras(args.cameras) if render else []
    if args.mask_dir:
        os.makedirs(args.mask_dir, exist_ok=True)

    result = {}
    for name in names:
        if args.mode == "2d":
            masks = _query_masks(args.mode, scene, cameras, field, queries, name, threshold, config)
            result[name] = {"pixels": [m.area for m in masks]}
        else:
            selected = select_3d(field, queries.vector(name), threshold, queries.negatives)
            masks = [render_selection(scene, cam, selected, config.eval.render_threshold) for cam in cameras]
            result[name] = {"selected": int(len(selected)), "indices": selected.tolist()}
        if args.mask_dir:
            for v, mask in enumerate(masks):
                save_mask(mask, os.path.join(args.mask_dir, f"{name}_view_{v:04d}.vmsk"))
    _emit({"mode": args.mode, "threshold": threshold, "queries": result}, args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    field = load_field(args.field)
    if args.gt_masks:
        queries = load_queries(args.queries)
        if not args.name:
            raise ConfigError("Mask evaluation needs --name of the query to select")
        scene = load_scene(args.scene)
        cameras = load_cameras(args.cameras)
        gt = [load_mask(p) for p in args.gt_masks.split(",")]
        if len(gt) != len(cameras):
            raise ConfigError(f"Got {len(gt)} ground-truth masks for {len(cameras)} cameras")
        pred = _query_masks(args.mode, scene, cameras, field, queries, args.name, _query_threshold(args, config), config)
        scores = segmentation_scores(pred, gt, 1)
    else:
        targets = _targets(args)
        if targets is None:
            raise ConfigError("Evaluation needs --queries with --labels, or --gt-masks")
        scores = evaluate_field(field, targets)
    _emit(scores, args.out)
    if args.csv:
        write_table_csv([{"miou": scores["miou"], "macc": scores["macc"], "purity": scores.get("purity", {})}],
                        args.csv)
    return 0


def cmd_corrupt(args: argparse.Namespace) -> int:
    config = _config_from_args(args, tau_min=args.tau_min, corrupt_radius=args.radius)
    paths = args.masks.split(",")
    os.makedirs(args.out_dir, exist_ok=True)
    details = []
    for i, path in enumerate(paths):
        mask = load_mask(path)
        corrupted = corrupt_mask(mask, config.eval.corrupt_radius, config.seed, i, config.eval.tau_min)
        target = os.path.join(args.out_dir, os.path.basename(path))
        save_mask(corrupted, target)
        details.append({
            "mask": path, "output": target, "sign": corruption_sign(config.seed, i),
            "area_before": mask.area, "area_after": corrupted.area, "bbox": corrupted.bounding_box(),
        })
    _emit({"radius": config.eval.corrupt_radius, "seed": config.seed, "masks": details}, args.out)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec, args.kind)
    if args.kind == "occlusion":
        if not args.out_dir:
            raise ConfigError("synth occlusion needs --out-dir")
        paths = make_occlusion_scene(spec).save(args.out_dir)
        _emit(paths, None)
    else:
        if not args.out:
            raise ConfigError("synth stream needs --out")
        observations, _ = make_feature_stream(spec)
        save_stream(observations, args.out, spec.dim)
        _emit({"observations": len(observations), "dim": spec.dim}, None)
    return 0


def cmd_disp(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    inputs = LiftInputs.from_config(config)
    if args.radii:
        rows = corruption_sweep(inputs, config, args.radii, config.seed, _targets(args))
        _emit({"sweep": rows}, args.out)
        return 0
    if not args.field:
        raise ConfigError("disp needs --field, or --radii for a corruption sweep")
    value, _ = dispersion_pass(inputs, config, load_field(args.field))
    _emit({"dispersion": value}, args.out)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if args.grid:
        try:
            with open(args.grid, "r", encoding="utf-8") as f:
                cells = json.load(f)
        except (FileNotFoundError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read ablation grid {args.grid}: {e}") from e
    else:
        cells = [c.strip() for c in args.cells.split(",") if c.strip()]
    rows = ablation_run(LiftInputs.from_config(config), config, cells, _targets(args))
    _emit({"rows": rows}, args.out)
    if args.csv:
        write_table_csv(rows, args.csv)
    return 0


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visilift", description="Visibility-aware feature lifting onto 3D Gaussians")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lift", help="lift per-view feature maps onto the Gaussians")
    _add_lift_options(p)
    p.add_argument("--out", help="output feature field (VGFT)")
    p.add_argument("--summary", help="optional run summary JSON")
    p.set_defaults(handler=cmd_lift)

    p = sub.add_parser("label", help="pseudo-label Gaussians from an annotated point cloud")
    p.add_argument("--config")
    p.add_argument("--scene", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--tau-radius", type=float)
    p.add_argument("--k-fallback", type=int)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="output labels (VGLB)")
    p.add_argument("--summary", help="write the label histogram here instead of stdout")
    p.set_defaults(handler=cmd_label)

    p = sub.add_parser("query", help="select Gaussians relevant to text-query embeddings")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["3d", "2d"], default="3d",
                   help="3d: select Gaussians and render them; 2d: threshold the rendered relevancy image")
    p.add_argument("--field", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--name", help="single query name (default: all)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--scene", help="needed with --mask-dir")
    p.add_argument("--cameras", help="needed with --mask-dir")
    p.add_argument("--mask-dir", help="render per-view selection masks (VMSK) here")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_query)

    p = sub.add_parser("eval", help="segmentation metrics of a lifted field")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["3d", "2d"], default="3d", help="how predicted masks are made for --gt-masks")
    p.add_argument("--field", required=True)
    p.add_argument("--queries", help="class (or query) embeddings")
    p.add_argument("--labels", help="ground-truth Gaussian labels (VGLB)")
    p.add_argument("--gt-masks", help="comma-separated per-camera VMSK masks")
    p.add_argument("--name", help="query name for mask evaluation")
    p.add_argument("--scene")
    p.add_argument("--cameras")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("corrupt", help="erode or dilate masks with a disk")
    p.add_argument("--config")
    p.add_argument("--masks", required=True, help="comma-separated VMSK files")
    p.add_argument("--radius", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau-min", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_corrupt)

    p = sub.add_parser("synth", help="generate synthetic scenes or feature streams")
    p.add_argument("kind", choices=["occlusion", "stream"])
    p.add_argument("--spec", help="JSON spec (defaults when omitted)")
    p.add_argument("--out-dir")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("disp", help="multi-view dispersion of a field, or a corruption sweep")
    _add_lift_options(p)
    p.add_argument("--field")
    p.add_argument("--radii", type=_int_list, help="comma-separated corruption radii")
    p.add_argument("--queries")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_disp)

    p = sub.add_parser("ablate", help="lift and evaluate a grid of configurations")
    _add_lift_options(p)
    p.add_argument("--cells", default=",".join(STANDARD_CELLS), help="comma-separated cell names")
    p.add_argument("--grid", help="JSON list of cells (names or override objects)")
    p.add_argument("--queries")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level or os.environ.get("VISILIFT_LOG_LEVEL", "INFO"))
        return args.handler(args)
    except VisiliftError as e:
        logging.error(f"{args.command} failed: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
