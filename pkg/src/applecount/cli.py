"""``applecount`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation error.
Failures print one JSON error record on stderr.
"""
import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from ._validation import InvalidInputError
from .config import ConfigError, PipelineConfig, load_config

logger = logging.getLogger("applecount")

EXIT_RUNTIME, EXIT_VALIDATION = 1, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class ValidationFailure(Exception):
    def __init__(self, fields):
        super().__init__("invalid arguments")
        self.fields = fields


def _image_paths(items):
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        else:
            paths.append(p)
    return paths


def _require_files(**named):
    missing = {f"--{k.replace('_', '-')}": f"no such path: {v}" for k, v in named.items()
               if v is None or not Path(v).exists()}
    if missing:
        raise ValidationFailure(missing)


def _segmenter(cfg):
    from .colorseg import ColorModel, ColorSegmenter

    c = cfg.colorseg
    seg = ColorSegmenter(target_regions=c.target_regions, min_area=c.min_area, margin=c.margin, seed=cfg.seed,
                         superpixel_area=c.superpixel_area)
    seg.model_ = ColorModel.load(cfg.paths.color_model)
    return seg


# --- commands ---------------------------------------------------------------

def cmd_synth(cfg, args, out):
    if args.kind == "patches":
        from .synthbench.patches import write_patch_corpus

        ratios = tuple(float(v) for v in args.ratios.split(","))
        manifest = write_patch_corpus(out, args.per_class, cfg.seed, ratios)
        return {"patches": len(manifest.rows), "manifest": str(out / "manifest.csv")}
    from .synthbench.scene import SceneSpec, render_row_scene

    scene = render_row_scene(SceneSpec(n_trees=args.trees, seed=cfg.seed))
    scene.write(out)
    return {"total_apples": scene.ledger["total_apples"], "yield_total": scene.ledger["yield_total"]}


def cmd_fit_colors(cfg, args, out):
    from .colorseg import ColorSegmenter, swatch_montage
    from .patchset import read_png, write_png

    paths = _image_paths(args.images)
    if not paths:
        raise ValidationFailure({"--images": "no images found"})
    images = [read_png(p) for p in paths]
    masks = None
    if args.masks:
        masks = [read_png(Path(args.masks) / p.name)[..., 0] > 127 for p in paths]
    c = cfg.colorseg
    seg = ColorSegmenter(n_classes=args.classes, target_regions=c.target_regions, min_area=c.min_area,
                         margin=c.margin, seed=cfg.seed, superpixel_area=c.superpixel_area)
    seg.fit(images, masks)
    if args.apple_classes:
        seg.set_apple_classes([int(v) for v in args.apple_classes.split(",")])
    seg.model_.save(out / "color_model.json")
    write_png(out / "swatches.png", swatch_montage(seg.model_))
    return {"classes": seg.model_.n_classes, "apple_classes": [int(i) for i in seg.model_.apple_ids]}


def cmd_segment(cfg, args, out):
    import csv

    from .colorseg import extract_proposals
    from .patchset import read_png, write_png

    seg = _segmenter(cfg)
    rows = []
    for p in _image_paths(args.images):
        mask = seg.segment(read_png(p))
        write_png(out / f"{p.stem}_mask.png", mask.astype(np.uint8) * 255)
        for prop in extract_proposals(mask, seg.min_area, seg.margin, source_image=p.name):
            rows.append([prop.source_image, *prop.box, repr(float(prop.apple_pixel_fraction))])
    with open(out / "proposals.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_image", "x", "y", "w", "h", "apple_pixel_fraction"])
        w.writerows(rows)
    return {"proposals": len(rows)}


def cmd_build_dataset(cfg, args, out):
    from .patchset import AugmentationPolicy, DatasetManifest, ManifestRow, build_balanced_dataset
    from .patchset import read_manifest, write_manifest

    _require_files(manifest=args.manifest)
    root = Path(args.root or cfg.paths.data_root or Path(args.manifest).parent)
    manifest = read_manifest(args.manifest)
    balanced = build_balanced_dataset(manifest, out / "augmented", args.target_per_class, AugmentationPolicy(),
                                      seed=cfg.seed, root=root)
    rows = [ManifestRow(os.path.relpath(root / r.path, out), r.count, r.split, r.source_image, r.box)
            for r in balanced.rows]
    result = DatasetManifest(rows)
    write_manifest(result, out / "manifest.csv")
    return {"histogram": [int(v) for v in result.histogram("train")]}


def cmd_train(cfg, args, out):
    from .cnncount import CNNCounter, write_history
    from .patchset import load_split, read_manifest

    _require_files(manifest=args.manifest)
    weights = cfg.paths.feature_weights
    if weights is None:
        if not args.pretrain_steps:
            raise ValidationFailure({"paths.feature_weights": "required (or pass --pretrain-steps)"})
        from .pretrain import pretrain_feature_weights

        weights = str(out / "feature_weights.pt")
        pretrain_feature_weights(weights, steps=args.pretrain_steps, seed=cfg.seed)
    root = Path(args.root or cfg.paths.data_root or Path(args.manifest).parent)
    manifest = read_manifest(args.manifest)
    X, y = load_split(manifest, "train", root)
    Xv, yv = load_split(manifest, "val", root)
    est = CNNCounter(weights, phase1_epochs=args.phase1_epochs, phase2_epochs=args.phase2_epochs,
                     seed=cfg.seed)
    est.fit(X, y, Xv if len(Xv) else None, yv if len(yv) else None)
    est.save(out / "checkpoint.pt")
    write_history(est.history_, out / "history.csv")
    return {"train_seconds": est.train_seconds_, "best_val_acc": max(h["val_acc"] for h in est.history_)}


def cmd_count(cfg, args, out):
    from .cnncount import count_image, load_checkpoint
    from .patchset import read_png

    seg = _segmenter(cfg)
    net, _ = load_checkpoint(cfg.paths.checkpoint)
    report = {"images": {}, "total": 0}
    for p in _image_paths(args.images):
        res = count_image(read_png(p), seg, net, source_image=p.name)
        report["images"][p.name] = {
            "count": res.count,
            "patches": [{"box": list(prop.box), "count": pred.argmax_count, "probs": list(pred.probs)}
                        for prop, pred in zip(res.proposals, res.predictions)],
        }
        report["total"] += res.count
    (out / "counts.json").write_text(json.dumps(report, indent=1) + "\n")
    return {"total": report["total"]}


def evaluation_inputs(manifest, root, split, mask_root=None, segmenter=None):
    """Patches, labels and (for the GMM row) apple masks of one manifest split."""
    from .patchset import load_split, read_png

    X, y = load_split(manifest, split, root)
    masks = None
    if mask_root is not None:
        masks = [read_png(Path(mask_root) / Path(r.path).name)[..., 0] > 127 for r in manifest.split(split)]
    elif segmenter is not None:
        masks = [segmenter.segment(x) for x in X]
    return X, y, masks


def evaluation_methods(network=None, gmm=None):
    """Method callables for :func:`evalkit.method_comparison_table`."""
    from .cnncount import predict_proba

    methods = {}
    if network is not None:
        methods["CNN"] = lambda inputs: predict_proba(network, inputs[0]).argmax(axis=1)
    if gmm is not None:
        methods["GMM"] = lambda inputs: gmm.predict(inputs[1])
    return methods


def cmd_evaluate(cfg, args, out):
    from .cnncount import load_checkpoint
    from .evalkit import evaluate_accuracy, method_comparison_table, plot_profile, report_to_csv, table_to_csv
    from .gmmcount import GMMCounter
    from .patchset import read_manifest

    _require_files(manifest=args.manifest)
    root = Path(args.root or cfg.paths.data_root or Path(args.manifest).parent)
    wanted = [m.strip().lower() for m in args.methods.split(",")]
    if "cnn" in wanted and cfg.paths.checkpoint is None:
        raise ValidationFailure({"paths.checkpoint": "required for the cnn method"})
    seg = _segmenter(cfg) if ("gmm" in wanted and args.mask_root is None and cfg.paths.color_model) else None
    if "gmm" in wanted and args.mask_root is None and seg is None:
        raise ValidationFailure({"--mask-root": "gmm needs masks or paths.color_model"})
    X, y, masks = evaluation_inputs(read_manifest(args.manifest), root, args.split, args.mask_root, seg)
    net = load_checkpoint(cfg.paths.checkpoint)[0] if "cnn" in wanted else None
    gmm = GMMCounter(seed=cfg.seed).fit() if "gmm" in wanted else None
    methods = evaluation_methods(net, gmm)
    table = method_comparison_table({args.split: ((X, masks), y)}, methods)
    (out / "comparison.csv").write_text(table_to_csv(table))
    for name, fn in methods.items():
        report = evaluate_accuracy(fn((X, masks)), y)
        (out / f"report_{name.lower()}.csv").write_text(report_to_csv(report))
        plot_profile(report, out / f"profile_{name.lower()}.png", title=f"{name}: counting by cluster size")
    return {name: row[args.split] for name, row in table.items()}


def load_scene_inputs(scene_dir):
    """Frames, lazily read images, detections and cloud from a scene directory."""
    from .formats import read_detections, read_ply, read_poses
    from .patchset import read_png

    d = Path(scene_dir)
    cloud, _ = read_ply(d / "cloud.ply")
    sides = {}
    for side in ("front", "back"):
        frames = read_poses(d / f"poses_{side}.json")
        images = {f.frame_id: (lambda p=d / side / f"{f.frame_id}.png": read_png(p)) for f in frames}
        det_path = d / f"detections_{side}.csv"
        sides[side] = {"frames": frames, "images": images,
                       "detections": read_detections(det_path) if det_path.exists() else None}
    return sides, cloud


def yield_config(cfg):
    from .yieldmerge import YieldConfig

    y = cfg.yield_
    return YieldConfig(linking_radius=y.linking_radius, corridor_radius=y.corridor_radius,
                       ground_height=y.ground_height, iou_threshold=y.iou_threshold)


def cmd_yield(cfg, args, out):
    from .cnncount import load_checkpoint
    from .yieldmerge import estimate_yield, format_yield_report, yield_report

    needed = [args.scene and Path(args.scene) / n for n in
              ("cloud.ply", "poses_front.json", "poses_back.json")]
    missing = {"--scene": f"missing {p}" for p in needed if not p or not p.exists()}
    if missing:
        raise ValidationFailure(missing)
    sides, cloud = load_scene_inputs(args.scene)
    net, _ = load_checkpoint(cfg.paths.checkpoint)
    seg = _segmenter(cfg) if cfg.paths.color_model else None
    est = estimate_yield(sides["front"], sides["back"], cloud, network=net, config=yield_config(cfg),
                         color_model=seg)
    (out / "yield.json").write_text(json.dumps(yield_report(est), indent=1) + "\n")
    (out / "yield_report.txt").write_text(format_yield_report(est) + "\n")
    return {"merged_total": est.merged_total}


COMMANDS = {
    "synth": (cmd_synth, ()),
    "fit-colors": (cmd_fit_colors, ()),
    "segment": (cmd_segment, ("color_model",)),
    "build-dataset": (cmd_build_dataset, ()),
    "train": (cmd_train, ()),
    "count": (cmd_count, ("color_model", "checkpoint")),
    "evaluate": (cmd_evaluate, ()),
    "yield": (cmd_yield, ("checkpoint",)),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="applecount", description="Apple cluster counting pipeline.")
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--color-model", help="overrides paths.color_model")
    parser.add_argument("--checkpoint", help="overrides paths.checkpoint")
    parser.add_argument("--feature-weights", help="overrides paths.feature_weights")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="render a synthetic patch corpus or row scene")
    p.add_argument("--kind", choices=["patches", "scene"], default="patches")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--trees", type=int, default=10)

    p = sub.add_parser("fit-colors", help="fit the superpixel color model")
    p.add_argument("images", nargs="+")
    p.add_argument("--masks", help="directory of apple masks named like the images")
    p.add_argument("--classes", type=int, default=25)
    p.add_argument("--apple-classes", help="comma-separated class ids to flag as apple")

    p = sub.add_parser("segment", help="apple masks and cluster proposals")
    p.add_argument("images", nargs="+")

    p = sub.add_parser("build-dataset", help="balance the training split by augmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--target-per-class", type=int, required=True)

    p = sub.add_parser("train", help="train the count classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--phase1-epochs", type=int, default=5)
    p.add_argument("--phase2-epochs", type=int, default=30)
    p.add_argument("--pretrain-steps", type=int, default=0)

    p = sub.add_parser("count", help="per-image apple counts")
    p.add_argument("images", nargs="+")

    p = sub.add_parser("evaluate", help="accuracy table, reports and profiles")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--split", default="test")
    p.add_argument("--methods", default="cnn,gmm")
    p.add_argument("--mask-root")

    p = sub.add_parser("yield", help="row yield from a two-side scene directory")
    p.add_argument("--scene", required=True)
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for name in ("color_model", "checkpoint", "feature_weights"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg.paths, name, value)
    return cfg


def _fail(code, kind, message, fields=None):
    record = {"status": "error", "kind": kind, "message": message}
    if fields:
        record["fields"] = fields
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func, required = COMMANDS[args.command]
    out = Path(args.out)
    try:
        cfg = resolve_config(args).validate(required)
    except ConfigError as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc), exc.errors)
    created = not out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = func(cfg, args, out)
    except (ValidationFailure, ConfigError, InvalidInputError) as exc:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        fields = getattr(exc, "fields", None) or getattr(exc, "errors", None)
        return _fail(EXIT_VALIDATION, "validation", str(exc), fields)
    except Exception as exc:  # noqa: BLE001 - report every failure as a record
        logger.debug("command failed", exc_info=True)
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out), **(summary or {})}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
