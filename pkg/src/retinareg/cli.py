"""Command-line surface: extract, register, evaluate, synth, train-toy.

Exit codes: 0 success, 2 I/O error, 3 config/schema error, 4 processing
error, 5 too few matches, 6 RANSAC failure.  All commands are deterministic
for a fixed --seed; RETINAREG_THREADS caps evaluate's worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import losses, metrics
from .config import PipelineConfig, load_pipeline_config
from .errors import (
    BoundsError,
    ConfigError,
    MissingAnnotationError,
    RetinaRegError,
    SchemaError,
)
from .features import (
    Modality,
    ReferenceExtractorConfig,
    load_feature_map,
    preprocess_image,
    reference_extract,
    save_feature_map,
)
from .geometry import Homography, ground_truth_homography
from .imageio import load_image, save_image
from .matching import RegistrationStatus, register_pair

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_PROCESSING = 4
EXIT_TOO_FEW_MATCHES = 5
EXIT_RANSAC_FAILED = 6

_STATUS_EXIT = {
    RegistrationStatus.OK: EXIT_OK,
    RegistrationStatus.TOO_FEW_MATCHES: EXIT_TOO_FEW_MATCHES,
    RegistrationStatus.RANSAC_FAILED: EXIT_RANSAC_FAILED,
}


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_config(args) -> PipelineConfig:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "n_max", None) is not None:
        cfg.n_max = args.n_max
    if getattr(args, "backend", None) is not None:
        cfg.backend = args.backend
    return PipelineConfig(**{f.name: getattr(cfg, f.name)
                             for f in dataclasses.fields(PipelineConfig)})


def _extract_one(path: Path, modality: Modality, cfg: PipelineConfig):
    if _is_feature_file(path):
        return load_feature_map(path)
    img = preprocess_image(load_image(path), modality)
    return reference_extract(img, ReferenceExtractorConfig())


def _is_feature_file(path: Path) -> bool:
    if str(path).endswith(".dfmp"):
        return True
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == b"DFMP"
    except OSError:
        return False


# ---------------------------------------------------------------------------
# subcommands

def cmd_extract(args) -> int:
    cfg = _load_config(args)
    src = Path(args.image)
    if cfg.backend == "file" or _is_feature_file(src):
        fm = load_feature_map(src)
    else:
        modality = Modality(args.modality)
        fm = reference_extract(preprocess_image(load_image(src), modality))
    save_feature_map(fm, args.out)
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _load_config(args)
    path_a, path_b = Path(args.image_a), Path(args.image_b)
    fm_a = _extract_one(path_a, Modality(args.modality_a), cfg)
    fm_b = _extract_one(path_b, Modality(args.modality_b), cfg)
    result = register_pair(fm_a, fm_b, cfg)

    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "status": result.status.value,
        "num_keypoints_a": result.keypoints_a,
        "num_keypoints_b": result.keypoints_b,
        "num_matches": len(result.matches),
        "num_inliers": result.num_inliers,
        "mir": metrics.matching_inlier_ratio(result.num_inliers, len(result.matches)),
        "matches": [[int(i), int(j)] for i, j in
                    zip(result.matches.idx_a, result.matches.idx_b)],
        "seed": result.seed,
        "config": cfg.to_dict(),
    }
    Path(str(prefix) + ".json").write_text(_dumps(payload))
    if result.status is RegistrationStatus.OK:
        result.homography.save(str(prefix) + ".h.txt")
    if args.overlay:
        if _is_feature_file(path_a) or _is_feature_file(path_b):
            raise ConfigError("--overlay needs image inputs, not feature files")
        if result.status is RegistrationStatus.OK:
            _write_overlay(path_a, path_b, result.homography, str(prefix) + ".overlay.png")
    return _STATUS_EXIT[result.status]


def _write_overlay(path_a, path_b, h: Homography, out_path, tile: int = 32) -> None:
    img_a = load_image(path_a)
    img_b = load_image(path_b)
    if img_a.ndim == 3:
        img_a = img_a.mean(axis=2)
    if img_b.ndim == 3:
        img_b = img_b.mean(axis=2)
    warped_b = ds.warp_image_lookup(img_b, h.m, img_a.shape[:2], fill=0.0)
    yy, xx = np.mgrid[0:img_a.shape[0], 0:img_a.shape[1]]
    board = ((yy // tile) + (xx // tile)) % 2 == 0
    save_image(np.where(board, img_a, warped_b), out_path)


def _load_manifest(path: Path) -> list:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or set(data) != {"pairs"}:
        raise SchemaError("manifest must be an object with the single key 'pairs'")
    pairs = data["pairs"]
    if not isinstance(pairs, list) or not pairs:
        raise SchemaError("manifest lists no pairs")
    for entry in pairs:
        if set(entry) != {"id", "annotation_a", "annotation_b"}:
            raise SchemaError(f"manifest pair needs id, annotation_a, annotation_b: {entry}")
    return pairs


def _evaluate_pair(manifest_dir: Path, entry: dict, cfg: PipelineConfig):
    ann_a = ds.load_annotations(manifest_dir / entry["annotation_a"])
    ann_b = ds.load_annotations(manifest_dir / entry["annotation_b"])
    for ann in (ann_a, ann_b):
        if ann.control_points.shape[0] != 6:
            raise MissingAnnotationError(f"{ann.ann_id} lacks 6 control points")

    raw_a = load_image((manifest_dir / entry["annotation_a"]).parent / ann_a.image)
    raw_b = load_image((manifest_dir / entry["annotation_b"]).parent / ann_b.image)
    fm_a = reference_extract(preprocess_image(raw_a, ann_a.modality))
    fm_b = reference_extract(preprocess_image(raw_b, ann_b.modality))
    result = register_pair(fm_a, fm_b, cfg)

    h_gt = ground_truth_homography(ann_a.control_points, ann_b.control_points)
    errors = metrics.euclidean_errors(result.homography, ann_a.control_points,
                                      ann_b.control_points)
    rep = metrics.repeatability(result.kps_a.xy, result.kps_b.xy, h_gt,
                                cfg.thresholds.rep,
                                (fm_a.source_w, fm_a.source_h),
                                (fm_b.source_w, fm_b.source_h))
    mir = metrics.matching_inlier_ratio(result.num_inliers, len(result.matches))
    record = metrics.PairRecord(
        pair_id=entry["id"],
        modality_pair=f"{ann_a.modality.value}-{ann_b.modality.value}",
        mean_error=float(np.mean(errors)),
        max_error=float(np.max(errors)),
        rep=rep,
        mir=mir,
        status=result.status.value,
    )
    return record, errors


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    manifest_path = Path(args.manifest)
    pairs = _load_manifest(manifest_path)
    manifest_dir = manifest_path.parent

    workers = int(os.environ.get("RETINAREG_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda e: _evaluate_pair(manifest_dir, e, cfg), pairs))
    else:
        results = [_evaluate_pair(manifest_dir, entry, cfg) for entry in pairs]

    records = [r for r, _ in results]
    errors = [e for _, e in results]
    thresholds = {"sr_me": cfg.thresholds.sr_me, "sr_mae": cfg.thresholds.sr_mae,
                  "rep": cfg.thresholds.rep, "mir": cfg.ransac.reproj_threshold}
    report = metrics.evaluate_records(records, errors, thresholds)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["config"] = cfg.to_dict()
    (out_dir / "report.json").write_text(_dumps(payload))
    (out_dir / "report.txt").write_text(report.to_table())
    sys.stdout.write(report.to_table())
    return EXIT_OK


_SYNTH_KEYS = {"size", "n_trees", "max_depth", "branch_prob", "width_range",
               "min_width", "contrast", "side_a", "side_b", "homography", "seed"}


def _synth_config_from_json(path) -> ds.SynthConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"synth config is not valid JSON: {exc}") from exc
    unknown = set(data) - _SYNTH_KEYS
    if unknown:
        raise ConfigError(f"unknown synth config key(s) {sorted(unknown)}")
    kwargs = dict(data)
    for side in ("side_a", "side_b"):
        if side in kwargs:
            kwargs[side] = ds.ModalityTransform(**kwargs[side])
    if "homography" in kwargs:
        kwargs["homography"] = ds.HomographyMagnitude(
            **{k: tuple(v) if k == "scale_range" else v
               for k, v in kwargs["homography"].items()})
    if "width_range" in kwargs:
        kwargs["width_range"] = tuple(kwargs["width_range"])
    try:
        return ds.SynthConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth(args) -> int:
    base = _synth_config_from_json(args.config) if args.config else ds.SynthConfig()
    if args.seed is not None:
        base = dataclasses.replace(base, seed=args.seed)
    if args.size is not None:
        base = dataclasses.replace(base, size=args.size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = {"pairs": []}
    for i in range(args.count):
        pair_cfg = dataclasses.replace(base, seed=base.seed + i)
        pair = ds.synth_generate(pair_cfg)
        stem = f"pair_{i:03d}"
        save_image(pair.img_a, out_dir / f"{stem}_a.png")
        save_image(pair.img_b, out_dir / f"{stem}_b.png")
        pair.h_gt.save(out_dir / f"{stem}.h.txt")

        n = pair.keypoints_a.shape[0]
        index_map = np.stack([np.arange(n), np.arange(n)], axis=1)
        ann_a = ds.AnnotationSet(
            ann_id=f"{stem}_a", image=f"{stem}_a.png", modality=pair.modality_a,
            acquisition="t0", keypoints=pair.keypoints_a,
            keypoint_classes=["vessel"] * n, control_points=pair.control_a,
            links=[ds.Link(other=f"{stem}_b", index_map=index_map)])
        ann_b = ds.AnnotationSet(
            ann_id=f"{stem}_b", image=f"{stem}_b.png", modality=pair.modality_b,
            acquisition="t1", keypoints=pair.keypoints_b,
            keypoint_classes=["vessel"] * n, control_points=pair.control_b,
            links=[ds.Link(other=f"{stem}_a", index_map=index_map[:, ::-1])])
        ds.save_annotation(ann_a, out_dir / f"{stem}_a.json")
        ds.save_annotation(ann_b, out_dir / f"{stem}_b.json")
        manifest["pairs"].append({"id": stem,
                                  "annotation_a": f"{stem}_a.json",
                                  "annotation_b": f"{stem}_b.json"})
    (out_dir / "manifest.json").write_text(_dumps(manifest))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    data_dir = Path(args.dataset)
    pairs = _load_manifest(data_dir / "manifest.json")
    annotations = []
    images = {}
    for entry in pairs:
        for key in ("annotation_a", "annotation_b"):
            ann = ds.load_annotations(data_dir / entry[key])
            if ann.ann_id in images:
                continue
            annotations.append(ann)
            raw = load_image(data_dir / ann.image)
            images[ann.ann_id] = preprocess_image(raw, ann.modality)

    det, pair_pool = ds.build_training_pools(annotations, images, seed=args.seed or 0)
    if det.patches.shape[0] == 0 or pair_pool.anchors.shape[0] == 0:
        raise ConfigError("training pools are empty")
    toy = ds.split_pools(det, pair_pool, seed=args.seed or 0)

    cfg = losses.ToyTrainConfig(
        learning_rate=args.lr, epochs=args.epochs,
        batch_detector=args.batch_detector, batch_descriptor=args.batch_descriptor,
        seed=args.seed or 0)
    result = losses.toy_train(toy, cfg)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    losses.save_params(result.params, str(prefix) + ".params")
    losses.write_loss_curve(str(prefix) + ".loss.csv", result.curve)
    sys.stdout.write(f"best epoch {result.best_epoch} of {len(result.curve)}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retinareg",
                                     description="Multi-modal retinal image registration pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    modalities = [m.value for m in Modality]

    p = sub.add_parser("extract", help="extract a dense feature map to a .dfmp file")
    p.add_argument("image")
    p.add_argument("--modality", default="CF", choices=modalities)
    p.add_argument("--backend", choices=["reference", "file"])
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("register", help="register two images or feature maps")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--modality-a", default="CF", choices=modalities)
    p.add_argument("--modality-b", default="CF", choices=modalities)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--backend", choices=["reference", "file"])
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="run registration + metrics over a manifest")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--config")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-toy", help="train the toy embedder on a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, default=losses.ToyTrainConfig.learning_rate)
    p.add_argument("--epochs", type=int, default=losses.ToyTrainConfig.epochs)
    p.add_argument("--batch-detector", type=int, default=losses.ToyTrainConfig.batch_detector)
    p.add_argument("--batch-descriptor", type=int, default=losses.ToyTrainConfig.batch_descriptor)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"retinareg: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SchemaError, BoundsError, MissingAnnotationError, ValueError) as exc:
        print(f"retinareg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RetinaRegError as exc:
        print(f"retinareg: processing error: {exc}", file=sys.stderr)
        return EXIT_PROCESSING


if __name__ == "__main__":
    sys.exit(main())
