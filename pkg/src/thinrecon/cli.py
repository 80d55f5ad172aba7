"""Command-line pipeline: prep, poses, reconstruct, evaluate, colmap-script.

Exit codes: 0 success, 2 bad arguments or values, 3 file/parse failures,
4 numerical failure during optimization (the last field state is dumped).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .colmap import load_scene, normalize_scene, parse_model, save_scene
from .dataprep import (binarize_mask, downscale, list_frames, load_image,
                       load_mask, load_views, make_mask_threshold,
                       sample_indices, save_png)
from .errors import ModelParseError, NumericalError, ViewDataError
from .meshkit import (chamfer_distance, export_obj, hard_coverage, iou,
                      parse_obj, quality_report)
from .optimize import TrainConfig, train

def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# TrainConfig fields that may appear in a --config file / as reconstruct flags
_TRAIN_KEYS = {
    "grid_res": int, "train_res": int, "iters": int, "lr": float,
    "beta1": float, "beta2": float, "eps": float, "lambda_lap": float,
    "lambda_sdf": float, "batch_views": int, "gamma": float,
    "offsets_enabled": _parse_bool, "seed": int,
}


def _read_config(path) -> dict:
    """key=value lines (# comments allowed) -> typed TrainConfig overrides."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}, line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _TRAIN_KEYS:
            raise ValueError(f"{path}, line {lineno}: unknown key {key!r}")
        out[key] = _TRAIN_KEYS[key](value.strip())
    return out


def _apply_threads(requested: int | None) -> int:
    import numba

    available = numba.config.NUMBA_NUM_THREADS
    if requested is None:
        return available
    if requested < 1:
        raise ValueError("--threads must be positive")
    use = min(requested, available)
    if use < requested:
        print(f"note: only {available} numba threads available, using {use}",
              file=sys.stderr)
    numba.set_num_threads(use)
    return use


# ---------------------------------------------------------------------------
# subcommands

def cmd_prep(args) -> int:
    frames = list_frames(args.frames)
    if not frames:
        raise ViewDataError(f"no image files in {args.frames}")
    count = min(args.count, len(frames)) if args.allow_fewer else args.count
    picked = [frames[i] for i in sample_indices(len(frames), count)]

    out_frames = Path(args.out) / "frames"
    out_masks = Path(args.out) / "masks"
    out_frames.mkdir(parents=True, exist_ok=True)
    out_masks.mkdir(parents=True, exist_ok=True)

    mask_dir = Path(args.masks) if args.masks else None
    names = []
    for src in picked:
        image = downscale(load_image(src), args.size, args.size)
        name = src.stem + ".png"
        save_png(out_frames / name, image)
        if mask_dir is not None:
            cand = sorted(mask_dir.glob(src.stem + ".*"))
            if not cand:
                raise ViewDataError(f"no mask for {src.name} in {mask_dir}")
            mask = binarize_mask(downscale(load_mask(cand[0]),
                                           args.size, args.size))
        else:
            mask = make_mask_threshold(image, args.luma_threshold)
        save_png(out_masks / name, mask)
        names.append(name)

    manifest = {
        "frames_dir": str(out_frames), "masks_dir": str(out_masks),
        "count": len(names), "size": args.size,
        "masks": "provided" if mask_dir else "luma-threshold",
        "names": names,
    }
    print(json.dumps(manifest, indent=2))
    return 0


def cmd_poses(args) -> int:
    model = parse_model(args.model, format=args.format)
    model = normalize_scene(model, target_radius=args.target_radius)
    save_scene(model, args.out)
    print(json.dumps({
        "out": str(args.out),
        "cameras": len(model.cameras),
        "images": len(model.images),
        "points": 0 if model.points is None else len(model.points),
        "scale": model.norm.scale,
        "center": model.norm.center.tolist(),
    }, indent=2))
    return 0


def cmd_reconstruct(args) -> int:
    overrides = _read_config(args.config) if args.config else {}
    cfg_kwargs = {}
    for key in _TRAIN_KEYS:
        cli_val = getattr(args, key)
        if cli_val is not None:
            cfg_kwargs[key] = cli_val
        elif key in overrides:
            cfg_kwargs[key] = overrides[key]
    config = TrainConfig(**cfg_kwargs).validate()
    _apply_threads(args.threads)

    scene = load_scene(args.scene)
    views = load_views(args.frames, args.masks, scene, config.train_res)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    snap_dir = out_dir / "snapshots"

    def callback(it, mesh, field, record):
        if (it + 1) % 50 == 0 or it == 0:
            print(f"iter {it + 1}/{config.iters} total={record.total:.6f} "
                  f"sil={record.silhouette:.6f} lap={record.laplacian:.6f} "
                  f"sdf={record.sdf_sign:.6f} lr={record.lr:.5f}",
                  file=sys.stderr)
        if args.snapshot_every and (it + 1) % args.snapshot_every == 0:
            snap_dir.mkdir(exist_ok=True)
            export_obj(mesh, snap_dir / f"iter_{it + 1:06d}.obj")

    try:
        mesh, field, report = train(views, config, callback=callback)
    except NumericalError as exc:
        if exc.field is not None:
            dump = out_dir / "field_dump.npz"
            payload = {"values": exc.field.values}
            if exc.field.raw_offsets is not None:
                payload["raw_offsets"] = exc.field.raw_offsets
            np.savez(dump, **payload)
            print(f"error: {exc} (field dumped to {dump})", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 4

    mesh_path = out_dir / "mesh.obj"
    export_obj(mesh, mesh_path)
    doc = {
        "config": {k: getattr(config, k) for k in _TRAIN_KEYS},
        "summary": report.summary(),
        "quality": quality_report(mesh).to_dict(),
        "loss_history": [r.to_dict() for r in report.records],
    }
    (out_dir / "report.json").write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({
        "mesh": str(mesh_path), "report": str(out_dir / "report.json"),
        "final_total": report.records[-1].total if report.records else None,
        "elapsed_seconds": report.elapsed_seconds,
    }, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    mesh = parse_obj(args.mesh)
    _apply_threads(args.threads)
    doc = {"mesh": str(args.mesh), "quality": quality_report(mesh).to_dict()}

    if args.ref:
        ref = parse_obj(args.ref)
        doc["chamfer"] = chamfer_distance(
            mesh, ref, samples=args.samples, seed=args.seed)
        doc["ref"] = str(args.ref)

    if args.scene:
        if not args.frames or not args.masks:
            raise ValueError("--scene needs --frames and --masks for IoU")
        scene = load_scene(args.scene)
        views = load_views(args.frames, args.masks, scene, args.res)
        per_view = {}
        for v in views:
            rendered = hard_coverage(mesh, v.intrinsics, v.pose, args.res)
            per_view[v.name] = iou(rendered, v.mask)
        doc["iou"] = {
            "mean": float(np.mean(list(per_view.values()))),
            "per_view": per_view,
        }

    text = json.dumps(doc, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


_SCRIPT_TEMPLATE = """\
#!/bin/sh
# Sparse COLMAP reconstruction over the frames in {images}
set -e

IMAGES={images_q}
WORK={work_q}

mkdir -p "$WORK"
colmap feature_extractor \\
    --database_path "$WORK/database.db" \\
    --image_path "$IMAGES" \\
    --ImageReader.camera_model {camera_model} \\
    --ImageReader.single_camera 1
colmap {matcher}_matcher \\
    --database_path "$WORK/database.db"
mkdir -p "$WORK/sparse"
colmap mapper \\
    --database_path "$WORK/database.db" \\
    --image_path "$IMAGES" \\
    --output_path "$WORK/sparse"
colmap model_converter \\
    --input_path "$WORK/sparse/0" \\
    --output_path "$WORK/sparse/0" \\
    --output_type TXT
"""


def _sh_quote(text: str) -> str:
    return "'" + str(text).replace("'", "'\\''") + "'"


def cmd_colmap_script(args) -> int:
    work = args.work if args.work else str(Path(args.images).parent / "colmap")
    script = _SCRIPT_TEMPLATE.format(
        images=args.images, images_q=_sh_quote(args.images),
        work_q=_sh_quote(work), matcher=args.matcher,
        camera_model=args.camera_model)
    out = Path(args.out)
    out.write_text(script, encoding="utf-8")
    out.chmod(out.stat().st_mode | 0o755)
    print(json.dumps({"script": str(out), "work_dir": work}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thinrecon",
        description="Mesh reconstruction of thin objects from multi-view "
                    "silhouettes on a tetrahedral grid.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="sample, downscale, and mask video frames")
    p.add_argument("--frames", required=True, help="directory of input frames")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=200,
                   help="frames to keep (default 200)")
    p.add_argument("--size", type=int, default=512,
                   help="output resolution (default 512)")
    p.add_argument("--masks", default=None,
                   help="directory of matching masks (stem-matched)")
    p.add_argument("--luma-threshold", type=int, default=40,
                   help="brightness threshold for derived masks (default 40)")
    p.add_argument("--allow-fewer", action="store_true",
                   help="accept fewer frames than --count instead of failing")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("poses", help="parse a COLMAP model and normalize it")
    p.add_argument("--model", required=True, help="COLMAP sparse model dir")
    p.add_argument("--out", required=True, help="scene.json output path")
    p.add_argument("--target-radius", type=float, default=0.35,
                   help="p95 point radius after normalization (default 0.35)")
    p.add_argument("--format", choices=("auto", "bin", "txt"), default="auto")
    p.set_defaults(func=cmd_poses)

    p = sub.add_parser("reconstruct", help="fit a mesh to masks")
    p.add_argument("--scene", required=True, help="scene.json from poses")
    p.add_argument("--frames", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None,
                   help="key=value file with training settings")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--snapshot-every", type=int, default=0,
                   help="write snapshots/iter_*.obj every N iterations")
    p.add_argument("--grid-res", dest="grid_res", type=int, default=None)
    p.add_argument("--train-res", dest="train_res", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--lambda-lap", dest="lambda_lap", type=float, default=None)
    p.add_argument("--lambda-sdf", dest="lambda_sdf", type=float, default=None)
    p.add_argument("--batch-views", dest="batch_views", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--offsets", dest="offsets_enabled",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="optimize bounded vertex offsets as well")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="quality metrics for a mesh")
    p.add_argument("--mesh", required=True, help="OBJ file to evaluate")
    p.add_argument("--ref", default=None, help="reference OBJ for chamfer")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene", default=None, help="scene.json for mask IoU")
    p.add_argument("--frames", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--res", type=int, default=128,
                   help="IoU evaluation resolution (default 128)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("colmap-script",
                       help="emit a shell script that runs COLMAP")
    p.add_argument("--images", required=True, help="directory of frames")
    p.add_argument("--out", required=True, help="script path to write")
    p.add_argument("--matcher", choices=("exhaustive", "sequential"),
                   default="exhaustive")
    p.add_argument("--camera-model", default="SIMPLE_RADIAL",
                   choices=("SIMPLE_PINHOLE", "PINHOLE", "SIMPLE_RADIAL"))
    p.add_argument("--work", default=None,
                   help="COLMAP working directory (default: <images>/../colmap)")
    p.set_defaults(func=cmd_colmap_script)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ModelParseError, ViewDataError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
