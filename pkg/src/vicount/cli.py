"""Batch command-line entrypoint for the whole pipeline.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 runtime/model
error. Where a command takes both a config file and flags, flags win over
the file, which wins over built-in defaults; the effective configuration is
echoed into the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import density, inference, metrics, synth, training
from .annotations import Supervision, count_unique, derive_flow, derive_flow_weak, load_manifest
from .density import KernelSpec, gt_bundle, save_density
from .errors import ConfigError, DataError, VicountError
from .model import ModelConfig, build_model, load_checkpoint
from .training import TrainConfig, load_train_clip


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path}: {exc}") from None


def _echo_config(out_dir: Path, name: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _apply_overrides(data: dict, args, names) -> dict:
    for cli_name, key in names.items():
        value = getattr(args, cli_name)
        if value is not None:
            data[key] = value
    return data


def cmd_synth(args) -> int:
    data = _read_json(args.config, "synth config") if args.config else {}
    data = _apply_overrides(
        data, args, {"seed": "seed", "n_frames": "n_frames", "n_persons": "n_persons"}
    )
    for key in ("world_size", "viewport", "person_speed"):
        if key in data:
            data[key] = tuple(data[key])
    data.setdefault("clip_id", Path(args.out).name)
    try:
        config = synth.SynthConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from None

    frames, clip = synth.generate(config)
    out_dir = Path(args.out)
    manifest = synth.save_dataset(frames, clip, out_dir)
    _echo_config(out_dir, "synth_config.json", asdict(config))
    print(f"wrote {len(frames)} frames + annotations to {out_dir} ({manifest.name})")
    return 0


def cmd_derive_gt(args) -> int:
    clip, _ = load_manifest(args.clip)
    if args.stride >= clip.n_frames:
        raise ConfigError(
            f"stride {args.stride} >= clip length {clip.n_frames}: no pairs"
        )
    kernel = KernelSpec(sigma=args.sigma, truncation_radius=3.0 * args.sigma)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_pairs = 0
    from .annotations import pair_indices

    for a, b in pair_indices(clip.n_frames, args.stride):
        frame_a, frame_b = clip.frames[a], clip.frames[b]
        if clip.supervision is Supervision.FULL:
            pair = derive_flow(frame_a, frame_b)
        else:
            pair = derive_flow_weak(frame_a, frame_b)
        bundle = gt_bundle(pair, frame_a, frame_b, kernel=kernel, stride=args.map_stride)
        for name, dmap in zip(bundle._fields, bundle):
            save_density(dmap, out_dir / f"pair_{a:04d}_{b:04d}_{name}.vicd")
        n_pairs += 1

    _echo_config(out_dir, "gt_config.json", {
        "clip": str(args.clip), "stride": args.stride, "sigma": args.sigma,
        "map_stride": args.map_stride,
    })
    print(f"wrote {6 * n_pairs} maps for {n_pairs} pairs to {out_dir}")
    return 0


def _find_manifests(data_dir: Path):
    manifests = sorted(data_dir.glob("**/manifest.json"))
    if not manifests:
        raise DataError(f"no manifest.json found under {data_dir}")
    return manifests


def cmd_train(args) -> int:
    data = _read_json(args.config, "train config") if args.config else {}
    data = _apply_overrides(data, args, {
        "steps": "max_steps", "lr": "lr0", "seed": "seed",
        "batch_pairs": "batch_pairs", "crop_size": "crop_size",
        "delta_min": "delta_min", "delta_max": "delta_max",
    })
    config = TrainConfig.from_dict(data)

    model_data = _read_json(args.model_config, "model config") if args.model_config else {}
    if args.variant is not None:
        model_data["variant"] = args.variant
    model_config = ModelConfig.from_dict(model_data)
    model = build_model(model_config, seed=config.seed)

    clips = [load_train_clip(m) for m in _find_manifests(Path(args.data))]
    val_clips = None
    if args.val_data:
        val_clips = [load_train_clip(m) for m in _find_manifests(Path(args.val_data))]

    result = training.train(clips, model, config, out_dir=args.out, val_clips=val_clips)
    last = result.history[-1] if result.history else {}
    print(
        f"trained {len(result.history)} steps on {len(clips)} clip(s); "
        f"final loss {last.get('total', float('nan')):.5f}; "
        f"checkpoint at {result.checkpoint_dir}"
    )
    if result.best_val_miae is not None:
        print(f"best validation MIAE {result.best_val_miae:.3f} at step {result.best_step}")
    return 0


def cmd_count(args) -> int:
    clip, frame_paths = load_manifest(args.clip)
    if not frame_paths:
        raise DataError(f"{args.clip}: no frames found")
    model = load_checkpoint(args.ckpt)
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in frame_paths]
    result = inference.count_video(
        frames, model, stride=args.stride,
        resolution_cap=(args.cap_long, args.cap_short),
        clip_id=clip.clip_id, include_tail=args.include_tail,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inference.save_result(result, out_dir / f"{clip.clip_id}.json")
    _echo_config(out_dir, "count_config.json", {
        "ckpt": str(args.ckpt), "stride": args.stride,
        "resolution_cap": [args.cap_long, args.cap_short],
        "include_tail": args.include_tail,
    })
    print(f"{clip.clip_id}: total {result.total:.2f} "
          f"(first frame {result.first_frame_count:.2f}, {len(result.pairs)} pairs)")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    results = [
        inference.load_result(p)
        for p in sorted(pred_dir.glob("*.json"))
        if p.name not in ("count_config.json", "eval_config.json", "report.json")
    ]
    if not results:
        raise DataError(f"no prediction JSONs in {pred_dir}")

    clips = {}
    for manifest in _find_manifests(Path(args.gt)):
        clip, _ = load_manifest(manifest)
        clips[clip.clip_id] = clip

    records = []
    for result in results:
        clip = clips.get(result.clip_id)
        if clip is None:
            raise DataError(f"no ground-truth clip for prediction {result.clip_id!r}")
        record = metrics.VideoEvalRecord(
            clip_id=clip.clip_id,
            y_true=count_unique(clip, result.stride),
            y_pred=result.total,
            n_frames=clip.n_frames,
        )
        for pf in result.pairs:
            flow = derive_flow(clip.frames[pf.frame_a], clip.frames[pf.frame_b])
            record.pair_flows.append(metrics.PairFlowRecord(
                inflow_pred=pf.inflow, inflow_true=len(flow.inflow),
                outflow_pred=pf.outflow, outflow_true=len(flow.outflow),
            ))
        records.append(record)

    out_dir = Path(args.out) if args.out else pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    report = metrics.write_report(records, out_dir / "report.json", out_dir / "report.csv")
    _echo_config(out_dir, "eval_config.json", {"pred": str(pred_dir), "gt": str(args.gt)})
    print("  ".join(
        f"{k} {report[k]:.3f}" for k in ("MAE", "RMSE", "WRAE", "MIAE", "MOAE")
        if report[k] is not None
    ))
    return 0


def _overlay(frame: np.ndarray, grid: np.ndarray) -> np.ndarray:
    peak = float(grid.max())
    heat = grid / peak if peak > 0 else np.zeros_like(grid)
    alpha = 0.65 * heat[..., None]
    color = np.array([255.0, 48.0, 0.0])
    blended = frame.astype(np.float32) * (1 - alpha) + color * alpha
    return np.clip(blended, 0, 255).astype(np.uint8)


def cmd_viz(args) -> int:
    clip, frame_paths = load_manifest(args.clip)
    try:
        a, b = (int(x) for x in args.pair.split(","))
    except ValueError:
        raise ConfigError(f"--pair must be 'a,b' frame indices, got {args.pair!r}") from None
    if not (0 <= a < len(frame_paths) and 0 <= b < len(frame_paths)):
        raise ConfigError(f"pair ({a}, {b}) out of range for {len(frame_paths)} frames")
    model = load_checkpoint(args.ckpt)
    image_a = np.asarray(Image.open(frame_paths[a]).convert("RGB"))
    image_b = np.asarray(Image.open(frame_paths[b]).convert("RGB"))
    _, _, maps = inference.predict_pair(image_a, image_b, model)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_of = {"global_a": image_a, "shared_a": image_a, "outflow_a": image_a,
                "global_b": image_b, "shared_b": image_b, "inflow_b": image_b}
    written = 0
    for name, grid in maps.items():
        if grid is None:
            continue
        out = _overlay(frame_of[name], grid)
        Image.fromarray(out).save(out_dir / f"pair_{a:04d}_{b:04d}_{name}.png")
        written += 1
    _echo_config(out_dir, "viz_config.json", {
        "clip": str(args.clip), "ckpt": str(args.ckpt), "pair": [a, b],
    })
    print(f"wrote {written} overlays to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vicount",
        description="Video individual counting via inflow/outflow density maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip dataset")
    p.add_argument("--config", help="SynthConfig JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-frames", type=int, dest="n_frames")
    p.add_argument("--n-persons", type=int, dest="n_persons")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("derive-gt", help="rasterize ground-truth map bundles")
    p.add_argument("--clip", required=True, help="clip manifest JSON")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--sigma", type=float, default=density.DEFAULT_SIGMA)
    p.add_argument("--map-stride", type=int, default=1, dest="map_stride",
                   help="output cells per image pixel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_derive_gt)

    p = sub.add_parser("train", help="train a model on clip datasets")
    p.add_argument("--data", required=True, help="directory of clip datasets")
    p.add_argument("--val-data", dest="val_data", help="validation clip datasets")
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--model-config", dest="model_config", help="ModelConfig JSON file")
    p.add_argument("--variant", choices=("multiscale", "shallow", "direct"))
    p.add_argument("--out", required=True, help="checkpoint + log directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-pairs", type=int, dest="batch_pairs")
    p.add_argument("--crop-size", type=int, dest="crop_size")
    p.add_argument("--delta-min", type=int, dest="delta_min")
    p.add_argument("--delta-max", type=int, dest="delta_max")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("count", help="count unique individuals in a clip")
    p.add_argument("--clip", required=True, help="clip manifest JSON")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--stride", type=int, default=inference.DEFAULT_TEST_STRIDE)
    p.add_argument("--cap-long", type=int, default=1920, dest="cap_long")
    p.add_argument("--cap-short", type=int, default=1080, dest="cap_short")
    p.add_argument("--include-tail", action="store_true", dest="include_tail")
    p.add_argument("--out", required=True, help="directory for result JSON")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("eval", help="score prediction JSONs against ground truth")
    p.add_argument("--pred", required=True, help="directory of count results")
    p.add_argument("--gt", required=True, help="directory of clip datasets")
    p.add_argument("--out", help="report directory (default: --pred)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="overlay predicted maps for one pair")
    p.add_argument("--clip", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pair", required=True, help="frame indices 'a,b'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except VicountError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
