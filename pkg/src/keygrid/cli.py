"""Command-line front door: train, detect, eval, perturb.

Exit codes: 0 success, 2 bad config/flags, 3 input/frame mismatch,
4 missing annotations.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, evaluation, training
from .geometry import GeometryError, normalize_unit_cube
from .model import detect_keypoints
from .training import CheckpointError, ConfigError

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_BAD_INPUT = 3
EXIT_MISSING_ANNOTATIONS = 4

# distinct keypoint colors (RGB), cycled when K exceeds the palette
_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
]


def _apply_seed_override(cfg: training.TrainConfig) -> training.TrainConfig:
    env = os.environ.get("KEYGRID_SEED")
    if env is not None:
        cfg.seed = int(env)
    return cfg


def cmd_train(args) -> int:
    try:
        cfg = training.load_config(args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    cfg = _apply_seed_override(cfg)
    try:
        ckpt = training.train(cfg, resume_from=args.resume, log_fn=lambda e: print(
            f"epoch {e['epoch']:4d}  l_sim {e['l_sim']:.6f}  "
            f"l_far {e['l_far']:.6f}  l_total {e['l_total']:.6f}"))
    except (data.DataError, training.TrainingError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    print(f"checkpoint written: {ckpt}")
    return EXIT_OK


def cmd_detect(args) -> int:
    try:
        model, cfg, _ = training.restore_model(args.checkpoint)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        cloud = data.load_cloud(args.input)
        normalized, tf = normalize_unit_cube(cloud)
    except (data.CloudFormatError, GeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if len(normalized) < cfg.model.level_sizes[-1]:
        print(f"error: cloud too small for this model ({len(normalized)} points)",
              file=sys.stderr)
        return EXIT_BAD_INPUT

    pred = detect_keypoints(model, normalized)
    kp_raw = tf.invert(pred.keypoints.double()).numpy()
    payload = {
        "keypoints": kp_raw.tolist(),
        "segment_weights": pred.segment_weights.tolist(),
        "normalization": {"offset": list(tf.offset), "scale": tf.scale},
    }
    Path(args.out).write_text(json.dumps(payload, indent=2))
    print(f"wrote {args.out}")

    if args.viz:
        gray = np.full((len(cloud), 3), 160, dtype=np.uint8)
        kp_colors = np.array(
            [_PALETTE[i % len(_PALETTE)] for i in range(kp_raw.shape[0])],
            dtype=np.uint8)
        pts = np.vstack([cloud.numpy(), kp_raw])
        colors = np.vstack([gray, kp_colors])
        data.write_colored_ply(args.viz, pts, colors)
        print(f"wrote {args.viz}")
    return EXIT_OK


def _load_frames(dataset: str):
    params = training.parse_synth_spec(dataset)
    frames = data.synth_family(params)
    return [(normalize_unit_cube(c)[0], corr) for c, corr in frames]


def cmd_eval(args) -> int:
    try:
        model, cfg, _ = training.restore_model(args.checkpoint)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT

    if args.metric == "miou":
        if not args.annotations:
            print("error: miou requires --annotations", file=sys.stderr)
            return EXIT_MISSING_ANNOTATIONS
        annotations = data.load_annotations(args.annotations)
        clouds = training.resolve_dataset(args.dataset)
        scores = {}
        for cloud in clouds:
            if cloud.id not in annotations:
                print(f"error: no annotations for shape {cloud.id!r}", file=sys.stderr)
                return EXIT_MISSING_ANNOTATIONS
            pred = detect_keypoints(model, cloud)
            ann = np.stack([pos for _, pos in annotations[cloud.id]])
            scores[cloud.id] = evaluation.miou(
                pred.keypoints.numpy(), ann, threshold=args.threshold)
        report = {"metric": "miou", "per_shape": scores,
                  "mean": float(np.mean(list(scores.values())))}
    else:
        if not args.dataset.startswith("synth:"):
            print("error: das requires a synth: dataset with correspondences",
                  file=sys.stderr)
            return EXIT_BAD_CONFIG
        try:
            frames = _load_frames(args.dataset)
        except data.DataError as e:
            print(f"error: need >=2 frames ({e})", file=sys.stderr)
            return EXIT_BAD_INPUT
        if len(frames) < 2:
            print("error: need >=2 frames", file=sys.stderr)
            return EXIT_BAD_INPUT
        records = evaluation._records_from(model, frames)
        pairs = evaluation._all_pairs(records)
        per_pair = {
            f"{a.shape_id}|{b.shape_id}": evaluation.das([(a, b)], radius=args.threshold)
            for a, b in pairs
        }
        report = {"metric": "das", "per_pair": per_pair,
                  "mean": evaluation.das(pairs, radius=args.threshold)}

    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    print(f"{report['metric']} = {report['mean']:.2f}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    noise = [float(v) for v in args.noise.split(",") if v.strip()]
    factors = [int(v) for v in args.downsample.split(",") if v.strip()]
    if any(s < 0 for s in noise):
        print("error: negative noise scale", file=sys.stderr)
        return EXIT_BAD_CONFIG
    if any(f < 1 for f in factors):
        print("error: downsample factor must be >= 1", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        model, _, _ = training.restore_model(args.checkpoint)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        frames = _load_frames(args.dataset)
    except data.DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    report = evaluation.robustness_suite(
        model, frames, noise_scales=noise, downsample_factors=factors,
        num_seeds=args.seeds)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
        print(f"wrote {args.out}")
    print(evaluation.format_report(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keygrid",
                                     description="Unsupervised 3D keypoint detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect keypoints on a cloud file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--viz", default=None,
                   help="optional colored PLY of the cloud plus keypoints")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="compute DAS or mIoU on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", choices=("das", "miou"), required=True)
    p.add_argument("--annotations", default=None)
    p.add_argument("--threshold", type=float, default=evaluation.DEFAULT_THRESHOLD)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="robustness report under noise/downsampling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--noise", default="0")
    p.add_argument("--downsample", default="1")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_perturb)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
