"""Operator surface: data generation, training, rendering, evaluation and the
static-skip benchmark. One command per process; exit codes 0/1/2 for
success/runtime error/usage error; all randomness sits behind --seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import images
from .deformation import compute_static_mask
from .errors import (CheckpointCorruptError, CheckpointVersionError, ConfigError,
                     ContractViolationError, ImageDimensionError, InvalidInputError,
                     ManifestError, MissingImageError, TrainingDiverged)
from .metrics import MetricReport, psnr, ssim
from .rasterizer import RenderSettings
from .scene_io import SyntheticSceneSpec, generate_synthetic_scene, load_scene
from .training import (TrainConfig, evaluate, load_checkpoint, render_model,
                       save_checkpoint, train)

THREADS_ENV = "DYNSPLAT_THREADS"

_EXPECTED_ERRORS = (InvalidInputError, ConfigError, ManifestError, MissingImageError,
                    ImageDimensionError, CheckpointVersionError, CheckpointCorruptError,
                    ContractViolationError, TrainingDiverged, OSError)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parse_frames(spec: str, frame_count: int):
    """'all', 'a-b' (inclusive) or comma-separated indices."""
    if spec == "all":
        return list(range(frame_count))
    out = []
    for part in spec.split(","):
        part = part.strip()
        if "-" in part[1:]:  # allow negative check to fail naturally below
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    for f in out:
        if not 0 <= f < frame_count:
            raise InvalidInputError(f"frame {f} outside [0, {frame_count - 1}]")
    return out


def cmd_gen_data(args) -> int:
    spec = SyntheticSceneSpec(
        static_count=args.static, slow_count=args.slow, fast_count=args.fast,
        camera_count=args.cameras, frame_count=args.frames,
        width=args.width, height=args.height, eval_camera=args.eval_camera)
    manifest = generate_synthetic_scene(spec, args.out, seed=args.seed)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_kv(Path(args.config).read_text(), base=cfg)
    # flags override file values
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    cfg.workers = args.threads
    cfg.validate()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else None
    if log_path and log_path.exists():
        log_path.unlink()
    state, trainer = train(scene, cfg, checkpoint_path=out, log_path=log_path)
    print(f"{out} iterations={cfg.iterations} gaussians={state.gaussians.count}")
    return 0


def _checkpoint_cameras(state):
    if not state.cameras:
        raise InvalidInputError("checkpoint carries no camera rig")
    return state.cameras


def cmd_render(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    cams = _checkpoint_cameras(state)
    if not 0 <= args.camera < len(cams):
        raise InvalidInputError(f"camera {args.camera} outside [0, {len(cams) - 1}]")
    frames = _parse_frames(args.frames, state.frame_count)
    settings = RenderSettings(dtype=state.config.dtype, workers=args.threads)

    static_mask = static_cache = None
    if args.static_skip > 0:
        times = np.linspace(0, state.frame_count - 1, state.config.static_sample_times)
        static_mask, static_cache = compute_static_mask(
            state.gaussians, state.grid, state.dec_coarse, state.dec_fine,
            sample_times=times, k=args.static_skip)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = images.write_ppm if args.format == "ppm" else images.write_png
    for f in frames:
        img = render_model(state, cams[args.camera], f, mode=args.mode,
                           cam_idx=args.camera, static_mask=static_mask,
                           static_cache=static_cache, settings=settings)
        path = out_dir / f"cam{args.camera:02d}_frame_{f:03d}.{args.format}"
        writer(path, img)
        print(path)
    return 0


def cmd_eval(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    state.config.workers = args.threads
    cams = None if args.cameras == "eval" else (
        list(range(scene.camera_count)) if args.cameras == "all"
        else [int(c) for c in args.cameras.split(",")])
    frames = _parse_frames(args.frames, scene.frame_count)
    report = evaluate(state, scene, camera_indices=cams, frames=frames, mode=args.mode)
    Path(args.out).write_text(report.to_csv())
    print(f"{args.out} mean_psnr={report.mean_psnr:.4f} mean_ssim={report.mean_ssim:.6f}")
    return 0


def cmd_bench_skip(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    settings = RenderSettings(dtype=state.config.dtype, workers=args.threads)
    cam_indices = scene.eval_camera_indices() or list(range(scene.camera_count))
    frames = _parse_frames(args.frames, scene.frame_count)
    ks = [float(k) for k in args.k.split(",")]

    rows = ["k,psnr_db,ssim,render_time_s,decoder_evals_per_frame"]
    for k in ks:
        if not 0 <= k <= 100:
            raise InvalidInputError(f"percentile {k} outside [0, 100]")
        mask = cache = None
        if k > 0:
            times = np.linspace(0, state.frame_count - 1,
                                state.config.static_sample_times)
            mask, cache = compute_static_mask(state.gaussians, state.grid,
                                              state.dec_coarse, state.dec_fine,
                                              sample_times=times, k=k)
        evals0 = state.dec_coarse.eval_count + state.dec_fine.eval_count
        n_renders = 0
        psnrs, ssims = [], []
        started = time.perf_counter()
        for ci in cam_indices:
            for f in frames:
                img = render_model(state, scene.cameras[ci], f, cam_idx=ci,
                                   static_mask=mask, static_cache=cache,
                                   settings=settings)
                n_renders += 1
                gt = scene.load_image(ci, f)
                psnrs.append(psnr(img, gt))
                ssims.append(ssim(img, gt))
        elapsed = time.perf_counter() - started
        evals = state.dec_coarse.eval_count + state.dec_fine.eval_count - evals0
        finite = [p for p in psnrs if np.isfinite(p)]
        rows.append(f"{k:g},{np.mean(finite):.6f},{np.mean(ssims):.6f},"
                    f"{elapsed:.6f},{evals / n_renders:.2f}")
    Path(args.out).write_text("\n".join(rows) + "\n")
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsplat",
        description="Dynamic Gaussian splatting: generate data, train, render, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-view video scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--static", type=int, default=20)
    p.add_argument("--slow", type=int, default=6)
    p.add_argument("--fast", type=int, default=4)
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--eval-camera", type=int, default=3)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a scene manifest")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", type=int, required=True)
    p.add_argument("--frames", default="all")
    p.add_argument("--mode", choices=("full", "coarse_only", "fine_only", "none"),
                   default="full")
    p.add_argument("--static-skip", type=float, default=0.0,
                   help="percentile of Gaussians rendered from the cached delta")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM against ground truth, CSV output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--cameras", default="eval",
                   help="'eval', 'all' or comma-separated indices")
    p.add_argument("--frames", default="all")
    p.add_argument("--mode", choices=("full", "coarse_only", "fine_only", "none"),
                   default="full")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-skip", help="quality/speed trade-off of the static skip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--k", required=True, help="comma-separated percentiles")
    p.add_argument("--frames", default="all")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_bench_skip)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _EXPECTED_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
