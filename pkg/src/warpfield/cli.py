"""Command line: scene generation, training, trajectory rendering, eval, bench, serve.

Exit codes: 0 success, 2 usage error (argparse), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .geometry import CameraIntrinsics, Pose
from .pipeline import (
    PipelineConfig,
    RenderBuffer,
    config_from_meta,
    intrinsics_from_meta,
    render_next,
)
from .scene import (
    load_checkpoint,
    load_posed_image_dataset,
    make_dataset,
    make_scene,
    save_checkpoint,
    save_dataset,
    save_image,
)
from .trainer import (
    TrainConfig,
    model_from_checkpoint,
    model_to_checkpoint,
    psnr,
    run_training,
    ssim,
)
from .volren import MarchConfig


@dataclass
class RunManifest:
    config: dict
    seed: int | None
    version: str
    started_utc: str
    finished_utc: str


def _version_string() -> str:
    return f"v{__version__}"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(path: str, config: dict, seed: int | None, started: str) -> None:
    manifest = RunManifest(
        config=config,
        seed=seed,
        version=_version_string(),
        started_utc=started,
        finished_utc=_utc_now(),
    )
    with open(path, "w") as fh:
        json.dump(asdict(manifest), fh, indent=2)
        fh.write("\n")


def _args_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    return {k: v for k, v in cfg.items() if not callable(v)}


# ------------------------------------------------------------ trajectories


def load_trajectory(path: str) -> list[Pose]:
    """Read an ordered JSON list of 4x4 camera-to-world matrices."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise ValueError("trajectory must be a non-empty JSON list of 4x4 matrices")
    poses = []
    for m in data:
        arr = np.asarray(m, dtype=np.float64)
        if arr.shape != (4, 4):
            raise ValueError("each trajectory entry must be a 4x4 matrix")
        r_c2w = arr[:3, :3]
        center = arr[:3, 3]
        poses.append(Pose(rotation=r_c2w.T, translation=-r_c2w.T @ center))
    return poses


def save_trajectory(path: str, poses: list[Pose]) -> None:
    with open(path, "w") as fh:
        json.dump([p.to_camera_to_world().tolist() for p in poses], fh)


# ------------------------------------------------------------- checkpoint IO


def _load_model(ckpt_path: str):
    ckpt = load_checkpoint(ckpt_path)
    field, renderer = model_from_checkpoint(ckpt)
    return ckpt.meta, field, renderer


# ----------------------------------------------------------------- commands


def cmd_gen_scene(args: argparse.Namespace) -> int:
    started = _utc_now()
    scene = make_scene(args.preset)
    fx = args.width / (2.0 * math.tan(math.radians(args.fov) / 2.0))
    intr = CameraIntrinsics(
        fx=fx, fy=fx, cx=args.width / 2.0, cy=args.height / 2.0,
        width=args.width, height=args.height,
    )
    ds = make_dataset(scene, args.views, intr, args.radius, args.oracle_step, seed=args.seed)
    if args.test_views > 0:
        test = make_dataset(
            scene, args.test_views, intr, args.radius, args.oracle_step,
            seed=args.seed + 1, tag="test",
        )
        ds.items.extend(test.items)
    save_dataset(ds, args.out)
    _write_manifest(os.path.join(args.out, "manifest.json"), _args_config(args), args.seed, started)
    print(f"wrote {len(ds.items)} frames to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = _utc_now()
    ds = load_posed_image_dataset(args.data)
    r = args.field_res
    cfg = TrainConfig(
        iters_pretrain=args.pretrain_iters,
        iters_joint=args.joint_iters,
        k=args.k,
        l=args.l,
        s=args.scale,
        epsilon=args.epsilon,
        patch=args.patch,
        rays_per_batch=args.rays,
        field_resolution=(r, r, r),
        march=MarchConfig(step=args.step),
        distill_count=args.distill,
        seed=args.seed,
    )
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    log_path = args.log or args.out + ".log.jsonl"
    with open(log_path, "w") as log:
        result = run_training(ds, cfg, log_file=log)
    meta = {
        "k": cfg.k,
        "l": cfg.l,
        "s": cfg.s,
        "epsilon": cfg.epsilon,
        "march_step": cfg.march.step,
        "march_t_min_transmittance": cfg.march.t_min_transmittance,
        "march_max_samples": cfg.march.max_samples,
        "t_near": ds.t_near,
        "t_far": ds.t_far,
        "intr": {
            "fx": ds.intr.fx, "fy": ds.intr.fy, "cx": ds.intr.cx, "cy": ds.intr.cy,
            "w": ds.intr.width, "h": ds.intr.height,
        },
        "seed": cfg.seed,
        "iters_pretrain": cfg.iters_pretrain,
        "iters_joint": cfg.iters_joint,
        "occ_resolution": list(cfg.occ_resolution),
        "occ_threshold": cfg.occ_threshold,
    }
    save_checkpoint(args.out, model_to_checkpoint(result.field, result.renderer, meta))
    _write_manifest(args.out + ".manifest.json", _args_config(args), args.seed, started)
    final = result.joint_curve[-1] if result.joint_curve else (
        result.pretrain_curve[-1] if result.pretrain_curve else float("nan")
    )
    print(f"wrote checkpoint {args.out} (final loss {final:.6g})")
    return 0


def _rebuild_occupancy(meta: dict, field):
    res = tuple(meta.get("occ_resolution", (16, 16, 16)))
    try:
        return field.rebuild_occupancy(res, float(meta.get("occ_threshold", 0.01)))
    except ValueError:
        return None


def cmd_render_path(args: argparse.Namespace) -> int:
    started = _utc_now()
    meta, field, renderer = _load_model(args.ckpt)
    poses = load_trajectory(args.path)
    cfg = config_from_meta(
        meta,
        use_guidance=not args.no_guidance,
        use_neural_renderer=not args.no_nn,
        n_threads=args.threads,
    )
    intr = intrinsics_from_meta(meta)
    occ = _rebuild_occupancy(meta, field)
    os.makedirs(args.out, exist_ok=True)
    buf = RenderBuffer(cfg.l)
    records = []
    for i, pose in enumerate(poses):
        img, st = render_next(field, occ, renderer, buf, pose, intr, cfg)
        save_image(os.path.join(args.out, f"frame_{i:05d}.png"), img)
        records.append({"frame": i, **asdict(st)})
    if args.stats:
        with open(args.stats, "w") as fh:
            json.dump(records, fh, indent=2)
    _write_manifest(os.path.join(args.out, "manifest.json"), _args_config(args), meta.get("seed"), started)
    print(f"rendered {len(poses)} frames to {args.out}")
    return 0


def metrics_report(pairs: list[tuple[np.ndarray, np.ndarray]]) -> dict:
    """Per-frame and mean PSNR/SSIM for (rendered, reference) image pairs."""
    frames = []
    for i, (img, ref) in enumerate(pairs):
        frames.append({"frame": i, "psnr": psnr(img, ref), "ssim": ssim(img, ref)})
    return {
        "frames": frames,
        "mean_psnr": float(np.mean([f["psnr"] for f in frames])),
        "mean_ssim": float(np.mean([f["ssim"] for f in frames])),
    }


def cmd_eval(args: argparse.Namespace) -> int:
    started = _utc_now()
    meta, field, renderer = _load_model(args.ckpt)
    ds = load_posed_image_dataset(args.data)
    poses = load_trajectory(args.traj)
    if len(poses) != len(ds.items):
        raise ValueError(
            f"trajectory has {len(poses)} poses but dataset has {len(ds.items)} frames"
        )
    cfg = config_from_meta(meta, n_threads=args.threads)
    occ = _rebuild_occupancy(meta, field)
    buf = RenderBuffer(cfg.l)
    pairs = []
    for pose, item in zip(poses, ds.items):
        img, _ = render_next(field, occ, renderer, buf, pose, ds.intr, cfg)
        pairs.append((img, item.image))
    report = metrics_report(pairs)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    _write_manifest(args.out + ".manifest.json", _args_config(args), meta.get("seed"), started)
    print(f"mean psnr {report['mean_psnr']:.2f} dB, mean ssim {report['mean_ssim']:.4f}")
    return 0


def bench_run(args_ckpt: str, traj_path: str, n_threads: int = 1) -> dict:
    """Render the trajectory with and without guidance; aggregate stats."""
    meta, field, renderer = _load_model(args_ckpt)
    poses = load_trajectory(traj_path)
    intr = intrinsics_from_meta(meta)
    occ = _rebuild_occupancy(meta, field)
    report: dict = {"frames": len(poses)}
    for mode, guided in (("guided", True), ("full", False)):
        cfg = config_from_meta(meta, use_guidance=guided, n_threads=n_threads)
        buf = RenderBuffer(cfg.l)
        records = []
        wall = []
        for pose in poses:
            t0 = time.perf_counter()
            _, st = render_next(field, occ, renderer, buf, pose, intr, cfg)
            wall.append((time.perf_counter() - t0) * 1e3)
            records.append(asdict(st))
        means = {
            key: float(np.mean([r[key] for r in records]))
            for key in ("ms_volume", "ms_warp", "ms_neural",
                        "samples_per_ray_mean", "guided_pixel_fraction")
        }
        means["ms_total"] = means["ms_volume"] + means["ms_warp"] + means["ms_neural"]
        means["ms_wall"] = float(np.mean(wall))
        report[mode] = {"per_frame": records, "mean": means}
    return report


def cmd_bench(args: argparse.Namespace) -> int:
    report = bench_run(args.ckpt, args.traj, n_threads=args.threads)
    out = {"frames": report["frames"]}
    for mode in ("guided", "full"):
        out[mode] = report[mode]["mean"]
    print(json.dumps(out, indent=2))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import create_app

    static = args.static
    if static is None and os.path.isdir(os.path.join("frontend", "dist")):
        static = os.path.join("frontend", "dist")
    app = create_app(args.ckpt, n_threads=args.threads, max_res=args.max_res,
                     static_dir=static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ------------------------------------------------------------------ parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpfield",
        description="Buffer-guided neural field rendering toolkit",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a procedural dataset")
    p.add_argument("--preset", required=True, choices=("spheres", "boxes", "mixed"))
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-views", type=int, default=0)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--fov", type=float, default=45.0, help="horizontal field of view, degrees")
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--oracle-step", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="train field and renderer on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-iters", type=int, default=2000)
    p.add_argument("--joint-iters", type=int, default=2000)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--l", type=int, default=2)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--distill", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--rays", type=int, default=2048)
    p.add_argument("--field-res", type=int, default=64)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render-path", help="render a pose trajectory to PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--no-nn", action="store_true")
    p.add_argument("--stats", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render_path)

    p = sub.add_parser("eval", help="PSNR/SSIM of rendered frames vs dataset images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="runtime breakdown with and without guidance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="WebSocket frame-streaming server")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--max-res", type=int, default=1024)
    p.add_argument("--static", default=None, help="viewer asset directory")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
