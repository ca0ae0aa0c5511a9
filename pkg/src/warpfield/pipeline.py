"""Frame-to-frame streaming orchestration.

A FIFO buffer keeps the most recent low-resolution frames.  Each new
frame is marched at per-pixel ranges derived from the newest buffered
depth map, every buffered frame is forward-warped to the output
resolution, the current frame is upsampled, and the convolutional
renderer fuses the stack into the final RGB image.  Missing buffer
slots enter the network as zero features with zero validity so the
input arity never changes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import OccupancyGrid, VoxelField
from .geometry import CameraIntrinsics, Pose, scale_intrinsics
from .neural_render import ConvRenderer, forward as renderer_forward, renderer_input_channels
from .reproject import upsample, warp_to_highres
from .volren import (
    FeatureFrame,
    MarchConfig,
    build_intervals,
    default_epsilon,
    render_frame,
)

# Buffer entries carry everything reprojection needs: the low-res feature
# and depth maps plus the pose and intrinsics they were rendered with.
FrameRecord = FeatureFrame


class RenderBuffer:
    """FIFO of the most recent frames; eviction is strictly oldest-first."""

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("buffer capacity must be >= 0")
        self.capacity = int(capacity)
        self.frames: list[FrameRecord] = []

    def push(self, frame: FrameRecord) -> None:
        if self.capacity == 0:
            return
        self.frames.append(frame)
        if len(self.frames) > self.capacity:
            del self.frames[0]

    def newest(self) -> FrameRecord | None:
        return self.frames[-1] if self.frames else None

    def clear(self) -> None:
        self.frames.clear()

    def __len__(self) -> int:
        return len(self.frames)


def reset(buf: RenderBuffer) -> None:
    """Empty the buffer; the next frame renders as a cold start."""
    buf.clear()


@dataclass
class PipelineConfig:
    t_near: float
    t_far: float
    s: int = 4
    k: int = 6
    l: int = 2
    epsilon: float | None = None  # None: 5% of the ray range
    march: MarchConfig = dc_field(default_factory=lambda: MarchConfig(step=0.02))
    use_guidance: bool = True
    use_neural_renderer: bool = True
    n_threads: int = 1

    def __post_init__(self) -> None:
        if int(self.s) != self.s or self.s < 1:
            raise ValueError("s must be an integer >= 1")
        if self.k < 3:
            raise ValueError("k must be >= 3")
        if self.l < 0:
            raise ValueError("l must be >= 0")
        if not self.t_far > self.t_near:
            raise ValueError("t_far must exceed t_near")


@dataclass
class FrameStats:
    samples_total: int
    samples_per_ray_mean: float
    ms_volume: float
    ms_warp: float
    ms_neural: float
    guided_pixel_fraction: float


def config_from_meta(meta: dict, **overrides) -> PipelineConfig:
    """Build the run-time config a checkpoint's meta header describes."""
    march = MarchConfig(
        step=float(meta["march_step"]),
        t_min_transmittance=float(meta.get("march_t_min_transmittance", 1e-3)),
        max_samples=int(meta.get("march_max_samples", 2048)),
    )
    kwargs = dict(
        t_near=float(meta["t_near"]),
        t_far=float(meta["t_far"]),
        s=int(meta["s"]),
        k=int(meta["k"]),
        l=int(meta["l"]),
        epsilon=meta.get("epsilon"),
        march=march,
    )
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


def intrinsics_from_meta(meta: dict) -> CameraIntrinsics:
    d = meta["intr"]
    return CameraIntrinsics(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        width=int(d["w"]), height=int(d["h"]),
    )


def render_next(
    field: VoxelField,
    occ: OccupancyGrid | None,
    renderer: ConvRenderer | None,
    buf: RenderBuffer,
    pose: Pose,
    intr_high: CameraIntrinsics,
    cfg: PipelineConfig,
) -> tuple[np.ndarray, FrameStats]:
    """Render one output frame and push its low-res record onto the buffer.

    The image is a pure function of (field, renderer weights, buffer
    contents, pose); timings live only in the stats.
    """
    if intr_high.width % cfg.s or intr_high.height % cfg.s:
        raise ValueError(
            f"image size {intr_high.width}x{intr_high.height} not divisible by s={cfg.s}"
        )
    if field.k != cfg.k:
        raise ValueError(f"field has k={field.k}, config expects k={cfg.k}")
    if cfg.use_neural_renderer:
        want = renderer_input_channels(cfg.k, cfg.l)
        if renderer is None or renderer.in_channels != want:
            have = "none" if renderer is None else renderer.in_channels
            raise ValueError(f"renderer expects {have} input channels, pipeline needs {want}")

    low_intr = scale_intrinsics(intr_high, 1.0 / cfg.s)
    eps = cfg.epsilon if cfg.epsilon is not None else default_epsilon(cfg.t_near, cfg.t_far)

    # Depth reprojection (guidance intervals) counts toward warp time.
    intervals = None
    guided_fraction = 0.0
    newest = buf.newest()
    tg = time.perf_counter()
    if cfg.use_guidance and newest is not None:
        intervals = build_intervals(newest, pose, low_intr, cfg.t_near, cfg.t_far, eps)
        guided_fraction = float(1.0 - np.mean(intervals.full))
    ms_guidance = (time.perf_counter() - tg) * 1e3

    t0 = time.perf_counter()
    frame, samples = render_frame(
        field, pose, low_intr, cfg.march, cfg.t_near, cfg.t_far,
        occ=occ, intervals=intervals, n_threads=cfg.n_threads,
    )
    t1 = time.perf_counter()

    h, w = intr_high.height, intr_high.width
    blocks: list[np.ndarray] = []
    if cfg.use_neural_renderer:
        # Oldest slot first; a buffer holding m < l frames zero-fills the
        # l - m oldest slots so the newest frame stays adjacent to current.
        for i in range(cfg.l):
            j = i - (cfg.l - len(buf))
            if j < 0:
                blocks.append(np.zeros((h, w, cfg.k)))
                blocks.append(np.zeros((h, w, 1)))
            else:
                warped = warp_to_highres(buf.frames[j], pose, intr_high)
                blocks.append(warped.features)
                blocks.append(warped.validity[..., None].astype(np.float64))
    t2 = time.perf_counter()

    up = upsample(frame.features, cfg.s)
    if cfg.use_neural_renderer:
        net_in = np.concatenate(blocks + [up], axis=2)
        image, _ = renderer_forward(renderer, net_in)
    else:
        image = np.clip(up[..., :3], 0.0, 1.0)
    t3 = time.perf_counter()

    buf.push(frame)
    stats = FrameStats(
        samples_total=int(samples.sum()),
        samples_per_ray_mean=float(samples.mean()),
        ms_volume=(t1 - t0) * 1e3,
        ms_warp=(t2 - t1) * 1e3 + ms_guidance,
        ms_neural=(t3 - t2) * 1e3,
        guided_pixel_fraction=guided_fraction,
    )
    return image, stats
