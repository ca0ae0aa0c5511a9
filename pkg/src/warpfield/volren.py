"""Quadrature volume rendering over a voxel field.

The marcher samples a ray at t_i = t0 + (i + 1/2) * step for every t_i
inside the interval, converts density to per-sample opacity
alpha_i = 1 - exp(-sigma_i * step), and accumulates features, expected
depth, and opacity with transmittance weights w_i = T_i * alpha_i where
T_i is the product of (1 - alpha_j) over the samples taken before i.
Marching stops once T drops to the configured floor.  Samples falling in
unoccupied occupancy cells are treated as alpha = 0 without querying the
field; they do not count as samples taken.

Rendering a frame produces a low resolution FeatureFrame whose depth map
is camera-space z (the marcher's expected ray distance times the per-pixel
z factor), because depth consumers reproject via camera geometry.

A frame's per-pixel sampling interval can be bounded by reprojecting the
previous frame's depth map into the current view (build_intervals); pixels
with no usable guidance fall back to the full ray range.

Backward passes replay the forward sample positions exactly; depth and
interval geometry carry no gradient.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .field import FieldGrads, OccupancyGrid, VoxelField
from .geometry import (
    BEHIND_DEPTH_EPS,
    CameraIntrinsics,
    Pose,
    Ray,
    camera_z_factor,
    generate_rays,
    pixel_centers,
    project,
    unproject,
)

# Previous-frame pixels need at least this much opacity for their depth to
# drive the next frame's sampling interval.
GUIDANCE_MIN_OPACITY = 0.5

# Samples are marched in fixed-size blocks so rays that terminate early
# stop costing field queries.  The block size is part of the numerical
# contract: per-ray arithmetic is identical for any batch composition.
_SAMPLE_BLOCK = 32


@dataclass(frozen=True)
class MarchConfig:
    """Quadrature parameters: step length (world units), transmittance floor
    for early termination, and a hard cap on samples per ray."""

    step: float = 0.01
    t_min_transmittance: float = 1e-3
    max_samples: int = 2048

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not (0.0 <= self.t_min_transmittance < 1.0):
            raise ValueError("t_min_transmittance must be in [0, 1)")
        if self.max_samples < 1:
            raise ValueError("max_samples must be at least 1")


@dataclass
class RayResult:
    """Output of a single-ray march.

    ``depth`` is the expected termination distance in ray-t units (not
    camera z) and is 0 when opacity is 0.
    """

    feature: np.ndarray
    depth: float
    opacity: float
    samples_taken: int


@dataclass
class IntervalMap:
    """Per-pixel sampling intervals; ``full`` pixels use the whole ray range."""

    t0: np.ndarray
    t1: np.ndarray
    full: np.ndarray

    @staticmethod
    def full_range(height: int, width: int, t_near: float, t_far: float) -> "IntervalMap":
        return IntervalMap(
            t0=np.full((height, width), t_near),
            t1=np.full((height, width), t_far),
            full=np.ones((height, width), dtype=bool),
        )

    def guided_fraction(self) -> float:
        return float(1.0 - self.full.mean())


@dataclass
class FeatureFrame:
    """A rendered low resolution frame: features, camera-z depth, opacity,
    and the pose/intrinsics it was rendered with."""

    features: np.ndarray  # (h, w, k)
    depth: np.ndarray  # (h, w), camera-space z
    opacity: np.ndarray  # (h, w)
    pose: Pose
    intr: CameraIntrinsics


def _n_steps(t0: np.ndarray, t1: np.ndarray, cfg: MarchConfig) -> np.ndarray:
    """Number of sample points t0 + (i+1/2)*step strictly inside [t0, t1)."""
    n = np.ceil((np.asarray(t1) - np.asarray(t0)) / cfg.step - 0.5).astype(np.int64)
    return np.clip(n, 0, cfg.max_samples)


def _march_forward(
    field: VoxelField,
    origins: np.ndarray,
    dirs: np.ndarray,
    t0: np.ndarray,
    n_steps: np.ndarray,
    cfg: MarchConfig,
    occ: OccupancyGrid | None,
    pad_width: int,
    tape: list | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched march core.

    Returns (features, depth_t, opacity, samples, t_final).  When ``tape``
    is a list, per-block intermediate arrays are appended for a gradient
    pass; taping disables ray compaction so block records stay aligned.
    """
    b = origins.shape[0]
    k = field.k
    feature = np.zeros((b, k))
    depth_t = np.zeros(b)
    samples = np.zeros(b, dtype=np.int64)
    t_run = np.ones(b)
    alive = np.arange(b)
    o_a, d_a, t0_a, n_a = origins, dirs, t0, n_steps
    thr = cfg.t_min_transmittance
    for start in range(0, pad_width, _SAMPLE_BLOCK):
        if alive.size == 0:
            break
        idx = np.arange(start, min(start + _SAMPLE_BLOCK, pad_width))
        t = t0_a[:, None] + (idx[None, :] + 0.5) * cfg.step
        in_range = idx[None, :] < n_a[:, None]
        pos = o_a[:, None, :] + t[..., None] * d_a[:, None, :]
        if occ is not None:
            queryable = in_range & occ.query(pos)
        else:
            queryable = in_range
        sigma = np.zeros(t.shape)
        feat = np.zeros(t.shape + (k,))
        q = np.nonzero(queryable)
        if q[0].size:
            sigma[q], feat[q] = field.query(pos[q])
        alpha = 1.0 - np.exp(-sigma * cfg.step)
        chain = np.cumprod(
            np.concatenate([t_run[alive][:, None], 1.0 - alpha], axis=1), axis=1
        )
        t_excl = chain[:, :-1]
        taken = in_range & (t_excl > thr)
        w = np.where(taken, t_excl * alpha, 0.0)
        feature[alive] += np.einsum("bs,bsk->bk", w, feat)
        depth_t[alive] += np.sum(w * t, axis=1)
        samples[alive] += np.sum(taken & queryable, axis=1)
        t_run_alive = t_run[alive] * np.prod(np.where(taken, 1.0 - alpha, 1.0), axis=1)
        t_run[alive] = t_run_alive
        if tape is not None:
            tape.append(
                {
                    "rays": alive.copy(),
                    "pos": pos,
                    "alpha": alpha,
                    "t_excl": t_excl,
                    "taken": taken,
                    "queryable": queryable,
                    "feat": feat,
                    "w": w,
                }
            )
        # Rays whose transmittance hit the floor, or whose interval is
        # exhausted, take no further samples; drop them from later blocks.
        keep = (t_run_alive > thr) & (n_a > start + _SAMPLE_BLOCK)
        if not keep.all():
            alive = alive[keep]
            o_a, d_a, t0_a, n_a = o_a[keep], d_a[keep], t0_a[keep], n_a[keep]
    opacity = 1.0 - t_run
    return feature, depth_t, opacity, samples, t_run


def march_batch(
    field: VoxelField,
    origins: np.ndarray,
    dirs: np.ndarray,
    t0: np.ndarray,
    t1: np.ndarray,
    cfg: MarchConfig,
    occ: OccupancyGrid | None = None,
    pad_width: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """March a batch of rays; returns (features, depth_t, opacity, samples).

    ``pad_width`` fixes the internal block span so results are independent
    of how a larger set of rays was split into batches.
    """
    n = _n_steps(t0, t1, cfg)
    width = int(n.max()) if pad_width is None else int(pad_width)
    feature, depth_t, opacity, samples, _ = _march_forward(
        field, origins, dirs, np.asarray(t0, dtype=np.float64), n, cfg, occ, width
    )
    return feature, depth_t, opacity, samples


def march_batch_backward(
    field: VoxelField,
    origins: np.ndarray,
    dirs: np.ndarray,
    t0: np.ndarray,
    t1: np.ndarray,
    cfg: MarchConfig,
    grad_feature: np.ndarray,
    grads: FieldGrads,
    occ: OccupancyGrid | None = None,
    grad_opacity: np.ndarray | None = None,
    pad_width: int | None = None,
) -> None:
    """Accumulate field gradients for a batch march.

    Replays the exact forward sample positions and masks.  Gradients flow
    through feature values and through density (via alpha and
    transmittance); sample positions and expected depth are constants.
    """
    n = _n_steps(t0, t1, cfg)
    width = int(n.max()) if pad_width is None else int(pad_width)
    tape: list = []
    wf_total, _, _, _, t_final = _march_forward(
        field, origins, dirs, np.asarray(t0, dtype=np.float64), n, cfg, occ, width, tape=tape
    )
    gf = np.asarray(grad_feature, dtype=np.float64)
    step = cfg.step
    prefix = np.zeros_like(wf_total)  # running sum of w_j f_j up to current block
    for block in tape:
        rays = block["rays"]
        w = block["w"]
        feat = block["feat"]
        wf = w[..., None] * feat
        inclusive = prefix[rays][:, None, :] + np.cumsum(wf, axis=1)
        suffix = wf_total[rays][:, None, :] - inclusive
        g = gf[rays]
        g_dot_f = np.einsum("bk,bsk->bs", g, feat)
        g_dot_suffix = np.einsum("bk,bsk->bs", g, suffix)
        live = block["taken"] & block["queryable"]
        g_sigma = step * (block["t_excl"] * (1.0 - block["alpha"]) * g_dot_f - g_dot_suffix)
        if grad_opacity is not None:
            g_sigma = g_sigma + (grad_opacity[rays] * step * t_final[rays])[:, None]
        g_sigma = np.where(live, g_sigma, 0.0)
        g_feat = w[..., None] * g[:, None, :]
        m = np.nonzero(live)
        if m[0].size:
            field.query_backward(block["pos"][m], g_sigma[m], g_feat[m], grads)
        prefix[rays] += np.sum(wf, axis=1)


def march(
    field: VoxelField,
    ray: Ray,
    cfg: MarchConfig,
    occ: OccupancyGrid | None = None,
    interval: tuple[float, float] | None = None,
) -> RayResult:
    """March a single ray; ``interval`` optionally restricts the t range."""
    t0, t1 = _clamp_interval(ray, interval)
    feature, depth_t, opacity, samples = march_batch(
        field,
        ray.origin[None, :],
        ray.direction[None, :],
        np.array([t0]),
        np.array([t1]),
        cfg,
        occ=occ,
    )
    return RayResult(
        feature=feature[0],
        depth=float(depth_t[0]),
        opacity=float(opacity[0]),
        samples_taken=int(samples[0]),
    )


def march_backward(
    field: VoxelField,
    ray: Ray,
    cfg: MarchConfig,
    grad_feature: np.ndarray,
    grads: FieldGrads,
    occ: OccupancyGrid | None = None,
    interval: tuple[float, float] | None = None,
    grad_opacity: float | None = None,
) -> None:
    """Single-ray gradient accumulation matching ``march``."""
    t0, t1 = _clamp_interval(ray, interval)
    march_batch_backward(
        field,
        ray.origin[None, :],
        ray.direction[None, :],
        np.array([t0]),
        np.array([t1]),
        cfg,
        np.asarray(grad_feature, dtype=np.float64)[None, :],
        grads,
        occ=occ,
        grad_opacity=None if grad_opacity is None else np.array([grad_opacity]),
    )


def _clamp_interval(ray: Ray, interval: tuple[float, float] | None) -> tuple[float, float]:
    if interval is None:
        return ray.t_near, ray.t_far
    t0 = max(ray.t_near, float(interval[0]))
    t1 = min(ray.t_far, float(interval[1]))
    if t0 >= t1:
        return ray.t_near, ray.t_far
    return t0, t1


def march_trace(
    field: VoxelField,
    ray: Ray,
    cfg: MarchConfig,
    occ: OccupancyGrid | None = None,
    interval: tuple[float, float] | None = None,
) -> dict:
    """Straightforward unblocked march used as a cross-check in tests.

    Computes every sample in one flat pass and returns all intermediate
    arrays (ts, sigma, alpha, t_excl, w, taken, queryable) along with the
    accumulated outputs.
    """
    t0, t1 = _clamp_interval(ray, interval)
    n = int(_n_steps(np.array(t0), np.array(t1), cfg))
    ts = t0 + (np.arange(n) + 0.5) * cfg.step
    pos = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    queryable = occ.query(pos) if occ is not None else np.ones(n, dtype=bool)
    sigma = np.zeros(n)
    feat = np.zeros((n, field.k))
    if queryable.any():
        sigma[queryable], feat[queryable] = field.query(pos[queryable])
    alpha = 1.0 - np.exp(-sigma * cfg.step)
    t_excl = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    taken = t_excl > cfg.t_min_transmittance
    w = np.where(taken, t_excl * alpha, 0.0)
    t_final = float(np.prod(np.where(taken, 1.0 - alpha, 1.0)))
    return {
        "ts": ts,
        "sigma": sigma,
        "alpha": alpha,
        "t_excl": t_excl,
        "w": w,
        "taken": taken,
        "queryable": queryable,
        "feature": w @ feat,
        "depth": float(np.dot(w, ts)),
        "opacity": 1.0 - t_final,
        "samples_taken": int(np.sum(taken & queryable)),
    }


# ------------------------------------------------------------------- frames


def render_frame(
    field: VoxelField,
    pose: Pose,
    intr: CameraIntrinsics,
    cfg: MarchConfig,
    t_near: float,
    t_far: float,
    occ: OccupancyGrid | None = None,
    intervals: IntervalMap | None = None,
    n_threads: int = 1,
) -> tuple[FeatureFrame, np.ndarray]:
    """Render one frame with one march per pixel center.

    Returns (frame, samples) where ``samples`` is the per-pixel count of
    field queries actually performed.  Results are bit-identical for any
    ``n_threads``: the sample-block layout is fixed frame-wide before rays
    are split across workers.
    """
    h, w = intr.height, intr.width
    uv = pixel_centers(intr).reshape(-1, 2)
    origins, dirs = generate_rays(intr, pose, uv)
    zf = camera_z_factor(intr, uv)
    if intervals is None:
        intervals = IntervalMap.full_range(h, w, t_near, t_far)
    full = intervals.full.reshape(-1)
    t0 = np.where(full, t_near, intervals.t0.reshape(-1))
    t1 = np.where(full, t_far, intervals.t1.reshape(-1))
    n = _n_steps(t0, t1, cfg)
    # Frame-global pad widths per partition keep the block layout, and with
    # it the floating-point result, independent of row chunking.
    pad_full = int(n[full].max()) if full.any() else 0
    pad_guided = int(n[~full].max()) if (~full).any() else 0
    features = np.zeros((h * w, field.k))
    depth_t = np.zeros(h * w)
    opacity = np.zeros(h * w)
    samples = np.zeros(h * w, dtype=np.int64)

    def run(part_idx: np.ndarray, pad: int) -> None:
        if part_idx.size == 0:
            return
        f, d, o, s, _ = _march_forward(
            field, origins[part_idx], dirs[part_idx], t0[part_idx], n[part_idx], cfg, occ, pad
        )
        features[part_idx] = f
        depth_t[part_idx] = d
        opacity[part_idx] = o
        samples[part_idx] = s

    all_idx = np.arange(h * w)
    chunks = max(1, int(n_threads))
    row_blocks = np.array_split(np.arange(h), chunks)
    jobs = []
    for rows in row_blocks:
        if rows.size == 0:
            continue
        sel = all_idx.reshape(h, w)[rows].reshape(-1)
        jobs.append((sel[full[sel]], pad_full))
        jobs.append((sel[~full[sel]], pad_guided))
    if chunks == 1:
        for part_idx, pad in jobs:
            run(part_idx, pad)
    else:
        with ThreadPoolExecutor(max_workers=chunks) as pool:
            list(pool.map(lambda j: run(*j), jobs))
    frame = FeatureFrame(
        features=features.reshape(h, w, field.k),
        depth=(depth_t * zf).reshape(h, w),
        opacity=opacity.reshape(h, w),
        pose=pose,
        intr=intr,
    )
    return frame, samples.reshape(h, w)


def build_intervals(
    prev: FeatureFrame,
    pose: Pose,
    intr: CameraIntrinsics,
    t_near: float,
    t_far: float,
    epsilon: float,
) -> IntervalMap:
    """Bound the sampling interval of each target pixel from a previous frame.

    Valid previous pixels (opacity >= GUIDANCE_MIN_OPACITY) are unprojected
    at their depth and projected into the target view; the nearest depth
    landing in each target pixel centers an interval of half-width
    ``epsilon`` (ray-t units), clamped to [t_near, t_far].  Pixels that
    receive nothing, or whose clamped interval is empty, fall back to the
    full range.
    """
    h, w = intr.height, intr.width
    valid = prev.opacity >= GUIDANCE_MIN_OPACITY
    out = IntervalMap.full_range(h, w, t_near, t_far)
    if not valid.any():
        return out
    uv_prev = pixel_centers(prev.intr)[valid]
    z_prev = prev.depth[valid]
    points = unproject(prev.intr, prev.pose, uv_prev, z_prev)
    uv_new, z_new = project(intr, pose, points)
    front = z_new > BEHIND_DEPTH_EPS
    px = np.floor(uv_new).astype(np.int64)
    inside = (
        front & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    )
    if not inside.any():
        return out
    px = px[inside]
    z_new = z_new[inside]
    flat = px[:, 1] * w + px[:, 0]
    zbuf = np.full(h * w, np.inf)
    np.minimum.at(zbuf, flat, z_new)
    hit = np.isfinite(zbuf).reshape(h, w)
    zf = camera_z_factor(intr, pixel_centers(intr)).reshape(h, w)
    t_center = np.where(hit, zbuf.reshape(h, w) / zf, 0.0)
    lo = np.maximum(t_near, t_center - epsilon)
    hi = np.minimum(t_far, t_center + epsilon)
    usable = hit & (lo < hi)
    out.full = ~usable
    out.t0 = np.where(usable, lo, t_near)
    out.t1 = np.where(usable, hi, t_far)
    return out


def default_epsilon(t_near: float, t_far: float, fraction: float = 0.05) -> float:
    """Interval half-width as a fraction of the ray range (default 5%)."""
    return fraction * (t_far - t_near)
