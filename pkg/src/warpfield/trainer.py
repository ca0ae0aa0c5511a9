"""Training: field pre-training, joint field+renderer optimization, metrics.

Joint steps run in two phases.  The plan phase renders the synthesized
preceding frames, derives guidance intervals, warp correspondences,
validity masks, and the patch placement, then freezes all of it.  The
value phase is a deterministic function of (field params, renderer
params) given that frozen plan: re-march the frames, copy features
through the frozen warp, upsample, run the renderer, take patch L2.
Gradients differentiate exactly the value phase; geometry (depths, pixel
positions, masks, intervals) carries no gradient by construction, which
is also what makes finite-difference checks of the full graph meaningful.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import VoxelField, OccupancyGrid
from .geometry import (
    CameraIntrinsics,
    Pose,
    camera_z_factor,
    generate_rays,
    interpolate_pose,
    pixel_centers,
    rotation_exp,
    scale_intrinsics,
)
from .neural_render import (
    ConvRenderer,
    backward as renderer_backward,
    forward as renderer_forward,
    plan_from_meta,
    plan_to_meta,
)
from .reproject import upsample, upsample_backward, warp_backward, warp_to_highres
from .scene import Checkpoint, DatasetItem, PosedImageDataset
from .volren import (
    FeatureFrame,
    IntervalMap,
    MarchConfig,
    build_intervals,
    default_epsilon,
    march_batch,
    march_batch_backward,
    render_frame,
)

PSNR_CAP = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


# ----------------------------------------------------------------- metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio against peak 1.0, capped at 99 dB."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def _gaussian_window() -> np.ndarray:
    r = np.arange(_SSIM_WINDOW) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * _SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity, 11x11 Gaussian window, valid positions only.

    Color inputs are reduced to grayscale as the channel mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    w = _gaussian_window()
    mu_a = _window_means(a, w)
    mu_b = _window_means(b, w)
    var_a = _window_means(a * a, w) - mu_a**2
    var_b = _window_means(b * b, w) - mu_b**2
    cov = _window_means(a * b, w) - mu_a * mu_b
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


# ------------------------------------------------------------------- Adam


class Adam:
    """Adam over named parameter arrays, updated in place."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def field_params(field: VoxelField) -> dict[str, np.ndarray]:
    return {"raw_density": field.raw_density, "features": field.features}


def renderer_params(r: ConvRenderer) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name in r.weights:
        out[f"w.{name}"] = r.weights[name]
        out[f"b.{name}"] = r.biases[name]
    return out


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    lr_field: float = 1e-2
    lr_renderer: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    iters_pretrain: int = 2000
    iters_joint: int = 2000
    rays_per_batch: int = 2048
    patch: int = 64
    s: int = 4
    l: int = 2
    k: int = 6
    field_resolution: tuple[int, int, int] = (64, 64, 64)
    march: MarchConfig = dc_field(default_factory=lambda: MarchConfig(step=0.02))
    epsilon: float | None = None  # None: 5% of the ray range
    use_guidance: bool = True
    seq_perturb: tuple[float, float] = (4.0, 0.04)  # max deg, max fraction of scene radius
    scene_radius: float = 2.0
    occ_resolution: tuple[int, int, int] = (16, 16, 16)
    occ_threshold: float = 0.01
    occ_interval: int = 250
    distill_count: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch % (4 * self.s):
            raise ValueError(f"patch {self.patch} must be a multiple of 4*s = {4 * self.s}")
        if self.l < 0:
            raise ValueError("l must be >= 0")


def _resolve_epsilon(cfg: TrainConfig, t_near: float, t_far: float) -> float:
    return cfg.epsilon if cfg.epsilon is not None else default_epsilon(t_near, t_far)


# ---------------------------------------------------------------- pretrain


def pretrain(
    field: VoxelField,
    dataset: PosedImageDataset,
    cfg: TrainConfig,
    log_file=None,
) -> tuple[list[float], OccupancyGrid | None]:
    """L2 on feature channels 0-2 against ground-truth rays at full range.

    Returns (loss curve, final occupancy grid).  Occupancy is rebuilt every
    ``cfg.occ_interval`` iterations and used for skipping from then on.
    """
    if field.k < 3:
        raise ValueError("pretraining supervises 3 color channels; field.k < 3")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr_field, cfg.betas, cfg.eps)
    intr = dataset.intr
    n_px = intr.height * intr.width
    items = [it for it in dataset.items if it.tag != "test"]
    images = [item.image.reshape(-1, 3) for item in items]
    centers = pixel_centers(intr).reshape(-1, 2)
    occ: OccupancyGrid | None = None
    curve: list[float] = []
    for it in range(cfg.iters_pretrain):
        img_idx = rng.integers(0, len(items), size=cfg.rays_per_batch)
        px_idx = rng.integers(0, n_px, size=cfg.rays_per_batch)
        origins = np.empty((cfg.rays_per_batch, 3))
        dirs = np.empty((cfg.rays_per_batch, 3))
        gt = np.empty((cfg.rays_per_batch, 3))
        for i in np.unique(img_idx):
            sel = img_idx == i
            o, d = generate_rays(intr, items[i].pose, centers[px_idx[sel]])
            origins[sel] = o
            dirs[sel] = d
            gt[sel] = images[i][px_idx[sel]]
        t0 = np.full(cfg.rays_per_batch, dataset.t_near)
        t1 = np.full(cfg.rays_per_batch, dataset.t_far)
        feats, _, _, _ = march_batch(field, origins, dirs, t0, t1, cfg.march, occ=occ)
        resid = feats[:, :3] - gt
        loss = float(np.mean(resid**2))
        curve.append(loss)
        grad_feat = np.zeros_like(feats)
        grad_feat[:, :3] = 2.0 * resid / resid.size
        grads = field.zero_grads()
        march_batch_backward(
            field, origins, dirs, t0, t1, cfg.march, grad_feat, grads, occ=occ
        )
        opt.step(field_params(field), {"raw_density": grads.raw_density, "features": grads.features})
        if (it + 1) % cfg.occ_interval == 0:
            occ = field.rebuild_occupancy(cfg.occ_resolution, cfg.occ_threshold)
        if log_file is not None and (it % 10 == 0 or it == cfg.iters_pretrain - 1):
            rec = {"phase": "pretrain", "iter": it, "loss": loss,
                   "psnr": min(-10.0 * math.log10(max(loss, 1e-12)), PSNR_CAP)}
            log_file.write(json.dumps(rec) + "\n")
    return curve, occ


# ------------------------------------------------------- pose synthesis


def synth_pose_sequence(
    target: Pose, l: int, cfg: TrainConfig, rng: np.random.Generator
) -> list[Pose]:
    """L poses approaching the target, from a randomly perturbed start.

    The start pose differs from the target by a rotation of at most
    ``seq_perturb[0]`` degrees and a camera-center shift of at most
    ``seq_perturb[1] * scene_radius``; rotation interpolates spherically,
    the center linearly, over l+1 steps, and the target itself is excluded.
    """
    if l == 0:
        return []
    axis = rng.normal(size=3)
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
    angle = rng.uniform(0.0, math.radians(cfg.seq_perturb[0]))
    shift_dir = rng.normal(size=3)
    norm = np.linalg.norm(shift_dir)
    shift_dir = shift_dir / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    shift = rng.uniform(0.0, cfg.seq_perturb[1] * cfg.scene_radius) * shift_dir

    start_c2w = rotation_exp(axis * angle) @ target.rotation.T
    start_center = target.camera_center() + shift
    start = Pose(rotation=start_c2w.T, translation=-start_c2w.T @ start_center)
    return [interpolate_pose(start, target, i / l) for i in range(l)]


# ------------------------------------------------------------- joint step


@dataclass
class _FramePlan:
    """Frozen per-frame ray set: geometry only, no field values."""

    pose: Pose
    origins: np.ndarray
    dirs: np.ndarray
    t0: np.ndarray
    t1: np.ndarray


@dataclass
class JointPlan:
    """Everything geometric about one joint step, frozen."""

    frames: list[_FramePlan]  # oldest ... newest, last = current
    warps: list  # WarpedFeatureMap per preceding frame (src_index/validity used)
    low_intr: CameraIntrinsics
    patch_y: int
    patch_x: int
    gt_patch: np.ndarray
    zf: np.ndarray  # camera-z factor per low-res pixel, for depth maps


def _frame_rays(intr: CameraIntrinsics, pose: Pose, intervals: IntervalMap | None,
                t_near: float, t_far: float) -> _FramePlan:
    uv = pixel_centers(intr).reshape(-1, 2)
    origins, dirs = generate_rays(intr, pose, uv)
    n = uv.shape[0]
    if intervals is None:
        t0 = np.full(n, t_near)
        t1 = np.full(n, t_far)
    else:
        full = intervals.full.reshape(-1)
        t0 = np.where(full, t_near, intervals.t0.reshape(-1))
        t1 = np.where(full, t_far, intervals.t1.reshape(-1))
    return _FramePlan(pose=pose, origins=origins, dirs=dirs, t0=t0, t1=t1)


def _march_frame(field: VoxelField, plan: _FramePlan, cfg: TrainConfig,
                 occ: OccupancyGrid | None, low_intr: CameraIntrinsics,
                 zf: np.ndarray) -> FeatureFrame:
    feats, depth_t, opacity, _ = march_batch(
        field, plan.origins, plan.dirs, plan.t0, plan.t1, cfg.march, occ=occ
    )
    h, w = low_intr.height, low_intr.width
    return FeatureFrame(
        features=feats.reshape(h, w, -1),
        depth=(depth_t * zf).reshape(h, w),
        opacity=opacity.reshape(h, w),
        pose=plan.pose,
        intr=low_intr,
    )


def build_joint_plan(
    field: VoxelField,
    occ: OccupancyGrid | None,
    image: np.ndarray,
    pose: Pose,
    intr: CameraIntrinsics,
    dataset_range: tuple[float, float],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> JointPlan:
    """Plan phase: synthesize poses, render frames, freeze all geometry."""
    t_near, t_far = dataset_range
    low_intr = scale_intrinsics(intr, 1.0 / cfg.s)
    zf = camera_z_factor(low_intr, pixel_centers(low_intr).reshape(-1, 2))
    eps = _resolve_epsilon(cfg, t_near, t_far)
    poses = synth_pose_sequence(pose, cfg.l, cfg, rng) + [pose]
    frames: list[_FramePlan] = []
    rendered: list[FeatureFrame] = []
    prev: FeatureFrame | None = None
    for p in poses:
        intervals = None
        if cfg.use_guidance and prev is not None:
            intervals = build_intervals(prev, p, low_intr, t_near, t_far, eps)
        plan = _frame_rays(low_intr, p, intervals, t_near, t_far)
        frames.append(plan)
        prev = _march_frame(field, plan, cfg, occ, low_intr, zf)
        rendered.append(prev)
    warps = [warp_to_highres(f, pose, intr) for f in rendered[:-1]]
    h, w = intr.height, intr.width
    max_oy = (h - cfg.patch) // cfg.s
    max_ox = (w - cfg.patch) // cfg.s
    patch_y = int(rng.integers(0, max_oy + 1)) * cfg.s
    patch_x = int(rng.integers(0, max_ox + 1)) * cfg.s
    gt_patch = image[patch_y : patch_y + cfg.patch, patch_x : patch_x + cfg.patch]
    return JointPlan(
        frames=frames,
        warps=warps,
        low_intr=low_intr,
        patch_y=patch_y,
        patch_x=patch_x,
        gt_patch=gt_patch,
        zf=zf,
    )


def joint_value_and_grads(
    field: VoxelField,
    occ: OccupancyGrid | None,
    renderer: ConvRenderer,
    plan: JointPlan,
    cfg: TrainConfig,
    compute_grads: bool = True,
):
    """Value phase: loss of the frozen plan, plus exact gradients.

    Returns (loss, field grads, renderer grads, rendered patch); the grad
    entries are None when ``compute_grads`` is false.
    """
    h_l, w_l = plan.low_intr.height, plan.low_intr.width
    p = cfg.patch
    py, px = plan.patch_y, plan.patch_x
    k = field.k

    frame_feats = []
    for fp in plan.frames:
        feats, _, _, _ = march_batch(
            field, fp.origins, fp.dirs, fp.t0, fp.t1, cfg.march, occ=occ
        )
        frame_feats.append(feats)

    # Warped maps: exact copies through the frozen correspondences, taken
    # from the re-marched preceding-frame features.
    pieces = []
    for warp, feats in zip(plan.warps, frame_feats[:-1]):
        warped = np.zeros((warp.validity.shape[0], warp.validity.shape[1], k))
        valid = warp.src_index >= 0
        warped[valid] = feats[warp.src_index[valid]]
        pieces.append(warped)

    up = upsample(frame_feats[-1].reshape(h_l, w_l, k), cfg.s)

    blocks = []
    for warped, warp in zip(pieces, plan.warps):
        blocks.append(warped[py : py + p, px : px + p])
        blocks.append(warp.validity[py : py + p, px : px + p, None].astype(np.float64))
    blocks.append(up[py : py + p, px : px + p])
    net_in = np.concatenate(blocks, axis=2)

    img, cache = renderer_forward(renderer, net_in)
    resid = img - plan.gt_patch
    loss = float(np.mean(resid**2))
    if not compute_grads:
        return loss, None, None, img

    grad_img = 2.0 * resid / resid.size
    r_grads, grad_in = renderer_backward(renderer, cache, grad_img)

    f_grads = field.zero_grads()
    ch = 0
    for warp, fp, feats in zip(plan.warps, plan.frames[:-1], frame_feats[:-1]):
        g_block = grad_in[:, :, ch : ch + k]
        ch += k + 1  # skip the validity channel: frozen mask, no gradient
        g_full = np.zeros((warp.validity.shape[0], warp.validity.shape[1], k))
        g_full[py : py + p, px : px + p] = g_block
        g_prev = warp_backward(warp, g_full, (h_l, w_l, k)).reshape(-1, k)
        rows = np.any(g_prev != 0.0, axis=1)
        if np.any(rows):
            march_batch_backward(
                field,
                fp.origins[rows],
                fp.dirs[rows],
                fp.t0[rows],
                fp.t1[rows],
                cfg.march,
                g_prev[rows],
                f_grads,
                occ=occ,
            )
    g_up = np.zeros((plan.low_intr.height * cfg.s, plan.low_intr.width * cfg.s, k))
    g_up[py : py + p, px : px + p] = grad_in[:, :, ch : ch + k]
    g_cur = upsample_backward(g_up, cfg.s, (h_l, w_l)).reshape(-1, k)
    rows = np.any(g_cur != 0.0, axis=1)
    fp = plan.frames[-1]
    if np.any(rows):
        march_batch_backward(
            field,
            fp.origins[rows],
            fp.dirs[rows],
            fp.t0[rows],
            fp.t1[rows],
            cfg.march,
            g_cur[rows],
            f_grads,
            occ=occ,
        )
    return loss, f_grads, r_grads, img


def joint_step(
    field: VoxelField,
    occ: OccupancyGrid | None,
    renderer: ConvRenderer,
    image: np.ndarray,
    pose: Pose,
    intr: CameraIntrinsics,
    dataset_range: tuple[float, float],
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt_field: Adam,
    opt_renderer: Adam,
) -> float:
    """One end-to-end training step; loss only on the final patch image."""
    plan = build_joint_plan(field, occ, image, pose, intr, dataset_range, cfg, rng)
    loss, f_grads, r_grads, _ = joint_value_and_grads(field, occ, renderer, plan, cfg)
    opt_field.step(
        field_params(field),
        {"raw_density": f_grads.raw_density, "features": f_grads.features},
    )
    r_named = {}
    for name in renderer.weights:
        r_named[f"w.{name}"] = r_grads.weights[name]
        r_named[f"b.{name}"] = r_grads.biases[name]
    opt_renderer.step(renderer_params(renderer), r_named)
    return loss


# ----------------------------------------------------------- distillation


def distill(
    field: VoxelField,
    pose_sampler,
    n: int,
    intr: CameraIntrinsics,
    dataset_range: tuple[float, float],
    march: MarchConfig,
    rng: np.random.Generator,
    occ: OccupancyGrid | None = None,
) -> list[DatasetItem]:
    """Render n pseudo-ground-truth RGB images at sampled poses."""
    t_near, t_far = dataset_range
    items = []
    for _ in range(n):
        pose = pose_sampler(rng)
        frame, _ = render_frame(field, pose, intr, march, t_near, t_far, occ=occ)
        rgb = np.clip(frame.features[..., :3], 0.0, 1.0)
        items.append(DatasetItem(image=rgb, pose=pose, tag="pseudo"))
    return items


# ------------------------------------------------------------ full runs


@dataclass
class TrainResult:
    """Final model plus the field as it stood before joint training.

    Joint steps mutate the field in place toward the best *pipeline*
    output, which can move it off its own photometric optimum; the
    pretrain snapshot preserves that state for evaluation or reuse.
    """

    field: VoxelField
    renderer: ConvRenderer
    occ: OccupancyGrid | None
    pretrain_curve: list[float]
    joint_curve: list[float]
    pretrain_field: VoxelField | None = None
    pretrain_occ: OccupancyGrid | None = None


def run_training(
    dataset: PosedImageDataset,
    cfg: TrainConfig,
    log_file=None,
    renderer_plan=None,
) -> TrainResult:
    """Pretrain the field, then jointly train field + renderer."""
    from .neural_render import default_plan, init_renderer, renderer_input_channels

    if dataset.bounds_lo is not None:
        bounds = (dataset.bounds_lo, dataset.bounds_hi)
    else:
        bounds = (np.full(3, -1.2), np.full(3, 1.2))
    field = VoxelField(cfg.field_resolution, bounds, k=cfg.k, seed=cfg.seed)
    center = (bounds[0] + bounds[1]) / 2.0
    radii = [np.linalg.norm(it.pose.camera_center() - center) for it in dataset.items]
    cfg.scene_radius = float(np.mean(radii))

    pre_curve, occ = pretrain(field, dataset, cfg, log_file=log_file)
    pretrain_field = copy.deepcopy(field)
    pretrain_occ = copy.deepcopy(occ)

    train_items = [it for it in dataset.items if it.tag != "test"]
    if cfg.distill_count > 0:
        rng_d = np.random.default_rng(cfg.seed + 7)
        from .scene import random_orbit_poses

        def sampler(r):
            return random_orbit_poses(center, cfg.scene_radius, 1, r)[0]

        train_items = train_items + distill(
            field, sampler, cfg.distill_count, dataset.intr,
            (dataset.t_near, dataset.t_far), cfg.march, rng_d, occ=occ,
        )

    plan = renderer_plan or default_plan(renderer_input_channels(cfg.k, cfg.l))
    renderer = init_renderer(cfg.seed + 1, plan)
    opt_field = Adam(cfg.lr_field, cfg.betas, cfg.eps)
    opt_renderer = Adam(cfg.lr_renderer, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    joint_curve: list[float] = []
    for it in range(cfg.iters_joint):
        item = train_items[int(rng.integers(0, len(train_items)))]
        loss = joint_step(
            field, occ, renderer, item.image, item.pose, dataset.intr,
            (dataset.t_near, dataset.t_far), cfg, rng, opt_field, opt_renderer,
        )
        joint_curve.append(loss)
        if (it + 1) % cfg.occ_interval == 0:
            occ = field.rebuild_occupancy(cfg.occ_resolution, cfg.occ_threshold)
        if log_file is not None and (it % 10 == 0 or it == cfg.iters_joint - 1):
            rec = {"phase": "joint", "iter": it, "loss": loss,
                   "psnr": min(-10.0 * math.log10(max(loss, 1e-12)), PSNR_CAP)}
            log_file.write(json.dumps(rec) + "\n")
    return TrainResult(field=field, renderer=renderer, occ=occ,
                       pretrain_curve=pre_curve, joint_curve=joint_curve,
                       pretrain_field=pretrain_field, pretrain_occ=pretrain_occ)


# --------------------------------------------------------- model persistence


def model_to_checkpoint(
    field: VoxelField, renderer: ConvRenderer, meta: dict | None = None
) -> Checkpoint:
    """Pack field and renderer parameters into one checkpoint.

    Block order is fixed (density, features, then conv weights and biases
    in plan order), so identical models serialize to identical bytes.
    """
    full = {
        "field_resolution": list(field.resolution),
        "bounds_lo": [float(v) for v in field.bounds_lo],
        "bounds_hi": [float(v) for v in field.bounds_hi],
        "k": field.k,
        "plan": plan_to_meta(renderer.plan),
    }
    if meta:
        full.update(meta)
    blocks = {
        "field.raw_density": field.raw_density,
        "field.features": field.features,
    }
    for spec in renderer.plan:
        blocks[f"renderer.w.{spec.name}"] = renderer.weights[spec.name]
        blocks[f"renderer.b.{spec.name}"] = renderer.biases[spec.name]
    return Checkpoint(meta=full, blocks=blocks)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[VoxelField, ConvRenderer]:
    """Rebuild the voxel field and renderer from a loaded checkpoint."""
    meta = ckpt.meta
    res = tuple(int(v) for v in meta["field_resolution"])
    k = int(meta["k"])
    field = VoxelField(
        res,
        (np.asarray(meta["bounds_lo"]), np.asarray(meta["bounds_hi"])),
        k=k,
    )
    dens = ckpt.blocks["field.raw_density"]
    feat = ckpt.blocks["field.features"]
    if dens.shape != res or feat.shape != res + (k,):
        raise ValueError("checkpoint block shapes disagree with declared resolution")
    field.raw_density = dens.astype(np.float64)
    field.features = feat.astype(np.float64)
    plan = plan_from_meta(meta["plan"])
    weights = {}
    biases = {}
    for spec in plan:
        weights[spec.name] = ckpt.blocks[f"renderer.w.{spec.name}"].astype(np.float64)
        biases[spec.name] = ckpt.blocks[f"renderer.b.{spec.name}"].astype(np.float64)
    return field, ConvRenderer(plan=plan, weights=weights, biases=biases)
