"""Procedural test scenes, an analytic reference renderer, and dataset I/O.

An AnalyticScene is a list of constant-density primitives in vacuum.  Its
renderer integrates the same quadrature as the ray marcher but evaluates
density and color analytically, which makes it a trustworthy reference:
disagreements with the voxel path isolate interpolation or guidance bugs
rather than quadrature differences.

Datasets are stored as a ``transforms.json`` (intrinsics either as
fl_x/fl_y/cx/cy or as a field of view, plus per-frame camera-to-world
matrices) next to PNG frames.  RGBA frames are composited over black.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from .field import VoxelField, softplus_inverse
from .geometry import (
    CameraIntrinsics,
    Pose,
    camera_z_factor,
    generate_rays,
    look_at_pose,
    pixel_centers,
)

# Raw-density floor used when baking vacuum into a field.
BAKE_RAW_FLOOR = -15.0


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    sigma: float
    color: np.ndarray

    def contains(self, points: np.ndarray) -> np.ndarray:
        d2 = np.sum((points - np.asarray(self.center)) ** 2, axis=-1)
        return d2 <= self.radius * self.radius

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class AxisBox:
    lo: np.ndarray
    hi: np.ndarray
    sigma: float
    color: np.ndarray

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((points >= lo) & (points <= hi), axis=-1)

    def distance(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        outside = np.maximum(np.maximum(lo - points, points - hi), 0.0)
        return np.linalg.norm(outside, axis=-1)


@dataclass
class AnalyticScene:
    """Primitives in vacuum; the first primitive containing a point wins."""

    primitives: list
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density (...,) and color (..., 3) at world points (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(points.shape[:-1])
        color = np.zeros(points.shape[:-1] + (3,))
        unset = np.ones(points.shape[:-1], dtype=bool)
        for prim in self.primitives:
            hit = prim.contains(points) & unset
            sigma[hit] = prim.sigma
            color[hit] = np.asarray(prim.color)
            unset &= ~hit
        return sigma, color

    def center(self) -> np.ndarray:
        return (self.bounds_lo + self.bounds_hi) / 2.0

    def circumradius(self) -> float:
        return float(np.linalg.norm(self.bounds_hi - self.center()))


def make_scene(preset: str, sigma0: float = 60.0) -> AnalyticScene:
    """Build one of the procedural presets: spheres, boxes, or mixed."""
    lo = np.array([-1.2, -1.2, -1.2])
    hi = np.array([1.2, 1.2, 1.2])
    spheres = [
        Sphere(np.array([-0.45, -0.25, 0.1]), 0.5, sigma0, np.array([0.9, 0.25, 0.2])),
        Sphere(np.array([0.5, 0.35, -0.15]), 0.38, sigma0, np.array([0.2, 0.55, 0.9])),
        Sphere(np.array([0.15, -0.5, -0.45]), 0.3, sigma0, np.array([0.95, 0.85, 0.3])),
    ]
    boxes = [
        AxisBox(
            np.array([-0.75, 0.15, -0.5]),
            np.array([-0.15, 0.75, 0.15]),
            sigma0,
            np.array([0.3, 0.8, 0.35]),
        ),
        AxisBox(
            np.array([0.1, -0.8, 0.25]),
            np.array([0.8, -0.2, 0.75]),
            sigma0,
            np.array([0.7, 0.4, 0.85]),
        ),
    ]
    if preset == "spheres":
        prims = spheres
    elif preset == "boxes":
        prims = boxes
    elif preset == "mixed":
        prims = [spheres[0], boxes[0], spheres[2], boxes[1]]
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return AnalyticScene(primitives=prims, bounds_lo=lo, bounds_hi=hi)


def single_sphere_scene(sigma0: float = 80.0) -> AnalyticScene:
    """One centered opaque sphere; the standard guidance test subject."""
    return AnalyticScene(
        primitives=[Sphere(np.array([0.0, 0.0, 0.0]), 0.7, sigma0, np.array([0.85, 0.4, 0.3]))],
        bounds_lo=np.array([-1.2, -1.2, -1.2]),
        bounds_hi=np.array([1.2, 1.2, 1.2]),
    )


def oracle_render(
    scene: AnalyticScene,
    pose: Pose,
    intr: CameraIntrinsics,
    t_near: float,
    t_far: float,
    step: float,
    chunk: int = 8192,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reference volume render of an analytic scene.

    Integrates alpha = 1 - exp(-sigma * step) with transmittance-weighted
    accumulation over the full [t_near, t_far) range, no skipping, no early
    exit.  Returns (rgb, depth, opacity) where depth is camera-space z.

    Kept intentionally independent of the voxel-field marcher.
    """
    uv = pixel_centers(intr).reshape(-1, 2)
    origins, dirs = generate_rays(intr, pose, uv)
    zf = camera_z_factor(intr, uv)
    n = int(math.ceil((t_far - t_near) / step))
    ts = t_near + (np.arange(n) + 0.5) * step
    rgb = np.zeros((uv.shape[0], 3))
    depth = np.zeros(uv.shape[0])
    opacity = np.zeros(uv.shape[0])
    for start in range(0, uv.shape[0], chunk):
        sl = slice(start, start + chunk)
        pos = origins[sl, None, :] + ts[None, :, None] * dirs[sl, None, :]
        sigma, color = scene.sample(pos)
        alpha = 1.0 - np.exp(-sigma * step)
        trans = np.cumprod(1.0 - alpha, axis=1)
        t_excl = np.concatenate([np.ones((alpha.shape[0], 1)), trans[:, :-1]], axis=1)
        w = t_excl * alpha
        rgb[sl] = np.sum(w[..., None] * color, axis=1)
        depth[sl] = np.sum(w * ts, axis=1) * zf[sl]
        opacity[sl] = 1.0 - trans[:, -1]
    h, wd = intr.height, intr.width
    return rgb.reshape(h, wd, 3), depth.reshape(h, wd), opacity.reshape(h, wd)


def bake(scene: AnalyticScene, resolution: tuple[int, int, int], k: int) -> VoxelField:
    """Sample the analytic scene onto a voxel field.

    Density is inverted through the softplus (floored at BAKE_RAW_FLOOR for
    vacuum); color goes to feature channels 0..2, remaining channels to 0.
    """
    if k < 3:
        raise ValueError("baking needs at least 3 feature channels for color")
    field = VoxelField(resolution, (scene.bounds_lo, scene.bounds_hi), k=k)
    centers = field.voxel_centers()
    sigma, color = scene.sample(centers)
    raw = np.full(sigma.shape, BAKE_RAW_FLOOR)
    pos = sigma > 0
    raw[pos] = np.maximum(softplus_inverse(sigma[pos]), BAKE_RAW_FLOOR)
    # Vacuum voxels take the color of the nearest primitive so that surface
    # samples interpolate against the surface color, not against black.
    # They have zero density, so this never shows where nothing is hit.
    vac = ~pos
    if scene.primitives and np.any(vac):
        pts = centers[vac]
        dists = np.stack([prim.distance(pts) for prim in scene.primitives])
        nearest = np.argmin(dists, axis=0)
        palette = np.stack([np.asarray(prim.color, dtype=np.float64) for prim in scene.primitives])
        color[vac] = palette[nearest]
    field.raw_density = raw
    field.features = np.zeros(field.features.shape)
    field.features[..., :3] = color
    return field


# --------------------------------------------------------------------- poses


def orbit_trajectory(
    center: np.ndarray, radius: float, elevation_deg: float, n: int
) -> list[Pose]:
    """Evenly spaced look-at poses on a constant-elevation orbit (z up)."""
    center = np.asarray(center, dtype=np.float64)
    theta = math.radians(elevation_deg)
    poses = []
    for i in range(n):
        phi = 2.0 * math.pi * i / n
        eye = center + radius * np.array(
            [math.cos(phi) * math.cos(theta), math.sin(phi) * math.cos(theta), math.sin(theta)]
        )
        poses.append(look_at_pose(eye, center, up=[0.0, 0.0, 1.0]))
    return poses


def random_orbit_poses(
    center: np.ndarray,
    radius: float,
    n: int,
    rng: np.random.Generator,
    elevation_range_deg: tuple[float, float] = (15.0, 65.0),
) -> list[Pose]:
    """Random upper-hemisphere look-at poses at fixed radius."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for _ in range(n):
        phi = rng.uniform(0.0, 2.0 * math.pi)
        theta = math.radians(rng.uniform(*elevation_range_deg))
        eye = center + radius * np.array(
            [math.cos(phi) * math.cos(theta), math.sin(phi) * math.cos(theta), math.sin(theta)]
        )
        poses.append(look_at_pose(eye, center, up=[0.0, 0.0, 1.0]))
    return poses


def suggest_range(scene: AnalyticScene, radius: float) -> tuple[float, float]:
    """Conservative (t_near, t_far) covering the scene box from orbit distance."""
    r = scene.circumradius() * 1.15
    return max(0.05, radius - r), radius + r


# ------------------------------------------------------------------- dataset


@dataclass
class DatasetItem:
    image: np.ndarray  # (h, w, 3) float in [0, 1]
    pose: Pose
    tag: str = "train"


@dataclass
class PosedImageDataset:
    intr: CameraIntrinsics
    items: list
    t_near: float
    t_far: float
    bounds_lo: np.ndarray | None = None
    bounds_hi: np.ndarray | None = None


def make_dataset(
    scene: AnalyticScene,
    n_views: int,
    intr: CameraIntrinsics,
    radius: float,
    step: float,
    seed: int,
    tag: str = "train",
) -> PosedImageDataset:
    """Render ``n_views`` oracle images from random upper-hemisphere poses."""
    rng = np.random.default_rng(seed)
    t_near, t_far = suggest_range(scene, radius)
    items = []
    for pose in random_orbit_poses(scene.center(), radius, n_views, rng):
        rgb, _, _ = oracle_render(scene, pose, intr, t_near, t_far, step)
        items.append(DatasetItem(image=rgb, pose=pose, tag=tag))
    return PosedImageDataset(
        intr=intr,
        items=items,
        t_near=t_near,
        t_far=t_far,
        bounds_lo=scene.bounds_lo.copy(),
        bounds_hi=scene.bounds_hi.copy(),
    )


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: str, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def load_image(path: str) -> np.ndarray:
    """Load a PNG as float RGB in [0, 1]; alpha is composited over black."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] == 4:
        arr = arr[..., :3] * arr[..., 3:4]
    return arr[..., :3]


def save_dataset(ds: PosedImageDataset, out_dir: str) -> None:
    """Write transforms.json plus one PNG per frame."""
    os.makedirs(out_dir, exist_ok=True)
    frames = []
    for i, item in enumerate(ds.items):
        name = f"frame_{i:05d}.png"
        save_image(os.path.join(out_dir, name), item.image)
        frames.append(
            {
                "file_path": name,
                "transform_matrix": item.pose.to_camera_to_world().tolist(),
                "tag": item.tag,
            }
        )
    meta = {
        "fl_x": ds.intr.fx,
        "fl_y": ds.intr.fy,
        "cx": ds.intr.cx,
        "cy": ds.intr.cy,
        "w": ds.intr.width,
        "h": ds.intr.height,
        "near": ds.t_near,
        "far": ds.t_far,
        "frames": frames,
    }
    if ds.bounds_lo is not None:
        meta["aabb"] = [ds.bounds_lo.tolist(), ds.bounds_hi.tolist()]
    with open(os.path.join(out_dir, "transforms.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def load_posed_image_dataset(data_dir: str) -> PosedImageDataset:
    """Load a transforms.json dataset directory.

    Intrinsics come from fl_x/fl_y/cx/cy when present, otherwise from
    camera_angle_x as fx = w / (2 tan(fov_x / 2)) with centered principal
    point.  Image sizes must match the declared intrinsics.
    """
    path = os.path.join(data_dir, "transforms.json")
    with open(path) as fh:
        meta = json.load(fh)
    if not meta.get("frames"):
        raise ValueError(f"{path} declares no frames")
    first = load_image(os.path.join(data_dir, meta["frames"][0]["file_path"]))
    h, w = first.shape[:2]
    w = int(meta.get("w", w))
    h = int(meta.get("h", h))
    if "fl_x" in meta:
        fx = float(meta["fl_x"])
        fy = float(meta.get("fl_y", fx))
    elif "camera_angle_x" in meta:
        fx = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
        fy = fx
    else:
        raise ValueError("transforms.json lacks fl_x and camera_angle_x")
    cx = float(meta.get("cx", w / 2.0))
    cy = float(meta.get("cy", h / 2.0))
    intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)
    items = []
    for frame in meta["frames"]:
        img = load_image(os.path.join(data_dir, frame["file_path"]))
        if img.shape[:2] != (h, w):
            raise ValueError(
                f"{frame['file_path']} is {img.shape[1]}x{img.shape[0]}, "
                f"intrinsics declare {w}x{h}"
            )
        pose = Pose.from_camera_to_world(np.asarray(frame["transform_matrix"]))
        items.append(DatasetItem(image=img, pose=pose, tag=frame.get("tag", "train")))
    aabb = meta.get("aabb")
    return PosedImageDataset(
        intr=intr,
        items=items,
        t_near=float(meta.get("near", 0.05)),
        t_far=float(meta.get("far", 10.0)),
        bounds_lo=None if aabb is None else np.asarray(aabb[0], dtype=np.float64),
        bounds_hi=None if aabb is None else np.asarray(aabb[1], dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Checkpoint persistence
#
# Layout: a little-endian u32 byte length, a UTF-8 JSON header, then the
# parameter blocks as raw little-endian float32, concatenated in the order
# the header declares.  The header records each block's shape and byte
# length so a reader can validate the file without trusting its size.


CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """The file declares a format version this reader does not support."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the header could be read."""


class CheckpointLengthError(CheckpointError):
    """Block bytes disagree with the lengths the header declares."""


@dataclass
class Checkpoint:
    """Named float32 parameter blocks plus a free-form metadata dict.

    Blocks keep insertion order; that order is the on-disk order.  Arrays
    are float32 so that save -> load -> save is byte-identical.
    """

    meta: dict
    blocks: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        self.blocks = {
            name: np.ascontiguousarray(arr, dtype="<f4")
            for name, arr in self.blocks.items()
        }


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "meta": ckpt.meta,
        "blocks": [
            {"name": name, "shape": list(arr.shape), "nbytes": arr.nbytes}
            for name, arr in ckpt.blocks.items()
        ],
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for arr in ckpt.blocks.values():
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise CheckpointTruncatedError(f"{path}: missing header length")
        (header_len,) = struct.unpack("<I", raw_len)
        payload = fh.read(header_len)
        if len(payload) < header_len:
            raise CheckpointTruncatedError(f"{path}: header cut short")
        header = json.loads(payload.decode("utf-8"))
        version = header.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
            )
        blocks: dict[str, np.ndarray] = {}
        for entry in header["blocks"]:
            shape = tuple(int(n) for n in entry["shape"])
            expected = int(np.prod(shape, dtype=np.int64)) * 4
            if entry["nbytes"] != expected:
                raise CheckpointLengthError(
                    f"{path}: block {entry['name']!r} declares {entry['nbytes']} "
                    f"bytes, shape implies {expected}"
                )
            data = fh.read(expected)
            if len(data) < expected:
                raise CheckpointLengthError(
                    f"{path}: block {entry['name']!r} has {len(data)} of "
                    f"{expected} bytes"
                )
            blocks[entry["name"]] = np.frombuffer(data, dtype="<f4").reshape(shape)
        if fh.read(1):
            raise CheckpointLengthError(f"{path}: trailing bytes after last block")
    return Checkpoint(meta=header["meta"], blocks=blocks)
