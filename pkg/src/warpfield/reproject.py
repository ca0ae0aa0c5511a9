"""Forward-warp of feature frames to a target view, and bilinear upsampling.

Warping treats the previous frame as a point cloud: every sufficiently
opaque low-res pixel is unprojected at its rendered depth, projected into
the target camera at target resolution, and scattered to the floor pixel
with a minimum-depth z-test.  Features are copied, never filtered, so
holes are real and are reported through a validity mask rather than
smeared over by interpolation.

Both the warp and the upsampler are linear in the feature values for a
fixed geometry, and each exposes its exact transpose for backpropagation.
Gradients flow through feature values only; pixel positions and depths
are frozen by the integer rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BEHIND_DEPTH_EPS, CameraIntrinsics, Pose, pixel_centers, project, unproject
from .volren import GUIDANCE_MIN_OPACITY, FeatureFrame


@dataclass
class WarpedFeatureMap:
    """Scatter result at target resolution.

    ``features`` are exact copies of source values (zero where invalid),
    ``zbuf`` holds the winning reprojected camera-space depth, and
    ``src_index`` the flat low-res index of the winning source pixel
    (-1 where invalid) so the transpose can route gradients back.
    """

    features: np.ndarray
    validity: np.ndarray
    zbuf: np.ndarray
    src_index: np.ndarray


def warp_to_highres(
    prev: FeatureFrame,
    cur_pose: Pose,
    intr_high: CameraIntrinsics,
    min_opacity: float = GUIDANCE_MIN_OPACITY,
) -> WarpedFeatureMap:
    """Project every valid pixel of ``prev`` into the target view.

    Ties in the z-test are broken toward the lower flat source index so
    the result is independent of traversal order.
    """
    h_l, w_l, k = prev.features.shape
    h, w = intr_high.height, intr_high.width
    features = np.zeros((h, w, k))
    validity = np.zeros((h, w), dtype=bool)
    zbuf = np.zeros((h, w))
    src_index = np.full((h, w), -1, dtype=np.int64)

    valid_src = (prev.opacity >= min_opacity).reshape(-1)
    if not np.any(valid_src):
        return WarpedFeatureMap(features, validity, zbuf, src_index)

    uv_src = pixel_centers(prev.intr).reshape(-1, 2)[valid_src]
    depth_src = prev.depth.reshape(-1)[valid_src]
    src_flat = np.nonzero(valid_src)[0]

    points = unproject(prev.intr, prev.pose, uv_src, depth_src)
    uv_tgt, z = project(intr_high, cur_pose, points)
    front = z > BEHIND_DEPTH_EPS
    px = np.floor(uv_tgt[:, 0]).astype(np.int64)
    py = np.floor(uv_tgt[:, 1]).astype(np.int64)
    keep = front & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    if not np.any(keep):
        return WarpedFeatureMap(features, validity, zbuf, src_index)

    px, py, z, src_flat = px[keep], py[keep], z[keep], src_flat[keep]
    tgt_flat = py * w + px
    # Sort by (target pixel, depth, source index) and keep the first entry
    # per pixel: the sequential min-depth scatter in deterministic form.
    order = np.lexsort((src_flat, z, tgt_flat))
    tgt_sorted = tgt_flat[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    win = order[first]

    wy, wx = py[win], px[win]
    validity[wy, wx] = True
    zbuf[wy, wx] = z[win]
    src_index[wy, wx] = src_flat[win]
    features[wy, wx] = prev.features.reshape(-1, k)[src_flat[win]]
    return WarpedFeatureMap(features, validity, zbuf, src_index)


def warp_backward(
    warped: WarpedFeatureMap, grad_features: np.ndarray, lowres_shape: tuple[int, int, int]
) -> np.ndarray:
    """Transpose of the feature copy: route target gradients to sources."""
    h_l, w_l, k = lowres_shape
    grad_prev = np.zeros((h_l * w_l, k))
    valid = warped.src_index >= 0
    np.add.at(grad_prev, warped.src_index[valid], grad_features[valid])
    return grad_prev.reshape(h_l, w_l, k)


def _axis_weights(n_in: int, s: int) -> np.ndarray:
    """Dense (n_in*s, n_in) bilinear interpolation matrix, center-aligned."""
    n_out = n_in * s
    if n_in == 1:
        return np.ones((n_out, 1))
    u = (np.arange(n_out) + 0.5) / s - 0.5
    i0 = np.clip(np.floor(u).astype(np.int64), 0, n_in - 2)
    frac = np.clip(u - i0, 0.0, 1.0)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def upsample(features: np.ndarray, s: int) -> np.ndarray:
    """Bilinear upsample (h, w, c) -> (s*h, s*w, c), edges clamped."""
    if s < 1:
        raise ValueError("upsample factor must be >= 1")
    if s == 1:
        return features.copy()
    h, w = features.shape[:2]
    my = _axis_weights(h, s)
    mx = _axis_weights(w, s)
    tmp = np.tensordot(my, features, axes=(1, 0))
    return np.tensordot(mx, tmp, axes=(1, 1)).transpose(1, 0, 2)


def upsample_backward(grad_out: np.ndarray, s: int, in_shape: tuple[int, int]) -> np.ndarray:
    """Exact transpose of :func:`upsample`."""
    if s == 1:
        return grad_out.copy()
    h, w = in_shape
    my = _axis_weights(h, s)
    mx = _axis_weights(w, s)
    tmp = np.tensordot(my.T, grad_out, axes=(1, 0))
    return np.tensordot(mx.T, tmp, axes=(1, 1)).transpose(1, 0, 2)
