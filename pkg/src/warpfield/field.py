"""Dense voxel field with trilinear interpolation and an occupancy grid.

The field stores one raw density channel and ``k`` feature channels on a
regular grid of voxel centers inside an axis-aligned bounding box.  Raw
values are interpolated trilinearly and density is activated afterwards
with a softplus, so interpolated density is always positive and smooth in
the query point and in every stored value.  Queries outside the box return
exactly zero density and zero features.

A coarse boolean occupancy grid marks cells whose enclosed fine voxels all
fall below an activated-density threshold; the ray marcher skips samples
in unoccupied cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    """Inverse of softplus for y > 0: log(exp(y) - 1), stable for large y."""
    y = np.asarray(y, dtype=np.float64)
    # y + log(1 - exp(-y)); the log1p form is stable for small y too.
    with np.errstate(divide="ignore"):
        return y + np.log1p(-np.exp(-y))


@dataclass
class FieldGrads:
    """Gradient accumulators matching VoxelField parameter shapes."""

    raw_density: np.ndarray
    features: np.ndarray

    def zero_(self) -> None:
        self.raw_density.fill(0.0)
        self.features.fill(0.0)


@dataclass
class OccupancyGrid:
    """Coarse boolean grid over the field bounds used for empty-space skipping."""

    resolution: tuple[int, int, int]
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    threshold: float
    bits: np.ndarray  # bool, shape == resolution

    def query(self, points: np.ndarray) -> np.ndarray:
        """True where ``points`` (..., 3) fall inside an occupied cell."""
        res = np.asarray(self.resolution, dtype=np.float64)
        rel = (points - self.bounds_lo) / (self.bounds_hi - self.bounds_lo)
        idx = np.floor(rel * res).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.resolution)), axis=-1)
        idx_clamped = np.clip(idx, 0, np.asarray(self.resolution) - 1)
        occ = self.bits[idx_clamped[..., 0], idx_clamped[..., 1], idx_clamped[..., 2]]
        return occ & inside


class VoxelField:
    """Trilinearly interpolated density + feature grid.

    Args:
        resolution: (nx, ny, nz) voxel counts per axis.
        bounds: (lo, hi) pair of 3-vectors delimiting the box.
        k: number of feature channels.
        seed: seed for the feature initialization draw.

    Raw density starts at a constant (near-transparent after softplus) and
    features start as small uniform noise.
    """

    RAW_DENSITY_INIT = -2.0
    FEATURE_INIT_SPAN = 0.05

    def __init__(
        self,
        resolution: tuple[int, int, int],
        bounds: tuple[np.ndarray, np.ndarray],
        k: int,
        seed: int = 0,
    ) -> None:
        nx, ny, nz = (int(v) for v in resolution)
        if min(nx, ny, nz) < 2:
            raise ValueError("need at least 2 voxels per axis")
        if k < 1:
            raise ValueError("need at least one feature channel")
        lo = np.asarray(bounds[0], dtype=np.float64).copy()
        hi = np.asarray(bounds[1], dtype=np.float64).copy()
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("bounds must be 3-vectors with hi > lo")
        self.resolution = (nx, ny, nz)
        self.bounds_lo = lo
        self.bounds_hi = hi
        self.k = int(k)
        rng = np.random.default_rng(seed)
        self.raw_density = np.full((nx, ny, nz), self.RAW_DENSITY_INIT, dtype=np.float64)
        self.features = rng.uniform(
            -self.FEATURE_INIT_SPAN, self.FEATURE_INIT_SPAN, size=(nx, ny, nz, k)
        )

    # ---------------------------------------------------------------- helpers

    def voxel_size(self) -> np.ndarray:
        return (self.bounds_hi - self.bounds_lo) / np.asarray(self.resolution)

    def voxel_centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) world coordinates of all voxel centers."""
        axes = [
            self.bounds_lo[a]
            + (np.arange(self.resolution[a]) + 0.5) * self.voxel_size()[a]
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def zero_grads(self) -> FieldGrads:
        return FieldGrads(
            raw_density=np.zeros_like(self.raw_density),
            features=np.zeros_like(self.features),
        )

    def _interp_setup(
        self, points: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Corner gather indices and weights for (m, 3) points.

        Returns:
            (inside, flat_idx, weights, _) where flat_idx and weights have
            shape (m, 8).  Points outside the bounds get inside = False and
            zero weights.
        """
        pts = np.asarray(points, dtype=np.float64)
        res = np.asarray(self.resolution)
        inside = np.all((pts >= self.bounds_lo) & (pts <= self.bounds_hi), axis=-1)
        # Continuous voxel-center coordinates: center of voxel i sits at i.
        u = (pts - self.bounds_lo) / self.voxel_size() - 0.5
        i0 = np.floor(u).astype(np.int64)
        i0 = np.clip(i0, 0, res - 2)
        frac = np.clip(u - i0, 0.0, 1.0)
        wx, wy, wz = frac[..., 0], frac[..., 1], frac[..., 2]
        w = np.empty(pts.shape[:-1] + (8,), dtype=np.float64)
        w[..., 0] = (1 - wx) * (1 - wy) * (1 - wz)
        w[..., 1] = (1 - wx) * (1 - wy) * wz
        w[..., 2] = (1 - wx) * wy * (1 - wz)
        w[..., 3] = (1 - wx) * wy * wz
        w[..., 4] = wx * (1 - wy) * (1 - wz)
        w[..., 5] = wx * (1 - wy) * wz
        w[..., 6] = wx * wy * (1 - wz)
        w[..., 7] = wx * wy * wz
        w *= inside[..., None]
        _, ny, nz = self.resolution
        base = (i0[..., 0] * ny + i0[..., 1]) * nz + i0[..., 2]
        offsets = np.array(
            [0, 1, nz, nz + 1, ny * nz, ny * nz + 1, ny * nz + nz, ny * nz + nz + 1],
            dtype=np.int64,
        )
        flat = base[..., None] + offsets
        return inside, flat, w, frac

    # ----------------------------------------------------------------- query

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Activated density and features at world points (..., 3).

        Returns:
            (sigma, features) with shapes (...,) and (..., k).  Both are
            exactly zero outside the bounds.
        """
        pts = np.asarray(points, dtype=np.float64)
        scalar = pts.ndim == 1
        pts = np.atleast_2d(pts)
        inside, flat, w, _ = self._interp_setup(pts)
        raw = self.raw_density.reshape(-1)[flat]  # (m, 8)
        raw_interp = np.einsum("mc,mc->m", raw, w)
        sigma = np.where(inside, softplus(raw_interp), 0.0)
        feats = self.features.reshape(-1, self.k)[flat]  # (m, 8, k)
        f = np.einsum("mck,mc->mk", feats, w)
        f = np.where(inside[..., None], f, 0.0)
        if scalar:
            return sigma[0], f[0]
        return sigma, f

    def query_backward(
        self,
        points: np.ndarray,
        grad_sigma: np.ndarray,
        grad_features: np.ndarray,
        grads: FieldGrads,
    ) -> None:
        """Accumulate parameter gradients for a batch of query results.

        Args:
            points: (m, 3) query positions (same as the forward call).
            grad_sigma: (m,) upstream gradient on activated density.
            grad_features: (m, k) upstream gradient on features.
            grads: accumulators updated in place.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        gs = np.atleast_1d(np.asarray(grad_sigma, dtype=np.float64))
        gf = np.atleast_2d(np.asarray(grad_features, dtype=np.float64))
        inside, flat, w, _ = self._interp_setup(pts)
        raw = self.raw_density.reshape(-1)[flat]
        raw_interp = np.einsum("mc,mc->m", raw, w)
        # d softplus / d raw = sigmoid
        sig = 1.0 / (1.0 + np.exp(-raw_interp))
        g_raw_corner = (gs * sig * inside)[:, None] * w  # (m, 8)
        n_total = self.raw_density.size
        grads.raw_density += np.bincount(
            flat.ravel(), weights=g_raw_corner.ravel(), minlength=n_total
        ).reshape(self.raw_density.shape)
        # Features are linear in the stored values.
        g_feat_corner = w[..., None] * gf[:, None, :]  # (m, 8, k)
        k = self.k
        flat_k = (flat[..., None] * k + np.arange(k)).ravel()
        grads.features += np.bincount(
            flat_k, weights=g_feat_corner.ravel(), minlength=n_total * k
        ).reshape(self.features.shape)

    # ------------------------------------------------------------- occupancy

    def rebuild_occupancy(
        self, resolution: tuple[int, int, int] = (16, 16, 16), threshold: float = 0.01
    ) -> OccupancyGrid:
        """Mark coarse cells whose max enclosed activated density >= threshold.

        Each coarse cell must enclose an integer number of fine voxels per
        axis, otherwise a ValueError is raised.
        """
        res = tuple(int(v) for v in resolution)
        factors = []
        for a in range(3):
            if self.resolution[a] % res[a] != 0:
                raise ValueError(
                    f"occupancy resolution {res} does not divide field {self.resolution}"
                )
            factors.append(self.resolution[a] // res[a])
        sigma = softplus(self.raw_density)
        fx, fy, fz = factors
        blocks = sigma.reshape(res[0], fx, res[1], fy, res[2], fz)
        cell_max = blocks.max(axis=(1, 3, 5))
        return OccupancyGrid(
            resolution=res,
            bounds_lo=self.bounds_lo.copy(),
            bounds_hi=self.bounds_hi.copy(),
            threshold=float(threshold),
            bits=cell_max >= threshold,
        )


def full_occupancy(field: VoxelField, resolution: tuple[int, int, int] = (1, 1, 1)) -> OccupancyGrid:
    """An occupancy grid with every cell marked occupied (skipping disabled)."""
    return OccupancyGrid(
        resolution=tuple(int(v) for v in resolution),
        bounds_lo=field.bounds_lo.copy(),
        bounds_hi=field.bounds_hi.copy(),
        threshold=0.0,
        bits=np.ones(resolution, dtype=bool),
    )
