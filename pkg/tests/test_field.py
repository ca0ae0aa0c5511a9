"""Voxel field interpolation, gradients, and occupancy.

The interpolation oracle below is a deliberately naive scalar
implementation (explicit 8-corner loop) kept independent from the
vectorized gather in the module.  Gradients are checked against central
finite differences in double precision.
"""

from __future__ import annotations

import numpy as np
import pytest

from warpfield.field import (
    OccupancyGrid,
    VoxelField,
    full_occupancy,
    softplus,
    softplus_inverse,
)


def _make_field(rng: np.random.Generator, res=(5, 4, 6), k=3) -> VoxelField:
    f = VoxelField(
        resolution=res,
        bounds=(np.array([-1.0, -0.5, 0.0]), np.array([1.0, 1.5, 3.0])),
        k=k,
        seed=0,
    )
    f.raw_density = rng.normal(size=res)
    f.features = rng.normal(size=res + (k,))
    return f


def _naive_query(f: VoxelField, p: np.ndarray) -> tuple[float, np.ndarray]:
    """Scalar 8-corner trilinear reference with post-interpolation softplus."""
    if np.any(p < f.bounds_lo) or np.any(p > f.bounds_hi):
        return 0.0, np.zeros(f.k)
    cell = (f.bounds_hi - f.bounds_lo) / np.array(f.resolution)
    u = (p - f.bounds_lo) / cell - 0.5
    i0 = np.clip(np.floor(u).astype(int), 0, np.array(f.resolution) - 2)
    w = np.clip(u - i0, 0.0, 1.0)
    raw = 0.0
    feat = np.zeros(f.k)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                weight = (
                    (w[0] if dx else 1 - w[0])
                    * (w[1] if dy else 1 - w[1])
                    * (w[2] if dz else 1 - w[2])
                )
                raw += weight * f.raw_density[i0[0] + dx, i0[1] + dy, i0[2] + dz]
                feat += weight * f.features[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return float(np.logaddexp(0.0, raw)), feat


class TestSoftplus:
    def test_round_trip(self):
        y = np.array([1e-6, 0.1, 1.0, 40.0, 900.0])
        np.testing.assert_allclose(softplus(softplus_inverse(y)), y, rtol=1e-9)

    def test_large_negative_is_tiny(self):
        assert softplus(np.array(-15.0)) < 1e-6


class TestQuery:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(21)
        f = _make_field(rng)
        pts = rng.uniform(-1.2, 3.2, size=(200, 3))  # mix of inside and outside
        sigma, feat = f.query(pts)
        for i in range(pts.shape[0]):
            s_ref, f_ref = _naive_query(f, pts[i])
            assert sigma[i] == pytest.approx(s_ref, abs=1e-12)
            np.testing.assert_allclose(feat[i], f_ref, atol=1e-12)

    def test_voxel_centers_exact(self):
        rng = np.random.default_rng(22)
        f = _make_field(rng)
        centers = f.voxel_centers().reshape(-1, 3)
        sigma, feat = f.query(centers)
        np.testing.assert_allclose(
            sigma, softplus(f.raw_density).reshape(-1), atol=1e-12
        )
        np.testing.assert_allclose(feat, f.features.reshape(-1, f.k), atol=1e-12)

    def test_outside_is_exactly_zero(self):
        rng = np.random.default_rng(23)
        f = _make_field(rng)
        sigma, feat = f.query(np.array([[5.0, 0.0, 0.0], [0.0, -2.0, 1.0]]))
        assert np.all(sigma == 0.0)
        assert np.all(feat == 0.0)

    def test_linear_ramp_matches_closed_form(self):
        # Raw density linear in x: interpolation reproduces the ramp, so
        # activated density is softplus of the linear value.
        f = VoxelField((8, 2, 2), (np.zeros(3), np.ones(3)), k=1)
        xs = f.voxel_centers()[..., 0]
        f.raw_density = 2.0 * xs - 0.7
        f.features = np.zeros(f.features.shape)
        rng = np.random.default_rng(24)
        cell = 1.0 / 8.0
        # Stay on the interior center lattice where the ramp is exact.
        pts = np.stack(
            [
                rng.uniform(cell / 2, 1 - cell / 2, 50),
                np.full(50, 0.5),
                np.full(50, 0.5),
            ],
            axis=-1,
        )
        sigma, _ = f.query(pts)
        np.testing.assert_allclose(sigma, softplus(2.0 * pts[:, 0] - 0.7), atol=1e-12)

    def test_scalar_point_shape(self):
        rng = np.random.default_rng(25)
        f = _make_field(rng)
        sigma, feat = f.query(np.array([0.0, 0.5, 1.0]))
        assert np.isscalar(sigma) or sigma.shape == ()
        assert feat.shape == (f.k,)


class TestQueryBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(26)
        f = _make_field(rng)
        pts = rng.uniform(-0.9, 0.9, size=(40, 3)) * np.array([1.0, 1.0, 1.0]) + np.array(
            [0.0, 0.5, 1.5]
        )
        gs = rng.normal(size=40)
        gf = rng.normal(size=(40, f.k))

        def loss() -> float:
            sigma, feat = f.query(pts)
            return float(np.dot(gs, sigma) + np.sum(gf * feat))

        grads = f.zero_grads()
        f.query_backward(pts, gs, gf, grads)

        h = 1e-5
        flat_idx = rng.choice(f.raw_density.size, size=12, replace=False)
        for fi in flat_idx:
            ix = np.unravel_index(fi, f.raw_density.shape)
            keep = f.raw_density[ix]
            f.raw_density[ix] = keep + h
            up = loss()
            f.raw_density[ix] = keep - h
            down = loss()
            f.raw_density[ix] = keep
            fd = (up - down) / (2 * h)
            assert grads.raw_density[ix] == pytest.approx(fd, rel=1e-6, abs=1e-9)
        flat_idx = rng.choice(f.features.size, size=12, replace=False)
        for fi in flat_idx:
            ix = np.unravel_index(fi, f.features.shape)
            keep = f.features[ix]
            f.features[ix] = keep + h
            up = loss()
            f.features[ix] = keep - h
            down = loss()
            f.features[ix] = keep
            fd = (up - down) / (2 * h)
            assert grads.features[ix] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_accumulates_across_calls(self):
        rng = np.random.default_rng(27)
        f = _make_field(rng)
        pts = rng.uniform(0.0, 1.0, size=(5, 3))
        gs = rng.normal(size=5)
        gf = rng.normal(size=(5, f.k))
        g1 = f.zero_grads()
        f.query_backward(pts, gs, gf, g1)
        g2 = f.zero_grads()
        f.query_backward(pts, gs, gf, g2)
        f.query_backward(pts, gs, gf, g2)
        np.testing.assert_allclose(g2.raw_density, 2 * g1.raw_density, atol=1e-14)
        np.testing.assert_allclose(g2.features, 2 * g1.features, atol=1e-14)

    def test_outside_points_contribute_nothing(self):
        rng = np.random.default_rng(28)
        f = _make_field(rng)
        grads = f.zero_grads()
        f.query_backward(
            np.array([[9.0, 9.0, 9.0]]), np.array([1.0]), np.ones((1, f.k)), grads
        )
        assert np.all(grads.raw_density == 0.0)
        assert np.all(grads.features == 0.0)


class TestOccupancy:
    def test_single_hot_voxel_marks_single_cell(self):
        f = VoxelField((16, 16, 16), (np.zeros(3), np.ones(3)), k=1)
        f.raw_density = np.full(f.raw_density.shape, -15.0)
        f.raw_density[5, 9, 14] = 3.0
        occ = f.rebuild_occupancy(resolution=(4, 4, 4), threshold=0.01)
        expected = np.zeros((4, 4, 4), dtype=bool)
        expected[1, 2, 3] = True
        np.testing.assert_array_equal(occ.bits, expected)

    def test_indivisible_resolution_rejected(self):
        f = VoxelField((16, 16, 16), (np.zeros(3), np.ones(3)), k=1)
        with pytest.raises(ValueError):
            f.rebuild_occupancy(resolution=(5, 4, 4))

    def test_threshold_boundary_inclusive(self):
        f = VoxelField((4, 4, 4), (np.zeros(3), np.ones(3)), k=1)
        f.raw_density = np.zeros(f.raw_density.shape)
        # Threshold exactly equal to the stored activated density: the cell
        # must count as occupied (>=, not >).
        tau = float(softplus(np.array(0.0)))
        occ = f.rebuild_occupancy(resolution=(2, 2, 2), threshold=tau)
        assert occ.bits.all()

    def test_query_outside_bounds_unoccupied(self):
        f = VoxelField((4, 4, 4), (np.zeros(3), np.ones(3)), k=1)
        occ = full_occupancy(f, (2, 2, 2))
        res = occ.query(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [-0.1, 0.5, 0.5]]))
        np.testing.assert_array_equal(res, [True, False, False])

    def test_query_picks_correct_cell(self):
        bits = np.zeros((2, 2, 2), dtype=bool)
        bits[1, 0, 1] = True
        occ = OccupancyGrid(
            resolution=(2, 2, 2),
            bounds_lo=np.zeros(3),
            bounds_hi=np.ones(3),
            threshold=0.01,
            bits=bits,
        )
        assert occ.query(np.array([0.75, 0.25, 0.75]))
        assert not occ.query(np.array([0.25, 0.25, 0.75]))


class TestInit:
    def test_defaults(self):
        f = VoxelField((8, 8, 8), (np.zeros(3), np.ones(3)), k=6, seed=3)
        assert np.all(f.raw_density == VoxelField.RAW_DENSITY_INIT)
        assert f.features.shape == (8, 8, 8, 6)
        assert np.abs(f.features).max() <= VoxelField.FEATURE_INIT_SPAN
        again = VoxelField((8, 8, 8), (np.zeros(3), np.ones(3)), k=6, seed=3)
        np.testing.assert_array_equal(f.features, again.features)

    def test_validation(self):
        with pytest.raises(ValueError):
            VoxelField((1, 8, 8), (np.zeros(3), np.ones(3)), k=1)
        with pytest.raises(ValueError):
            VoxelField((8, 8, 8), (np.ones(3), np.zeros(3)), k=1)
        with pytest.raises(ValueError):
            VoxelField((8, 8, 8), (np.zeros(3), np.ones(3)), k=0)
