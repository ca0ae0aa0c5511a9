"""Convolutional renderer: forward anchors, exact gradients, init stats."""

from __future__ import annotations

import numpy as np
import pytest

from warpfield.neural_render import (
    ConvRenderer,
    ConvSpec,
    backward,
    default_plan,
    forward,
    init_renderer,
    plan_from_meta,
    plan_to_meta,
    renderer_input_channels,
)


def _renderer(c_in=5, seed=0):
    return init_renderer(seed, default_plan(c_in))


class TestForward:
    def test_zero_weights_give_half_gray(self):
        r = _renderer()
        for name in r.weights:
            r.weights[name][:] = 0.0
        img, _ = forward(r, np.random.default_rng(0).normal(size=(16, 16, 5)))
        np.testing.assert_allclose(img, 0.5, atol=1e-15)

    def test_output_shape_and_range(self):
        r = _renderer()
        rng = np.random.default_rng(1)
        for h, w in ((16, 16), (24, 32), (64, 48)):
            img, _ = forward(r, rng.normal(size=(h, w, 5)))
            assert img.shape == (h, w, 3)
            assert np.all(img > 0.0) and np.all(img < 1.0)

    def test_channel_mismatch_rejected(self):
        r = _renderer(c_in=5)
        with pytest.raises(ValueError, match="channels"):
            forward(r, np.zeros((16, 16, 4)))

    def test_size_not_divisible_rejected(self):
        r = _renderer()
        with pytest.raises(ValueError, match="divisible"):
            forward(r, np.zeros((18, 16, 5)))

    def test_deterministic(self):
        r = _renderer()
        x = np.random.default_rng(2).normal(size=(16, 16, 5))
        a, _ = forward(r, x)
        b, _ = forward(r, x)
        np.testing.assert_array_equal(a, b)

    def test_translation_equivariance_interior(self):
        r = _renderer(seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(64, 64, 5))
        shifted = np.roll(x, (4, 4), axis=(0, 1))
        out, _ = forward(r, x)
        out_s, _ = forward(r, shifted)
        # Receptive field radius is about 20 px; compare a central band
        # where neither version sees the zero padding or the wrap.
        sl = slice(28, 36)
        np.testing.assert_allclose(
            out_s[sl, sl], np.roll(out, (4, 4), axis=(0, 1))[sl, sl], atol=1e-12
        )


class TestBackward:
    def test_weight_gradients_match_fd(self):
        r = _renderer(seed=5)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(16, 16, 5))
        g = rng.normal(size=(16, 16, 3))

        def loss():
            img, _ = forward(r, x)
            return float(np.sum(g * img))

        img, cache = forward(r, x)
        grads, _ = backward(r, cache, g)
        h = 1e-5
        checked = 0
        for name in ("full0", "down2", "mid1", "up0", "out"):
            w = r.weights[name]
            flat = rng.choice(w.size, size=4, replace=False)
            for fi in flat:
                ix = np.unravel_index(fi, w.shape)
                keep = w[ix]
                w[ix] = keep + h
                up = loss()
                w[ix] = keep - h
                down = loss()
                w[ix] = keep
                fd = (up - down) / (2 * h)
                assert grads.weights[name][ix] == pytest.approx(fd, rel=1e-4, abs=1e-8)
                checked += 1
        assert checked == 20

    def test_bias_gradients_match_fd(self):
        r = _renderer(seed=7)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(16, 16, 5))
        g = rng.normal(size=(16, 16, 3))
        _, cache = forward(r, x)
        grads, _ = backward(r, cache, g)
        h = 1e-5
        for name in ("full0", "out"):
            b = r.biases[name]
            for i in range(min(2, b.size)):
                keep = b[i]
                b[i] = keep + h
                up = float(np.sum(g * forward(r, x)[0]))
                b[i] = keep - h
                down = float(np.sum(g * forward(r, x)[0]))
                b[i] = keep
                fd = (up - down) / (2 * h)
                assert grads.biases[name][i] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_input_gradients_match_fd(self):
        r = _renderer(seed=9)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(16, 16, 5))
        g = rng.normal(size=(16, 16, 3))
        _, cache = forward(r, x)
        _, grad_x = backward(r, cache, g)
        h = 1e-5
        flat = rng.choice(x.size, size=20, replace=False)
        for fi in flat:
            ix = np.unravel_index(fi, x.shape)
            keep = x[ix]
            x[ix] = keep + h
            up = float(np.sum(g * forward(r, x)[0]))
            x[ix] = keep - h
            down = float(np.sum(g * forward(r, x)[0]))
            x[ix] = keep
            fd = (up - down) / (2 * h)
            assert grad_x[ix] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_zero_grad_out_gives_zero(self):
        r = _renderer(seed=11)
        x = np.random.default_rng(12).normal(size=(16, 16, 5))
        _, cache = forward(r, x)
        grads, grad_x = backward(r, cache, np.zeros((16, 16, 3)))
        np.testing.assert_array_equal(grad_x, 0.0)
        for name in grads.weights:
            np.testing.assert_array_equal(grads.weights[name], 0.0)

    def test_single_identity_conv_chain_rule(self):
        plan = [ConvSpec("only", 1, 1, activation="sigmoid")]
        r = ConvRenderer(
            plan=plan,
            weights={"only": np.zeros((1, 1, 3, 3))},
            biases={"only": np.zeros(1)},
        )
        r.weights["only"][0, 0, 1, 1] = 1.0  # identity kernel
        rng = np.random.default_rng(13)
        x = rng.normal(size=(8, 8, 1))
        g = rng.normal(size=(8, 8, 1))
        y, cache = forward(r, x)
        np.testing.assert_allclose(y, 1.0 / (1.0 + np.exp(-x)), atol=1e-15)
        _, grad_x = backward(r, cache, g)
        np.testing.assert_allclose(grad_x, g * y * (1.0 - y), atol=1e-15)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_renderer(4, default_plan(9))
        b = init_renderer(4, default_plan(9))
        for name in a.weights:
            np.testing.assert_array_equal(a.weights[name], b.weights[name])

    def test_different_seeds_differ(self):
        a = init_renderer(0, default_plan(9))
        b = init_renderer(1, default_plan(9))
        assert any(
            not np.array_equal(a.weights[n], b.weights[n]) for n in a.weights
        )

    def test_kaiming_variance(self):
        r = init_renderer(5, default_plan(20))
        w = r.weights["mid0"]  # 64 x 64 x 3 x 3
        target = 2.0 / (64 * 9)
        assert np.var(w) == pytest.approx(target, rel=0.2)

    def test_biases_zero(self):
        r = init_renderer(6, default_plan(7))
        for b in r.biases.values():
            np.testing.assert_array_equal(b, 0.0)


class TestPlan:
    def test_input_channel_formula(self):
        assert renderer_input_channels(6, 2) == 2 * 7 + 6
        assert renderer_input_channels(3, 0) == 3

    def test_plan_meta_round_trip(self):
        plan = default_plan(20)
        assert plan_from_meta(plan_to_meta(plan)) == plan

    def test_default_plan_channel_chain(self):
        plan = default_plan(20)
        assert plan[0].in_ch == 20
        assert plan[-1].out_ch == 3
        # Nine convolutions, two of them strided, two with skips.
        assert len(plan) == 9
        assert sum(1 for s in plan if s.stride == 2) == 2
        assert sum(1 for s in plan if s.skip_from) == 2
