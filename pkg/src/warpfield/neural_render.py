"""A small convolutional image renderer with hand-derived gradients.

Maps the stacked warped-and-upsampled feature planes to an RGB image in
(0, 1).  The default plan is a shallow U-Net that keeps most of its depth
at quarter resolution: one full-res conv, two stride-2 downsampling convs,
three quarter-res convs, two nearest-upsample+skip convs, and a sigmoid
output conv.

All convolutions are 3x3 with zero padding.  Forward and backward are
expressed as nine GEMMs per layer (one per kernel offset), which keeps
everything inside BLAS without materializing im2col buffers, and makes
the backward pass the literal transpose of the forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ConvSpec:
    """One convolution in the plan.

    ``upsample_before`` doubles the spatial size (nearest) before the conv;
    ``skip_from`` concatenates the named earlier layer's output after that.
    """

    name: str
    in_ch: int
    out_ch: int
    stride: int = 1
    activation: str = "lrelu"  # lrelu | sigmoid
    upsample_before: bool = False
    skip_from: str | None = None


def default_plan(c_in: int) -> list[ConvSpec]:
    """Shallow U-Net: depth concentrated at quarter resolution."""
    return [
        ConvSpec("full0", c_in, 16),
        ConvSpec("down1", 16, 32, stride=2),
        ConvSpec("down2", 32, 64, stride=2),
        ConvSpec("mid0", 64, 64),
        ConvSpec("mid1", 64, 64),
        ConvSpec("mid2", 64, 64),
        ConvSpec("up1", 64 + 32, 32, upsample_before=True, skip_from="down1"),
        ConvSpec("up0", 32 + 16, 16, upsample_before=True, skip_from="full0"),
        ConvSpec("out", 16, 3, activation="sigmoid"),
    ]


def plan_to_meta(plan: list[ConvSpec]) -> list[dict]:
    """JSON-friendly form for checkpoint headers."""
    return [
        {
            "name": s.name,
            "in_ch": s.in_ch,
            "out_ch": s.out_ch,
            "stride": s.stride,
            "activation": s.activation,
            "upsample_before": s.upsample_before,
            "skip_from": s.skip_from,
        }
        for s in plan
    ]


def plan_from_meta(meta: list[dict]) -> list[ConvSpec]:
    return [ConvSpec(**entry) for entry in meta]


@dataclass
class ConvRenderer:
    plan: list[ConvSpec]
    weights: dict[str, np.ndarray]  # name -> (out, in, 3, 3)
    biases: dict[str, np.ndarray]  # name -> (out,)

    @property
    def in_channels(self) -> int:
        return self.plan[0].in_ch

    def zero_grads(self) -> "ConvGrads":
        return ConvGrads(
            weights={k: np.zeros_like(v) for k, v in self.weights.items()},
            biases={k: np.zeros_like(v) for k, v in self.biases.items()},
        )


@dataclass
class ConvGrads:
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]


def renderer_input_channels(k: int, l: int) -> int:
    """Channel count: l warped maps with a validity channel each, plus the
    upsampled current map."""
    return l * (k + 1) + k


def init_renderer(seed: int, plan: list[ConvSpec]) -> ConvRenderer:
    """Kaiming fan-in normal weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights = {}
    biases = {}
    for s in plan:
        fan_in = s.in_ch * 9
        weights[s.name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(s.out_ch, s.in_ch, 3, 3))
        biases[s.name] = np.zeros(s.out_ch)
    return ConvRenderer(plan=plan, weights=weights, biases=biases)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    h, wd, _ = x.shape
    ho, wo = h // stride, wd // stride
    pad = np.zeros((h + 2, wd + 2, x.shape[2]))
    pad[1:-1, 1:-1] = x
    out = np.tile(b, (ho, wo, 1))
    for i in range(3):
        for j in range(3):
            window = pad[i : i + h : stride, j : j + wd : stride]
            out += window @ w[:, :, i, j].T
    return out


def _conv_backward(
    x: np.ndarray, w: np.ndarray, stride: int, g_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, wd, _ = x.shape
    pad = np.zeros((h + 2, wd + 2, x.shape[2]))
    pad[1:-1, 1:-1] = x
    g_pad = np.zeros_like(pad)
    g_w = np.zeros_like(w)
    for i in range(3):
        for j in range(3):
            window = pad[i : i + h : stride, j : j + wd : stride]
            g_w[:, :, i, j] = np.einsum("yxo,yxc->oc", g_out, window)
            g_pad[i : i + h : stride, j : j + wd : stride] += g_out @ w[:, :, i, j]
    g_b = g_out.sum(axis=(0, 1))
    return g_pad[1:-1, 1:-1], g_w, g_b


def _nearest_up2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _nearest_up2_backward(g: np.ndarray) -> np.ndarray:
    h, w, c = g.shape
    return g.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


def forward(
    renderer: ConvRenderer, x: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Run the plan; returns (image, cache-for-backward).

    The input must have the plan's channel count and spatial dimensions
    divisible by 4 (two stride-2 stages).
    """
    if x.ndim != 3 or x.shape[2] != renderer.in_channels:
        raise ValueError(
            f"input has shape {x.shape}, renderer expects {renderer.in_channels} channels"
        )
    if x.shape[0] % 4 or x.shape[1] % 4:
        raise ValueError(f"spatial size {x.shape[:2]} not divisible by 4")
    outputs: dict[str, np.ndarray] = {}
    conv_inputs: dict[str, np.ndarray] = {}
    cur = x
    for s in renderer.plan:
        if s.upsample_before:
            cur = _nearest_up2(cur)
        if s.skip_from is not None:
            cur = np.concatenate([cur, outputs[s.skip_from]], axis=2)
        conv_inputs[s.name] = cur
        z = _conv_forward(cur, renderer.weights[s.name], renderer.biases[s.name], s.stride)
        if s.activation == "lrelu":
            cur = np.where(z > 0, z, LEAKY_SLOPE * z)
        elif s.activation == "sigmoid":
            cur = 1.0 / (1.0 + np.exp(-z))
        else:
            raise ValueError(f"unknown activation {s.activation!r}")
        outputs[s.name] = cur
    cache = {"inputs": conv_inputs, "outputs": outputs, "x_shape": x.shape}
    return outputs[renderer.plan[-1].name], cache


def backward(
    renderer: ConvRenderer, cache: dict, grad_out: np.ndarray
) -> tuple[ConvGrads, np.ndarray]:
    """Exact reverse of :func:`forward`; returns (weight grads, grad wrt input)."""
    grads = renderer.zero_grads()
    pending: dict[str, np.ndarray] = {renderer.plan[-1].name: np.asarray(grad_out)}
    grad_x = np.zeros(cache["x_shape"])
    for idx in range(len(renderer.plan) - 1, -1, -1):
        s = renderer.plan[idx]
        g = pending.pop(s.name, None)
        if g is None:
            continue
        y = cache["outputs"][s.name]
        if s.activation == "lrelu":
            g_z = np.where(y > 0, g, LEAKY_SLOPE * g)
        else:  # sigmoid
            g_z = g * y * (1.0 - y)
        x_in = cache["inputs"][s.name]
        g_in, g_w, g_b = _conv_backward(x_in, renderer.weights[s.name], s.stride, g_z)
        grads.weights[s.name] += g_w
        grads.biases[s.name] += g_b
        if s.skip_from is not None:
            skip_ch = cache["outputs"][s.skip_from].shape[2]
            g_skip = g_in[:, :, -skip_ch:]
            g_in = g_in[:, :, :-skip_ch]
            if s.skip_from in pending:
                pending[s.skip_from] = pending[s.skip_from] + g_skip
            else:
                pending[s.skip_from] = g_skip
        if s.upsample_before:
            g_in = _nearest_up2_backward(g_in)
        if idx == 0:
            grad_x += g_in
        else:
            prev = renderer.plan[idx - 1].name
            if prev in pending:
                pending[prev] = pending[prev] + g_in
            else:
                pending[prev] = g_in
    return grads, grad_x
