"""Depth-gated input head.

A raw depth map is first refined by a small 3-layer conv stack, then the
RGB-D concatenation is modulated by a learned per-channel gate before being
embedded into the backbone width:

    cat    = [I, refine(D)]                      (N, 4, H, W)
    f      = GELU(InstNorm(conv3x3(cat)))        (N, C, H, W)
    gate   = sigmoid(FC2(GELU(FC1(GAP(f)))))     (N, 4, 1, 1), entries in (0,1)
    out    = conv3x3(cat * gate)                 (N, C, H, W)

The gate squeezes global statistics, so an unreliable depth channel can be
attenuated image-wide.  FC2's bias starts at zero and its weight small, so
training starts with every gate near 1/2 (no a-priori trust either way).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .ops import conv2d, global_avg_pool, instance_norm, linear
from .tensor import Tensor, concat, gelu, mul, relu, reshape, sigmoid

REFINE_WIDTH = 8
GATE_CHANNELS = 4  # RGB + refined depth


def he_normal(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> Tensor:
    std = scale * np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class DgamWeights:
    """Depth-refinement convs, gating stem/FCs, and the RGB-D embed conv."""
    refine0_w: Tensor
    refine0_b: Tensor
    refine1_w: Tensor
    refine1_b: Tensor
    refine2_w: Tensor
    refine2_b: Tensor
    stem_w: Tensor
    stem_b: Tensor
    stem_gain: Tensor
    stem_offset: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    embed_w: Tensor
    embed_b: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("dgam.refine.0.w", self.refine0_w), ("dgam.refine.0.b", self.refine0_b),
            ("dgam.refine.1.w", self.refine1_w), ("dgam.refine.1.b", self.refine1_b),
            ("dgam.refine.2.w", self.refine2_w), ("dgam.refine.2.b", self.refine2_b),
            ("dgam.stem.w", self.stem_w), ("dgam.stem.b", self.stem_b),
            ("dgam.stem.gain", self.stem_gain), ("dgam.stem.offset", self.stem_offset),
            ("dgam.fc1.w", self.fc1_w), ("dgam.fc1.b", self.fc1_b),
            ("dgam.fc2.w", self.fc2_w), ("dgam.fc2.b", self.fc2_b),
            ("dgam.embed.w", self.embed_w), ("dgam.embed.b", self.embed_b),
        ]


def init_dgam(c: int, rng: np.random.Generator, ratio: int = 2) -> DgamWeights:
    """Fresh weights for backbone width ``c``.

    ``ratio`` is the FC bottleneck divisor and must divide ``c``.  FC2 starts
    with zero bias and a downscaled weight so gates open at ~0.5.
    """
    if ratio < 1 or c % ratio:
        raise ParameterError(f"fc ratio {ratio} must divide channel count {c}")
    hidden = c // ratio
    r = REFINE_WIDTH
    return DgamWeights(
        refine0_w=he_normal(rng, (r, 1, 3, 3), 9), refine0_b=zeros(r),
        refine1_w=he_normal(rng, (r, r, 3, 3), 9 * r), refine1_b=zeros(r),
        refine2_w=he_normal(rng, (1, r, 3, 3), 9 * r), refine2_b=zeros(1),
        stem_w=he_normal(rng, (c, GATE_CHANNELS, 3, 3), 9 * GATE_CHANNELS),
        stem_b=zeros(c), stem_gain=ones(c), stem_offset=zeros(c),
        fc1_w=he_normal(rng, (c, hidden), c), fc1_b=zeros(hidden),
        fc2_w=he_normal(rng, (hidden, GATE_CHANNELS), hidden, scale=0.1),
        fc2_b=zeros(GATE_CHANNELS),
        embed_w=he_normal(rng, (c, GATE_CHANNELS, 3, 3), 9 * GATE_CHANNELS),
        embed_b=zeros(c),
    )


def refine_depth(depth, w: DgamWeights) -> Tensor:
    """3-layer conv refinement, widths 1 -> 8 -> 8 -> 1, ReLU between, linear out."""
    depth = depth if isinstance(depth, Tensor) else Tensor(depth)
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ShapeError(f"refine_depth: need (N, 1, H, W), got {depth.shape}")
    h = relu(conv2d(depth, w.refine0_w, w.refine0_b, pad=1))
    h = relu(conv2d(h, w.refine1_w, w.refine1_b, pad=1))
    return conv2d(h, w.refine2_w, w.refine2_b, pad=1)


def dgam_forward(image, depth, w: DgamWeights, gate_one: bool = False,
                 refined: Tensor | None = None) -> Tensor:
    """Embed an RGB image and its raw depth into backbone features.

    ``gate_one`` bypasses the learned gate (forces it to 1), turning the
    module into a plain refine-and-concatenate head with identical weights.
    Pass ``refined`` to reuse a refinement computed by the caller.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    depth = depth if isinstance(depth, Tensor) else Tensor(depth)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"dgam_forward: image must be (N, 3, H, W), got {image.shape}")
    if depth.shape != (image.shape[0], 1, image.shape[2], image.shape[3]):
        raise ShapeError(f"dgam_forward: depth {depth.shape} vs image {image.shape}")

    if refined is None:
        refined = refine_depth(depth, w)
    cat = concat([image, refined], axis=1)
    if gate_one:
        gated = cat
    else:
        f = gelu(instance_norm(conv2d(cat, w.stem_w, w.stem_b, pad=1),
                               w.stem_gain, w.stem_offset))
        g = reshape(global_avg_pool(f), (image.shape[0], f.shape[1]))
        g = sigmoid(linear(gelu(linear(g, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b))
        gated = mul(cat, reshape(g, (image.shape[0], GATE_CHANNELS, 1, 1)))
    return conv2d(gated, w.embed_w, w.embed_b, pad=1)


def dgam_gate(image, depth, w: DgamWeights) -> Tensor:
    """The (N, 4) gate vector alone, for inspection and tests."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    depth = depth if isinstance(depth, Tensor) else Tensor(depth)
    refined = refine_depth(depth, w)
    cat = concat([image, refined], axis=1)
    f = gelu(instance_norm(conv2d(cat, w.stem_w, w.stem_b, pad=1),
                           w.stem_gain, w.stem_offset))
    g = reshape(global_avg_pool(f), (image.shape[0], f.shape[1]))
    return sigmoid(linear(gelu(linear(g, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b))
