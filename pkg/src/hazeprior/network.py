"""Three-scale encoder-decoder restoration network.

The trunk is a plain residual conv backbone.  Depth enters twice: a gated
embedding head mixes the refined depth into the stem features, and windowed
dual cross-attention blocks fuse depth features into the trunk at every
stage.  Each decoder scale emits its own restored image on top of an image
skip, so a freshly initialized model (zero output heads, zero attention
residual branches) is the identity on the hazy input.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .dgam import DgamWeights, dgam_forward, he_normal, init_dgam, refine_depth, zeros
from .dpfm import (ATTENTION_KINDS, QUERY_SIDES, DpfmWeights, WindowGeometry,
                   dpfm_block, init_dpfm)
from .errors import ConfigError, ShapeError
from .ops import avg_pool2x2, conv2d, upsample_nearest2x
from .tensor import Tensor, add, gelu

DEPTH_SOURCES = ("file", "constant_gray")
CONSTANT_GRAY_LEVEL = 0.5
SCALES = 3


@dataclass(frozen=True)
class NetConfig:
    """Architecture and variant switches.

    ``use_dgam`` enables the depth-gated stem; with ``dgam_gate`` off the
    same weights run as a plain refine-and-concatenate head.  ``use_dpfm``
    inserts one fusion block per stage, on the encoder side by default or
    on the decoder side with ``dpfm_in_decoder``.  ``depth_source`` picks
    the real depth raster or a constant mid-gray control map.
    """

    base_channels: int = 16
    scales: int = SCALES
    blocks_per_stage: int = 2
    window: int = 8
    overlap_ratio: float = 0.5
    heads: int = 2
    use_dgam: bool = True
    dgam_gate: bool = True
    use_dpfm: bool = True
    dpfm_in_decoder: bool = False
    attention_kind: str = "SCA"
    query_side: str = "dual"
    depth_source: str = "file"
    seed: int = 0

    def __post_init__(self):
        if self.scales != SCALES:
            raise ConfigError(f"scales must be {SCALES}, got {self.scales}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.base_channels % self.heads:
            raise ConfigError(
                f"heads ({self.heads}) must divide base_channels ({self.base_channels})")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(
                f"unknown attention kind {self.attention_kind!r}, expected {ATTENTION_KINDS}")
        if self.query_side not in QUERY_SIDES:
            raise ConfigError(
                f"unknown query side {self.query_side!r}, expected {QUERY_SIDES}")
        if self.depth_source not in DEPTH_SOURCES:
            raise ConfigError(
                f"unknown depth source {self.depth_source!r}, expected {DEPTH_SOURCES}")
        if self.dpfm_in_decoder and not self.use_dpfm:
            raise ConfigError("dpfm_in_decoder requires use_dpfm")
        # the window geometry must construct (validates m, r, heads)
        self.geometry(0)

    def stage_channels(self, stage: int) -> int:
        return self.base_channels << stage

    def geometry(self, stage: int) -> WindowGeometry:
        """Window geometry used at a given stage (uniform across stages)."""
        return WindowGeometry(m=self.window, r=self.overlap_ratio, heads=self.heads)


@dataclass
class ConvBlockWeights:
    """One residual unit: x + conv(gelu(conv(x))), both 3x3 same-channel."""

    w0: Tensor
    b0: Tensor
    w1: Tensor
    b1: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.0.w", self.w0
        yield f"{prefix}.0.b", self.b0
        yield f"{prefix}.1.w", self.w1
        yield f"{prefix}.1.b", self.b1


def init_conv_block(c: int, rng: np.random.Generator) -> ConvBlockWeights:
    return ConvBlockWeights(
        w0=he_normal(rng, (c, c, 3, 3), fan_in=c * 9),
        b0=zeros((c,)),
        w1=he_normal(rng, (c, c, 3, 3), fan_in=c * 9),
        b1=zeros((c,)),
    )


def conv_block(x: Tensor, w: ConvBlockWeights) -> Tensor:
    return add(x, conv2d(gelu(conv2d(x, w.w0, w.b0, pad=1)), w.w1, w.b1, pad=1))


@dataclass
class ModelWeights:
    cfg: NetConfig
    stem_w: Tensor | None           # plain 3->C stem when the gated head is off
    stem_b: Tensor | None
    dgam: DgamWeights | None
    enc: list[list[ConvBlockWeights]]      # per stage
    down: list[tuple[Tensor, Tensor]]      # stride-2 convs, C_i -> C_{i+1}
    dpfm: list[DpfmWeights] | None         # one per stage, channels C_i
    up: list[tuple[Tensor, Tensor]]        # post-upsample convs, C_{i+1} -> C_i
    dec: list[list[ConvBlockWeights]]      # stages scales-2 .. 0
    head: list[tuple[Tensor, Tensor]]      # per-scale output convs C_i -> 3

    def named(self):
        """Deterministic (name, tensor) walk over every parameter."""
        if self.stem_w is not None:
            yield "stem.w", self.stem_w
            yield "stem.b", self.stem_b
        if self.dgam is not None:
            yield from self.dgam.named()
        for i, blocks in enumerate(self.enc):
            for j, blk in enumerate(blocks):
                yield from blk.named(f"enc.{i}.block.{j}")
        for i, (w, b) in enumerate(self.down):
            yield f"down.{i}.w", w
            yield f"down.{i}.b", b
        if self.dpfm is not None:
            for i, dw in enumerate(self.dpfm):
                yield from dw.named(i)
        for i, (w, b) in enumerate(self.up):
            yield f"up.{i}.w", w
            yield f"up.{i}.b", b
        for i, blocks in enumerate(self.dec):
            for j, blk in enumerate(blocks):
                yield from blk.named(f"dec.{i}.block.{j}")
        for i, (w, b) in enumerate(self.head):
            yield f"head.{i}.w", w
            yield f"head.{i}.b", b


@dataclass
class MultiScaleOutput:
    """Restored images at full, half, and quarter resolution, unclamped."""

    restored: tuple

    def __iter__(self):
        return iter(self.restored)

    def __getitem__(self, i):
        return self.restored[i]


def build_variant(cfg: NetConfig) -> ModelWeights:
    """Initialize weights for a configuration, deterministically from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    c = cfg.base_channels
    chans = [cfg.stage_channels(i) for i in range(cfg.scales)]

    if cfg.use_dgam:
        stem_w = stem_b = None
        dgam = init_dgam(c, rng)
    else:
        stem_w = he_normal(rng, (c, 3, 3, 3), fan_in=27)
        stem_b = zeros((c,))
        dgam = None

    enc = [[init_conv_block(ci, rng) for _ in range(cfg.blocks_per_stage)]
           for ci in chans]
    down = [(he_normal(rng, (chans[i + 1], chans[i], 3, 3), fan_in=chans[i] * 9),
             zeros((chans[i + 1],)))
            for i in range(cfg.scales - 1)]
    dpfm = None
    if cfg.use_dpfm:
        dpfm = [init_dpfm(ci, cfg.geometry(i), rng, kind=cfg.attention_kind)
                for i, ci in enumerate(chans)]
    up = [(he_normal(rng, (chans[i], chans[i + 1], 3, 3), fan_in=chans[i + 1] * 9),
           zeros((chans[i],)))
          for i in range(cfg.scales - 1)]
    dec = [[init_conv_block(chans[i], rng) for _ in range(cfg.blocks_per_stage)]
           for i in range(cfg.scales - 2, -1, -1)]
    head = [(zeros((3, ci, 3, 3)), zeros((3,))) for ci in chans]
    return ModelWeights(cfg=cfg, stem_w=stem_w, stem_b=stem_b, dgam=dgam,
                        enc=enc, down=down, dpfm=dpfm, up=up, dec=dec, head=head)


def fd_check_point(cfg: NetConfig, seed: int = 3, trunk_scale: float = 0.5,
                   fill_sigma: float = 0.05) -> ModelWeights:
    """Weights conditioned for finite-difference gradient validation.

    Central differences at a fixed step are only trustworthy where the loss
    is near-linear over that step and away from kinks, so this builds a
    deliberate check point: zero-initialized residual branches are opened
    with small random values (their gradients are otherwise blocked), conv
    gains are damped so depth-wise feature amplification stays near unity,
    and the depth-refinement relu pre-activations are pushed well above
    zero (positive weights, bias 0.3) for non-negative depth inputs.
    """
    w = build_variant(cfg)
    rng = np.random.default_rng(seed)
    for _, t in w.named():
        if not t.data.any():
            t.data[...] = rng.normal(0.0, fill_sigma, size=t.shape)
        elif t.ndim == 4:
            t.data[...] *= trunk_scale
    if w.dgam is not None:
        w.dgam.refine0_w.data[...] = np.abs(w.dgam.refine0_w.data)
        w.dgam.refine1_w.data[...] = np.abs(w.dgam.refine1_w.data)
        w.dgam.refine0_b.data[...] = 0.3
        w.dgam.refine1_b.data[...] = 0.3
    return w


def count_parameters(weights) -> int:
    """Total scalar count of a weight container, ``named()`` iterable, or
    plain tensor sequence."""
    if hasattr(weights, "named"):
        return int(sum(t.size for _, t in weights.named()))
    total = 0
    for entry in weights:
        t = entry[1] if isinstance(entry, tuple) else entry
        total += t.size
    return int(total)


def _depth_input(hazy: Tensor, depth, cfg: NetConfig) -> Tensor:
    if cfg.depth_source == "constant_gray":
        n, _, h, w = hazy.shape
        return Tensor(np.full((n, 1, h, w), CONSTANT_GRAY_LEVEL))
    depth = depth if isinstance(depth, Tensor) else Tensor(depth)
    if depth.ndim == 2:
        depth = Tensor(depth.data[None, None])
    if depth.shape != (hazy.shape[0], 1, hazy.shape[2], hazy.shape[3]):
        raise ShapeError(f"depth {depth.shape} does not match hazy {hazy.shape}")
    return depth


def forward(hazy, depth, cfg: NetConfig, w: ModelWeights) -> MultiScaleOutput:
    """Restore at three scales.  ``hazy`` is (N, 3, H, W) with H, W divisible
    by 4; ``depth`` is (N, 1, H, W) (or (H, W)), ignored under the
    constant-gray source."""
    hazy = hazy if isinstance(hazy, Tensor) else Tensor(hazy)
    if hazy.ndim == 3:
        hazy = Tensor(hazy.data[None])
    if hazy.ndim != 4 or hazy.shape[1] != 3:
        raise ShapeError(f"hazy must be (N, 3, H, W), got {hazy.shape}")
    n, _, hh, ww = hazy.shape
    if hh % 4 or ww % 4:
        raise ShapeError(
            f"spatial dims ({hh}, {ww}) must be divisible by 4; pad the input first")
    depth = _depth_input(hazy, depth, cfg)

    refined = refine_depth(depth, w.dgam) if cfg.use_dgam else depth
    if cfg.use_dgam:
        x = dgam_forward(hazy, depth, w.dgam, gate_one=not cfg.dgam_gate,
                         refined=refined)
    else:
        x = conv2d(hazy, w.stem_w, w.stem_b, pad=1)

    depths = [refined]
    images = [hazy]
    for _ in range(cfg.scales - 1):
        depths.append(avg_pool2x2(depths[-1]))
        images.append(avg_pool2x2(images[-1]))

    def fuse(feat, stage):
        if w.dpfm is None:
            return feat
        return dpfm_block(feat, depths[stage], w.dpfm[stage], cfg.geometry(stage),
                          kind=cfg.attention_kind, side=cfg.query_side)

    skips = []
    for i in range(cfg.scales):
        for blk in w.enc[i]:
            x = conv_block(x, blk)
        if not cfg.dpfm_in_decoder:
            x = fuse(x, i)
        if i < cfg.scales - 1:
            skips.append(x)
            x = conv2d(x, w.down[i][0], w.down[i][1], stride=2, pad=1)

    restored = []
    for i in range(cfg.scales - 1, -1, -1):
        if i < cfg.scales - 1:
            x = conv2d(upsample_nearest2x(x), w.up[i][0], w.up[i][1], pad=1)
            x = add(x, skips[i])
            for blk in w.dec[cfg.scales - 2 - i]:
                x = conv_block(x, blk)
        if cfg.dpfm_in_decoder:
            x = fuse(x, i)
        out = add(conv2d(x, w.head[i][0], w.head[i][1], pad=1), images[i])
        restored.append(out)
    restored.reverse()
    return MultiScaleOutput(restored=tuple(restored))


def config_to_text(cfg: NetConfig) -> str:
    """Flat key=value serialization, one field per line."""
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> NetConfig:
    kinds = {f.name: f.type for f in fields(NetConfig)}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in kinds:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        kind = kinds[key]
        if kind == "bool":
            if val not in ("True", "False", "true", "false"):
                raise ConfigError(f"config line {lineno}: bad bool {val!r}")
            kwargs[key] = val in ("True", "true")
        elif kind in ("int", "float"):
            try:
                kwargs[key] = int(val) if kind == "int" else float(val)
            except ValueError:
                raise ConfigError(f"config line {lineno}: bad {kind} {val!r}") from None
        else:
            kwargs[key] = val
    return NetConfig(**kwargs)
