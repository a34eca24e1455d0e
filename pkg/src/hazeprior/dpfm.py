"""Windowed dual cross-attention between image features and depth features.

Feature maps are split into non-overlapping M x M query tiles; keys and
values come from concentric M_ov x M_ov tiles (M_ov = M + round-to-even(r*M))
cut from a zero-padded canvas, so every query tile sees a halo of context.
Two attention branches run in the same windows with a shared positional bias
table B:

    A_dx = softmax(Q_D K_X^T / sqrt(d) + B) V_X      depth queries image
    A_xd = softmax(Q_X K_D^T / sqrt(d) + B) V_D      image queries depth
    Y_w  = proj(A_dx + A_xd) + X_w

The block wraps this in the usual pre-norm residual pair (attention, then a
two-layer MLP).  ``proj`` and the MLP's second layer start at zero, so a
fresh block is the identity map and stacking it anywhere is safe.

Cost scales with H*W*M*M_ov per branch; ``attention_mac_count`` gives the
exact closed-form multiply-accumulate counts the bench harness reports.

A channel-attention variant ("CCA") is selectable for ablations: tokens are
transposed per head so attention mixes channels; the token-count algebra
then requires both sides to use the query tiling, and the bias table is
unused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError
from .ops import ScatterPlan, conv2d, layer_norm_chan, linear, take_last
from .tensor import Tensor, add, concat, crop2d, gelu, matmul, mul, pad2d, reshape, \
    softmax_lastdim, transpose

ATTENTION_KINDS = ("SCA", "CCA")
QUERY_SIDES = ("rgb", "depth", "dual")
MLP_RATIO = 2


@dataclass(frozen=True)
class WindowGeometry:
    """Window size m, fractional overlap r, and head count."""
    m: int = 8
    r: float = 0.5
    heads: int = 2

    def __post_init__(self):
        if self.m < 1:
            raise ParameterError(f"window size must be >= 1, got {self.m}")
        if self.r < 0:
            raise ParameterError(f"overlap ratio must be >= 0, got {self.r}")
        if self.heads < 1:
            raise ParameterError(f"head count must be >= 1, got {self.heads}")

    @property
    def m_ov(self) -> int:
        # overlap extent rounded to the nearest even integer keeps the halo
        # symmetric; ties follow round-half-even
        return self.m + 2 * round(self.r * self.m / 2.0)

    @property
    def halo(self) -> int:
        return (self.m_ov - self.m) // 2


@dataclass
class WindowedTokens:
    """Per-window token views of one feature map."""
    queries: Tensor               # (N, nw, m*m, C)
    kv: Tensor                    # (N, nw, m_ov*m_ov, C)
    height: int
    width: int
    grid: tuple[int, int]         # windows along (H, W)


class _WindowPlan:
    """Gather indices (and scatter plans) for one (H, W, geometry)."""

    def __init__(self, h: int, w: int, geom: WindowGeometry):
        m, mov, halo = geom.m, geom.m_ov, geom.halo
        gh, gw = -(-h // m), -(-w // m)
        hp, wp = gh * m, gw * m
        wp2 = wp + 2 * halo
        wy = np.arange(gh) * m
        wx = np.arange(gw) * m
        qy = wy[:, None, None, None] + np.arange(m)[None, None, :, None]
        qx = wx[None, :, None, None] + np.arange(m)[None, None, None, :]
        q_idx = (qy * wp + qx).reshape(gh * gw, m * m)
        # kv tile origin is (wy - halo, wx - halo) on the unpadded canvas,
        # which is (wy, wx) once the halo padding shifts coordinates
        ky = wy[:, None, None, None] + np.arange(mov)[None, None, :, None]
        kx = wx[None, :, None, None] + np.arange(mov)[None, None, None, :]
        kv_idx = (ky * wp2 + kx).reshape(gh * gw, mov * mov)
        inv_idx = np.empty(hp * wp, dtype=np.int64)
        inv_idx[q_idx.reshape(-1)] = np.arange(hp * wp)

        self.grid = (gh, gw)
        self.hp, self.wp = hp, wp
        self.hp2, self.wp2 = hp + 2 * halo, wp2
        self.q_idx, self.kv_idx, self.inv_idx = q_idx, kv_idx, inv_idx
        self.q_scatter = ScatterPlan(q_idx, hp * wp)
        self.kv_scatter = ScatterPlan(kv_idx, self.hp2 * wp2)
        self.inv_scatter = ScatterPlan(inv_idx, gh * gw * m * m)


_PLANS: dict = {}


def _plan(h: int, w: int, geom: WindowGeometry) -> _WindowPlan:
    key = (h, w, geom.m, geom.m_ov)
    plan = _PLANS.get(key)
    if plan is None:
        plan = _WindowPlan(h, w, geom)
        _PLANS[key] = plan
    return plan


def partition_windows(x, geom: WindowGeometry) -> WindowedTokens:
    """Cut an NCHW map into query tiles and overlapped kv tiles.

    The map is zero-padded on the bottom/right up to a multiple of m, and by
    the halo on all sides for the kv view.  ``merge_windows`` inverts the
    query tiling bit-exactly.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"partition_windows: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    p = _plan(h, w, geom)
    halo = geom.halo

    xq = pad2d(x, 0, p.hp - h, 0, p.wp - w) if (p.hp != h or p.wp != w) else x
    qt = take_last(reshape(xq, (n, c, p.hp * p.wp)), p.q_idx, p.q_scatter)
    queries = transpose(qt, (0, 2, 3, 1))

    xkv = pad2d(x, halo, p.hp - h + halo, halo, p.wp - w + halo)
    kt = take_last(reshape(xkv, (n, c, p.hp2 * p.wp2)), p.kv_idx, p.kv_scatter)
    kv = transpose(kt, (0, 2, 3, 1))
    return WindowedTokens(queries=queries, kv=kv, height=h, width=w, grid=p.grid)


def merge_windows(queries, geom: WindowGeometry, height: int, width: int) -> Tensor:
    """Stitch (N, nw, m*m, C) query tokens back into an (N, C, H, W) map."""
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    if queries.ndim != 4:
        raise ShapeError(f"merge_windows: need (N, nw, m*m, C), got {queries.shape}")
    n, nw, t, c = queries.shape
    p = _plan(height, width, geom)
    if nw != p.grid[0] * p.grid[1] or t != geom.m * geom.m:
        raise ShapeError(f"merge_windows: tokens {queries.shape} vs grid {p.grid}, m={geom.m}")
    flat = reshape(transpose(queries, (0, 3, 1, 2)), (n, c, nw * t))
    canvas = take_last(flat, p.inv_idx, p.inv_scatter)
    img = reshape(canvas, (n, c, p.hp, p.wp))
    if p.hp != height or p.wp != width:
        img = crop2d(img, height, width)
    return img


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


@dataclass
class DpfmWeights:
    """Projections, bias table, norms and MLP for one fusion block."""
    depth0_w: Tensor
    depth0_b: Tensor
    depth1_w: Tensor
    depth1_b: Tensor
    wq_d: Tensor
    wk_x: Tensor
    wv_x: Tensor
    wq_x: Tensor
    wk_d: Tensor
    wv_d: Tensor
    bias: Tensor | None           # (heads, m*m, m_ov*m_ov); None for CCA
    bias_x2d: Tensor | None       # populated only when the table is unshared
    out_w: Tensor
    out_b: Tensor
    ln1_gain: Tensor
    ln1_offset: Tensor
    ln2_gain: Tensor
    ln2_offset: Tensor
    mlp0_w: Tensor
    mlp0_b: Tensor
    mlp1_w: Tensor
    mlp1_b: Tensor

    def named(self, stage: int = 0) -> list[tuple[str, Tensor]]:
        p = f"dpfm.{stage}."
        out = [
            (p + "depth_proj.0.w", self.depth0_w), (p + "depth_proj.0.b", self.depth0_b),
            (p + "depth_proj.1.w", self.depth1_w), (p + "depth_proj.1.b", self.depth1_b),
            (p + "wq_d", self.wq_d), (p + "wk_x", self.wk_x), (p + "wv_x", self.wv_x),
            (p + "wq_x", self.wq_x), (p + "wk_d", self.wk_d), (p + "wv_d", self.wv_d),
        ]
        if self.bias is not None:
            out.append((p + "bias", self.bias))
        if self.bias_x2d is not None:
            out.append((p + "bias_x2d", self.bias_x2d))
        out += [
            (p + "out_proj.w", self.out_w), (p + "out_proj.b", self.out_b),
            (p + "ln1.gain", self.ln1_gain), (p + "ln1.offset", self.ln1_offset),
            (p + "ln2.gain", self.ln2_gain), (p + "ln2.offset", self.ln2_offset),
            (p + "mlp.0.w", self.mlp0_w), (p + "mlp.0.b", self.mlp0_b),
            (p + "mlp.1.w", self.mlp1_w), (p + "mlp.1.b", self.mlp1_b),
        ]
        return out


def init_dpfm(c: int, geom: WindowGeometry, rng: np.random.Generator,
              kind: str = "SCA", shared_bias: bool = True) -> DpfmWeights:
    """Fresh block weights for channel width ``c``.

    out_proj and the MLP's second layer start at zero: the block is exactly
    the identity until training opens the residual branches.
    """
    from .dgam import he_normal, ones, zeros

    if kind not in ATTENTION_KINDS:
        raise ConfigError(f"unknown attention kind {kind!r}, expected {ATTENTION_KINDS}")
    if c % geom.heads:
        raise ConfigError(f"heads {geom.heads} must divide channels {c}")
    if c % 2:
        raise ConfigError(f"depth projection needs even channels, got {c}")
    half = c // 2
    hidden = MLP_RATIO * c

    def proj():
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, c)), requires_grad=True)

    use_bias = kind == "SCA"
    t = geom.m * geom.m
    s = geom.m_ov * geom.m_ov
    return DpfmWeights(
        depth0_w=he_normal(rng, (half, 1, 3, 3), 9), depth0_b=zeros(half),
        depth1_w=he_normal(rng, (c, half, 3, 3), 9 * half), depth1_b=zeros(c),
        wq_d=proj(), wk_x=proj(), wv_x=proj(),
        wq_x=proj(), wk_d=proj(), wv_d=proj(),
        bias=zeros((geom.heads, t, s)) if use_bias else None,
        bias_x2d=zeros((geom.heads, t, s)) if use_bias and not shared_bias else None,
        out_w=zeros((c, c)), out_b=zeros(c),
        ln1_gain=ones(c), ln1_offset=zeros(c),
        ln2_gain=ones(c), ln2_offset=zeros(c),
        mlp0_w=he_normal(rng, (c, hidden), c), mlp0_b=zeros(hidden),
        mlp1_w=zeros((hidden, c)), mlp1_b=zeros(c),
    )


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _split_heads(tokens: Tensor, heads: int) -> Tensor:
    n, nw, t, c = tokens.shape
    d = c // heads
    return transpose(reshape(tokens, (n, nw, t, heads, d)), (0, 1, 3, 2, 4))


def _merge_heads(tokens: Tensor) -> Tensor:
    n, nw, h, t, d = tokens.shape
    return reshape(transpose(tokens, (0, 1, 3, 2, 4)), (n, nw, t, h * d))


def _branch(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None) -> Tensor:
    d = q.shape[-1] // heads
    qh = mul(_split_heads(q, heads), 1.0 / math.sqrt(d))
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = matmul(qh, transpose(kh, (0, 1, 2, 4, 3)))     # (N, nw, h, T, S)
    if bias is not None:
        scores = add(scores, bias)
    return _merge_heads(matmul(softmax_lastdim(scores), vh))


def dual_cross_attention(xw: WindowedTokens, dw: WindowedTokens, w: DpfmWeights,
                         geom: WindowGeometry, side: str = "dual") -> Tensor:
    """Windowed spatial cross-attention between image and depth tokens.

    ``side`` selects the active branches: "depth" keeps only depth-queried
    attention into image kv, "rgb" only image-queried attention into depth
    kv, "dual" sums both.  Output is query-shaped tokens; the image-side
    residual is added by the caller per the block equation.
    """
    if side not in QUERY_SIDES:
        raise ConfigError(f"unknown query side {side!r}, expected {QUERY_SIDES}")
    if xw.queries.shape != dw.queries.shape:
        raise ShapeError(f"token shapes differ: {xw.queries.shape} vs {dw.queries.shape}")
    bias2 = w.bias_x2d if w.bias_x2d is not None else w.bias
    acc = None
    if side in ("depth", "dual"):
        a = _branch(linear(dw.queries, w.wq_d), linear(xw.kv, w.wk_x),
                    linear(xw.kv, w.wv_x), geom.heads, w.bias)
        acc = a
    if side in ("rgb", "dual"):
        a = _branch(linear(xw.queries, w.wq_x), linear(dw.kv, w.wk_d),
                    linear(dw.kv, w.wv_d), geom.heads, bias2)
        acc = a if acc is None else add(acc, a)
    return linear(acc, w.out_w, w.out_b)


def _cca_branch(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    n, nw, t, c = q.shape
    qc = transpose(_split_heads(q, heads), (0, 1, 2, 4, 3))  # (N, nw, h, d, T)
    kc = transpose(_split_heads(k, heads), (0, 1, 2, 4, 3))
    vc = transpose(_split_heads(v, heads), (0, 1, 2, 4, 3))
    scores = mul(matmul(qc, transpose(kc, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(t))
    out = matmul(softmax_lastdim(scores), vc)                # (N, nw, h, d, T)
    return _merge_heads(transpose(out, (0, 1, 2, 4, 3)))


def channel_cross_attention(xw: WindowedTokens, dw: WindowedTokens, w: DpfmWeights,
                            geom: WindowGeometry, side: str = "dual") -> Tensor:
    """Ablation variant: attention over channels inside each query tile.

    Channel attention needs equal token counts on both sides, so kv tiles
    coincide with query tiles and the positional table does not apply.
    """
    if side not in QUERY_SIDES:
        raise ConfigError(f"unknown query side {side!r}, expected {QUERY_SIDES}")
    acc = None
    if side in ("depth", "dual"):
        acc = _cca_branch(linear(dw.queries, w.wq_d), linear(xw.queries, w.wk_x),
                          linear(xw.queries, w.wv_x), geom.heads)
    if side in ("rgb", "dual"):
        a = _cca_branch(linear(xw.queries, w.wq_x), linear(dw.queries, w.wk_d),
                        linear(dw.queries, w.wv_d), geom.heads)
        acc = a if acc is None else add(acc, a)
    return linear(acc, w.out_w, w.out_b)


# ---------------------------------------------------------------------------
# block
# ---------------------------------------------------------------------------


def depth_features(depth, w: DpfmWeights) -> Tensor:
    """Lift a 1-channel depth map to block width: conv-GELU-conv."""
    depth = depth if isinstance(depth, Tensor) else Tensor(depth)
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ShapeError(f"depth_features: need (N, 1, H, W), got {depth.shape}")
    h = gelu(conv2d(depth, w.depth0_w, w.depth0_b, pad=1))
    return conv2d(h, w.depth1_w, w.depth1_b, pad=1)


def dpfm_block(x, depth, w: DpfmWeights, geom: WindowGeometry,
               kind: str = "SCA", side: str = "dual") -> Tensor:
    """Pre-norm residual fusion block.

    ``x`` is (N, C, H, W) features, ``depth`` the (N, 1, H, W) raw depth at
    the same resolution.  Depth features share ln1 with the image side (the
    depth-side normalization is an addition for scale stability).
    """
    if kind not in ATTENTION_KINDS:
        raise ConfigError(f"unknown attention kind {kind!r}, expected {ATTENTION_KINDS}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    n, c, hh, ww = x.shape
    fd = depth_features(depth, w)
    if fd.shape != x.shape:
        raise ShapeError(f"depth features {fd.shape} vs image features {x.shape}")

    xn = layer_norm_chan(x, w.ln1_gain, w.ln1_offset)
    fdn = layer_norm_chan(fd, w.ln1_gain, w.ln1_offset)
    xw = partition_windows(xn, geom)
    dw = partition_windows(fdn, geom)
    attend = dual_cross_attention if kind == "SCA" else channel_cross_attention
    tokens = attend(xw, dw, w, geom, side)
    y = add(merge_windows(tokens, geom, hh, ww), x)

    z = layer_norm_chan(y, w.ln2_gain, w.ln2_offset)
    tok = reshape(transpose(z, (0, 2, 3, 1)), (n, hh * ww, c))
    tok = linear(gelu(linear(tok, w.mlp0_w, w.mlp0_b)), w.mlp1_w, w.mlp1_b)
    return add(transpose(reshape(tok, (n, hh, ww, c)), (0, 3, 1, 2)), y)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MacCount:
    """Exact multiply-accumulate counts for one attention pass."""
    score: int                    # QK^T and attn*V products, all branches
    proj: int                     # Q/K/V and output projections


def attention_mac_count(h: int, w: int, geom: WindowGeometry, c: int,
                        branches: int = 2) -> MacCount:
    """Closed-form MACs of windowed spatial cross-attention on an HxW map.

    score = 2 * branches * nw * m^2 * m_ov^2 * c   (QK^T plus attn*V)
    proj  = nw * c^2 * (branches * (m^2 + 2*m_ov^2) + m^2)

    Head count cancels: h heads of width c/h multiply out to c.  Doubling
    H and W at fixed geometry quadruples both counts exactly once H and W
    are multiples of m.
    """
    if h < 1 or w < 1 or c < 1:
        raise ParameterError(f"bad extents h={h} w={w} c={c}")
    if branches not in (1, 2):
        raise ParameterError(f"branches must be 1 or 2, got {branches}")
    nw = (-(-h // geom.m)) * (-(-w // geom.m))
    t = geom.m * geom.m
    s = geom.m_ov * geom.m_ov
    score = 2 * branches * nw * t * s * c
    proj = nw * c * c * (branches * (t + 2 * s) + t)
    return MacCount(score=score, proj=proj)
