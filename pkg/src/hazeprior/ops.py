"""Structured differentiable ops on top of the tensor engine.

Layout conventions: image batches are NCHW, conv weights are (out, in, kh, kw),
linear weights are (in, out).  Everything is float64; forward kernels are
vectorized numpy and each op carries a hand-derived backward closure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, _node, _unbroadcast, as_tensor, mean

NORM_EPS = 1e-5

# im2col gather / scatter plans are pure functions of geometry; cache them.
_COL_PLANS: dict = {}
_SCATTER_PLANS: dict = {}


# ---------------------------------------------------------------------------
# linear / conv
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` over the last axis; w is (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    from .tensor import add, matmul
    out = matmul(x, w)
    if b is not None:
        out = add(out, as_tensor(b))
    return out


def _col_plan(c: int, h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    """Flat scatter indices mapping column entries back into the padded input.

    Column layout follows the forward reshape: rows ordered (oh, ow), entries
    ordered (c, i, j).
    """
    key = (c, h, w, kh, kw, stride, pad)
    plan = _COL_PLANS.get(key)
    if plan is not None:
        return plan
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    oh = np.arange(ho) * stride
    ow = np.arange(wo) * stride
    ci = np.arange(c)
    i = np.arange(kh)
    j = np.arange(kw)
    # idx[oh, ow, c, i, j] -> c*hp*wp + (oh+i)*wp + (ow+j)
    idx = (ci[None, None, :, None, None] * hp * wp
           + (oh[:, None, None, None, None] + i[None, None, None, :, None]) * wp
           + (ow[None, :, None, None, None] + j[None, None, None, None, :]))
    plan = (idx.reshape(ho * wo, c * kh * kw), ho, wo, hp, wp)
    _COL_PLANS[key] = plan
    return plan


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (conv without kernel flip), NCHW.

    Parameters
    ----------
    x : Tensor (N, C, H, W)
    w : Tensor (O, C, kh, kw)
    b : Tensor (O,) or None
    stride, pad : int
        Common stride and symmetric zero padding for both spatial axes.

    A centered delta kernel with pad = (k-1)//2 is the identity map.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {x.shape} vs weight {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride/pad ({stride},{pad})")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    bt = as_tensor(b) if b is not None else None
    if bt is not None and bt.shape != (o,):
        raise ShapeError(f"conv2d: bias {bt.shape} vs out channels {o}")

    idx, ho, wo, hp, wp = _col_plan(c, h, wd, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho*Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * kh * kw)
    w2 = w.data.reshape(o, c * kh * kw)
    # (O, K) @ (N, K, L): the transposed view keeps BLAS happy and the
    # product lands directly in channel-major layout
    out_data = np.matmul(w2, cols.transpose(0, 2, 1))     # (N, O, L)
    if bt is not None:
        out_data += bt.data[:, None]
    out_data = out_data.reshape(n, o, ho, wo)

    parents = (x, w) if bt is None else (x, w, bt)
    out = _node(out_data, parents)
    if out.requires_grad:
        def _bw(g):
            gf = g.reshape(n, o, ho * wo)
            if bt is not None and bt.requires_grad:
                bt._accumulate(gf.sum(axis=(0, 2)), own=True)
            if w.requires_grad:
                dw2 = np.matmul(gf, cols).sum(axis=0)     # (O, C*kh*kw)
                w._accumulate(dw2.reshape(o, c, kh, kw), own=True)
            if x.requires_grad:
                dcols = np.matmul(gf.transpose(0, 2, 1), w2)  # (N, L, C*kh*kw)
                flat = idx.ravel()
                size = c * hp * wp
                dxp = np.empty((n, size), dtype=np.float64)
                for bi in range(n):
                    dxp[bi] = np.bincount(flat, weights=dcols[bi].ravel(), minlength=size)
                dxp = dxp.reshape(n, c, hp, wp)
                if pad:
                    dxp = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])
                x._accumulate(dxp, own=True)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _norm_over(x: Tensor, gain, offset, axes, eps: float) -> Tensor:
    """Shared mean/variance normalization with per-channel affine."""
    gain, offset = as_tensor(gain), as_tensor(offset)
    c = x.shape[1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ShapeError(f"norm: affine {gain.shape}/{offset.shape} vs channels {c} of {x.shape}")
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    gshape = (1, c, 1, 1)
    out_data = gain.data.reshape(gshape) * y + offset.data.reshape(gshape)
    out = _node(out_data, (x, gain, offset))
    if out.requires_grad:
        def _bw(g):
            if gain.requires_grad:
                gain._accumulate(np.sum(g * y, axis=(0, 2, 3)))
            if offset.requires_grad:
                offset._accumulate(np.sum(g, axis=(0, 2, 3)))
            if x.requires_grad:
                gy = g * gain.data.reshape(gshape)
                m1 = gy.mean(axis=axes, keepdims=True)
                m2 = (gy * y).mean(axis=axes, keepdims=True)
                x._accumulate(inv * (gy - m1 - y * m2))
        out._backward = _bw
    return out


def instance_norm(x, gain, offset, eps: float = NORM_EPS) -> Tensor:
    """Normalize each (n, c) plane over its spatial extent, then affine.

    Population variance; eps is fixed small so normalized slices have mean 0
    and variance var/(var+eps).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: need NCHW, got {x.shape}")
    return _norm_over(x, gain, offset, (2, 3), eps)


def layer_norm_chan(x, gain, offset, eps: float = NORM_EPS) -> Tensor:
    """Normalize across channels at each (n, h, w) position, then affine."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"layer_norm_chan: need NCHW, got {x.shape}")
    return _norm_over(x, gain, offset, (1,), eps)


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------


def global_avg_pool(x) -> Tensor:
    """NCHW -> (N, C, 1, 1) spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: need NCHW, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


def avg_pool2x2(x) -> Tensor:
    """Non-overlapping 2x2 mean; halves both spatial extents.

    Equals a factor-2 bilinear resize with center-aligned sampling, so the
    same primitive builds depth pyramids, target pyramids, and image skips.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2x2: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: extents must be even, got {x.shape}")
    out = _node(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), (x,))
    if out.requires_grad:
        def _bw(g):
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            x._accumulate(gx)
        out._backward = _bw
    return out


def upsample_nearest2x(x) -> Tensor:
    """Duplicate every pixel into a 2x2 block."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = _node(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,))
    if out.requires_grad:
        def _bw(g):
            x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# indexed gather along the last axis (windowing support)
# ---------------------------------------------------------------------------


class ScatterPlan:
    """Precomputed deterministic scatter-add for a fixed gather index.

    Sorting the flat index once lets the backward run as a single vectorized
    ``add.reduceat`` per call, with a fixed summation order.
    """

    def __init__(self, idx: np.ndarray, size: int):
        flat = np.ascontiguousarray(idx, dtype=np.int64).ravel()
        if flat.size and (flat.min() < 0 or flat.max() >= size):
            raise ShapeError(f"gather index out of range [0,{size}) ")
        order = np.argsort(flat, kind="stable")
        sorted_ids = flat[order]
        if flat.size:
            starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
            self.unique = sorted_ids[starts]
        else:
            starts = np.empty(0, dtype=np.int64)
            self.unique = sorted_ids
        self.order = order
        self.starts = starts
        self.size = size

    def scatter(self, rows: np.ndarray) -> np.ndarray:
        """rows (R, K) -> (R, size), summing duplicate targets."""
        out = np.zeros((rows.shape[0], self.size), dtype=np.float64)
        if rows.shape[1]:
            sums = np.add.reduceat(rows[:, self.order], self.starts, axis=1)
            out[:, self.unique] = sums
        return out


def take_last(x, idx: np.ndarray, plan: ScatterPlan | None = None) -> Tensor:
    """Gather along the last axis with an integer index array.

    ``x`` has shape (..., S) and ``idx`` any shape K*; the result has shape
    (..., *K).  The backward scatter-adds into S (duplicates accumulate).
    A precomputed ScatterPlan avoids re-sorting per call.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    s = x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= s):
        raise ShapeError(f"take_last: index range vs axis size {s}")
    out = _node(np.ascontiguousarray(x.data[..., idx]), (x,))
    if out.requires_grad:
        if plan is None:
            plan = ScatterPlan(idx, s)
        lead = x.shape[:-1]
        def _bw(g):
            rows = g.reshape(-1, idx.size)
            x._accumulate(plan.scatter(rows).reshape(*lead, s))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# 2-D DFT
# ---------------------------------------------------------------------------


@dataclass
class ComplexTensor:
    """Real/imaginary pair of equal-shape tensors."""
    real: Tensor
    imag: Tensor

    @property
    def shape(self):
        return self.real.shape


def fft2(x) -> ComplexTensor:
    """Unnormalized forward 2-D DFT over the last two axes.

    The DC bin equals the plane sum.  Gradients flow through both parts: the
    DFT matrix is symmetric per axis, so the pullbacks are Re(F g) and
    Im(F g) respectively.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"fft2: need at least 2 axes, got {x.shape}")
    f = np.fft.fft2(x.data, axes=(-2, -1))
    re = _node(np.ascontiguousarray(f.real), (x,))
    im = _node(np.ascontiguousarray(f.imag), (x,))
    if re.requires_grad:
        def _bw_re(g):
            x._accumulate(np.fft.fft2(g, axes=(-2, -1)).real)
        re._backward = _bw_re
    if im.requires_grad:
        def _bw_im(g):
            x._accumulate(np.fft.fft2(g, axes=(-2, -1)).imag)
        im._backward = _bw_im
    return ComplexTensor(re, im)


def fft2_adjoint(real: np.ndarray, imag: np.ndarray) -> np.ndarray:
    """Real part of the adjoint DFT applied to (real + i imag).

    ``fft2_adjoint(*fft2(x)) / (H*W) == x`` for real x.
    """
    return np.fft.fft2(np.asarray(real) - 1j * np.asarray(imag), axes=(-2, -1)).real
