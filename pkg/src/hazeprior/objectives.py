"""Training loss and full-reference quality metrics.

The loss supervises all three output scales in two domains: plain L1 in
pixel space plus L1 over the real and imaginary parts of the 2D spectrum.
Ground-truth targets at the lower scales come from 2x2 area averaging.
Metrics (PSNR, SSIM) are plain numpy; only the losses build graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError
from .ops import avg_pool2x2, fft2
from .tensor import Tensor, abs_, add, concat, mean, mul, sub

LAMBDA_FREQ_DEFAULT = 0.1
PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
EVAL_COLUMNS = ("index", "psnr_db", "ssim", "loss_spatial", "loss_freq")


@dataclass(frozen=True)
class LossWeights:
    """Mixing weight between the pixel-space and spectrum-space terms."""

    lambda_freq: float = LAMBDA_FREQ_DEFAULT

    def __post_init__(self):
        lf = float(self.lambda_freq)
        if not np.isfinite(lf) or lf < 0:
            raise ParameterError(f"lambda_freq must be finite and >= 0, got {self.lambda_freq}")


@dataclass
class LossReport:
    """Scalar breakdown plus the differentiable total."""

    spatial: float
    frequency: float
    total: float
    per_scale: tuple        # ((spatial_i, frequency_i) for each scale)
    graph: Tensor           # total as a graph node, for backward()


def _as_levels(pred) -> list:
    levels = list(pred.restored) if hasattr(pred, "restored") else list(pred)
    out = []
    for p in levels:
        p = p if isinstance(p, Tensor) else Tensor(p)
        if p.ndim != 4:
            raise ShapeError(f"prediction levels must be (N, C, H, W), got {p.shape}")
        out.append(p)
    return out


def _gt_pyramid(gt, levels: int) -> list:
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if gt.ndim == 3:
        gt = Tensor(gt.data[None])
    if gt.ndim != 4:
        raise ShapeError(f"ground truth must be (N, C, H, W), got {gt.shape}")
    if gt.shape[2] % (1 << (levels - 1)) or gt.shape[3] % (1 << (levels - 1)):
        raise ShapeError(
            f"ground truth dims {gt.shape[2:]} must be divisible by {1 << (levels - 1)}")
    pyr = [gt]
    for _ in range(levels - 1):
        pyr.append(avg_pool2x2(pyr[-1]))
    return pyr


def _check_pair(p: Tensor, g: Tensor, scale: int) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"scale {scale}: prediction {p.shape} vs target {g.shape}")


def spatial_loss(pred, gt) -> Tensor:
    """Sum over scales of the mean absolute pixel error."""
    levels = _as_levels(pred)
    pyr = _gt_pyramid(gt, len(levels))
    total = None
    for i, (p, g) in enumerate(zip(levels, pyr)):
        _check_pair(p, g, i)
        term = mean(abs_(sub(p, g)))
        total = term if total is None else add(total, term)
    return total


def frequency_loss(pred, gt) -> Tensor:
    """Sum over scales of the mean absolute error of the stacked real and
    imaginary spectrum parts."""
    levels = _as_levels(pred)
    pyr = _gt_pyramid(gt, len(levels))
    total = None
    for i, (p, g) in enumerate(zip(levels, pyr)):
        _check_pair(p, g, i)
        fp, fg = fft2(p), fft2(g)
        stacked = concat([sub(fp.real, fg.real), sub(fp.imag, fg.imag)], axis=1)
        term = mean(abs_(stacked))
        total = term if total is None else add(total, term)
    return total


def total_loss(pred, gt, w: LossWeights = LossWeights()) -> LossReport:
    levels = _as_levels(pred)
    pyr = _gt_pyramid(gt, len(levels))
    per_scale = []
    sp_total = fr_total = None
    for i, (p, g) in enumerate(zip(levels, pyr)):
        _check_pair(p, g, i)
        sp = mean(abs_(sub(p, g)))
        fp, fg = fft2(p), fft2(g)
        fr = mean(abs_(concat([sub(fp.real, fg.real), sub(fp.imag, fg.imag)], axis=1)))
        per_scale.append((float(sp.data), float(fr.data)))
        sp_total = sp if sp_total is None else add(sp_total, sp)
        fr_total = fr if fr_total is None else add(fr_total, fr)
    graph = add(sp_total, mul(fr_total, Tensor(w.lambda_freq)))
    return LossReport(spatial=float(sp_total.data), frequency=float(fr_total.data),
                      total=float(graph.data), per_scale=tuple(per_scale), graph=graph)


# ---------------------------------------------------------------------------
# metrics (numpy only, no graphs)
# ---------------------------------------------------------------------------


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB (the zero-MSE sentinel)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ParameterError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # valid-padding gaussian filtering of (..., H, W)
    win = sliding_window_view(img, kernel.shape, axis=(-2, -1))
    return np.tensordot(win, kernel, axes=([-2, -1], [-2, -1]))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity: 11x11 gaussian window (sigma 1.5), valid
    padding, computed per channel and averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ShapeError(f"ssim: need at least (H, W), got {a.shape}")
    if a.shape[-2] < SSIM_WINDOW or a.shape[-1] < SSIM_WINDOW:
        raise ParameterError(
            f"ssim: spatial dims {a.shape[-2:]} smaller than the {SSIM_WINDOW}x"
            f"{SSIM_WINDOW} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    k = _gaussian_window()
    mu_a = _window_means(a, k)
    mu_b = _window_means(b, k)
    var_a = _window_means(a * a, k) - mu_a * mu_a
    var_b = _window_means(b * b, k) - mu_b * mu_b
    cov = _window_means(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
