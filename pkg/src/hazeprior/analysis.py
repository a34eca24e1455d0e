"""Residual-haze statistics over depth bins.

The residual map |hazy - clear|, averaged over channels, is a proxy for
local haze density.  Binning it by normalized scene depth (equal-width
Near / Mid / Far intervals) exposes how haze concentrates with distance;
the corpus summary pools the per-image bins with pixel-count weights.
"""

from __future__ import annotations

import csv
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .raster import load_raster
from .runtime import thread_count

DEFAULT_BINS = 3
BIN_NAMES_3 = ("near", "mid", "far")
_HAZY_RE = re.compile(r"^hazy_(\d{5})\.udpf$")


@dataclass(frozen=True)
class DepthBinStats:
    bin_edges: tuple       # len bins + 1, from 0.0 to 1.0
    mean_residual: tuple   # len bins
    pixel_counts: tuple    # len bins, sums to H*W


@dataclass
class CorpusSummary:
    per_image: list        # (index, DepthBinStats), ordered by index
    mean_residual: tuple   # count-weighted pooled bin means
    pixel_counts: tuple    # pooled per-bin counts
    bin_edges: tuple
    skipped: int           # images dropped for degenerate (constant) depth


def residual_map(hazy, clear) -> np.ndarray:
    """Channel-mean absolute difference, shape (1, H, W)."""
    hazy = np.asarray(hazy, dtype=np.float64)
    clear = np.asarray(clear, dtype=np.float64)
    if hazy.shape != clear.shape:
        raise ShapeError(f"residual_map: shapes {hazy.shape} vs {clear.shape}")
    if hazy.ndim == 2:
        hazy = hazy[None]
        clear = clear[None]
    if hazy.ndim != 3:
        raise ShapeError(f"residual_map: expected (C, H, W), got {hazy.shape}")
    return np.abs(hazy - clear).mean(axis=0, keepdims=True)


def bin_by_depth(residual, depth, bins: int = DEFAULT_BINS) -> DepthBinStats:
    """Equal-width depth bins of the residual map.

    Depth is min-max normalized per image first.  A boundary value belongs
    to the lower bin (0 to the first, 1 to the last).
    """
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    residual = np.asarray(residual, dtype=np.float64).reshape(-1)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    if residual.shape != depth.shape:
        raise ShapeError(
            f"bin_by_depth: residual has {residual.size} pixels, depth {depth.size}")
    lo, hi = depth.min(), depth.max()
    if hi == lo:
        raise DegenerateInputError(
            "bin_by_depth: constant depth (max == min), bins are undefined")
    norm = (depth - lo) / (hi - lo)
    idx = np.clip(np.ceil(norm * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sums = np.bincount(idx, weights=residual, minlength=bins)
    means = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
    edges = tuple(k / bins for k in range(bins + 1))
    return DepthBinStats(bin_edges=edges, mean_residual=tuple(means),
                         pixel_counts=tuple(int(c) for c in counts))


def _corpus_indices(hazy_dir) -> list:
    found = []
    for p in Path(hazy_dir).iterdir():
        m = _HAZY_RE.match(p.name)
        if m:
            found.append(int(m.group(1)))
    return sorted(found)


def _load_image(directory, kind: str, index: int) -> np.ndarray:
    path = Path(directory) / f"{kind}_{index:05d}.udpf"
    if not path.exists():
        raise IOError(f"pair {index}: missing {kind} raster {path}")
    return load_raster(path)


def analyze_corpus(hazy_dir, clear_dir, depth_dir, bins: int = DEFAULT_BINS,
                   out_csv=None) -> CorpusSummary:
    """Per-image and pooled bin statistics for a corpus of matching rasters.

    Images with constant depth are skipped and counted.  The optional CSV
    gets one row per image plus a pooled row with index ``ALL``.
    """
    indices = _corpus_indices(hazy_dir)
    if not indices:
        raise IOError(f"no pairs found in {hazy_dir}")

    def one(index: int):
        hazy = _load_image(hazy_dir, "hazy", index)
        clear = _load_image(clear_dir, "clear", index)
        depth = _load_image(depth_dir, "depth", index)
        res = residual_map(hazy, clear)
        try:
            return index, bin_by_depth(res, depth, bins)
        except DegenerateInputError:
            return index, None

    workers = max(1, min(thread_count(), len(indices)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, indices))

    per_image = [(i, s) for i, s in results if s is not None]
    skipped = len(results) - len(per_image)
    if not per_image:
        raise IOError(f"no usable pairs in {hazy_dir} "
                      f"({skipped} skipped for constant depth)")
    counts = np.zeros(bins)
    sums = np.zeros(bins)
    for _, st in per_image:
        c = np.array(st.pixel_counts, dtype=np.float64)
        counts += c
        sums += np.array(st.mean_residual) * c
    pooled = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
    summary = CorpusSummary(per_image=per_image, mean_residual=tuple(pooled),
                            pixel_counts=tuple(int(c) for c in counts),
                            bin_edges=per_image[0][1].bin_edges, skipped=skipped)
    if out_csv is not None:
        write_summary_csv(out_csv, summary, bins)
    return summary


def summary_columns(bins: int) -> list:
    names = BIN_NAMES_3 if bins == 3 else [f"bin{k}" for k in range(bins)]
    return ["index"] + [f"{n}_mean" for n in names] + [f"{n}_n" for n in names]


def write_summary_csv(path, summary: CorpusSummary, bins: int = DEFAULT_BINS) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(summary_columns(bins))
        for index, st in summary.per_image:
            wr.writerow([index] + [repr(m) for m in st.mean_residual]
                        + list(st.pixel_counts))
        wr.writerow(["ALL"] + [repr(m) for m in summary.mean_residual]
                    + list(summary.pixel_counts))
