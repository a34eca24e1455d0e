"""Headless matplotlib renderings of the CSV reports.

Every report-producing command drops a PNG next to its delimited output so
a run's results can be eyeballed without further tooling.  pyplot is
imported lazily; nothing here touches a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _finish(fig, out_path) -> Path:
    out = Path(out_path)
    fig.savefig(out, dpi=110, bbox_inches="tight")
    _pyplot().close(fig)
    return out


def plot_depth_bins(summary, out_path) -> Path:
    """Bar chart of pooled residual means per depth bin."""
    plt = _pyplot()
    bins = len(summary.mean_residual)
    names = ("near", "mid", "far") if bins == 3 else [f"bin{k}" for k in range(bins)]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.bar(names, summary.mean_residual, color="#4878cf")
    ax.set_ylabel("mean residual |hazy - clear|")
    ax.set_xlabel("normalized depth bin")
    ax.set_title(f"residual haze by depth ({len(summary.per_image)} images)")
    return _finish(fig, out_path)


def plot_train_curves(log_rows, out_path) -> Path:
    """Training loss and validation PSNR over epochs.

    log_rows: sequence of dicts with keys epoch, train_loss, val_psnr
    (val cells may be empty strings on non-validated epochs).
    """
    plt = _pyplot()
    epochs = [int(r["epoch"]) for r in log_rows]
    loss = [float(r["train_loss"]) for r in log_rows]
    val = [(int(r["epoch"]), float(r["val_psnr"]))
           for r in log_rows if r["val_psnr"] != ""]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(epochs, loss, color="#c44e52", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="#c44e52")
    if val:
        ax2 = ax.twinx()
        ax2.plot([e for e, _ in val], [p for _, p in val],
                 color="#4878cf", marker="o", markersize=3, label="val PSNR")
        ax2.set_ylabel("val PSNR (dB)", color="#4878cf")
    ax.set_title("training curves")
    return _finish(fig, out_path)


def plot_bench(points, out_path, slope: float | None = None) -> Path:
    """Log-log wall time against pixel count with the fitted power law."""
    plt = _pyplot()
    px = np.array([float(p.h * p.w) for p in points])
    ns = np.array([float(p.wall_ns) for p in points])
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.loglog(px, ns, "o-", color="#4878cf", label="measured")
    if slope is not None and len(points) >= 2:
        fit = ns[0] * (px / px[0]) ** slope
        ax.loglog(px, fit, "--", color="#999999",
                  label=f"fit slope {slope:.2f}")
    ax.set_xlabel("pixels")
    ax.set_ylabel("wall time (ns)")
    ax.set_title("windowed attention scaling")
    ax.legend()
    return _finish(fig, out_path)


def plot_ablation(rows, out_path) -> Path:
    """PSNR per variant; rows are (variant, params, psnr, ssim)."""
    plt = _pyplot()
    names = [r[0] for r in rows]
    psnr = [float(r[2]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(5.0, 0.55 * len(rows)), 3.6))
    ax.bar(names, psnr, color="#4878cf")
    ax.set_ylabel("val PSNR (dB)")
    ax.set_title("ablation comparison")
    ax.tick_params(axis="x", rotation=60)
    return _finish(fig, out_path)


def plot_eval(rows, out_path) -> Path:
    """Per-image PSNR from evaluation rows (index, psnr, ssim, ...)."""
    plt = _pyplot()
    idx = [int(r[0]) for r in rows]
    psnr = [float(r[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.bar(idx, psnr, color="#4878cf", width=0.8)
    ax.axhline(float(np.mean(psnr)), color="#c44e52", linestyle="--",
               label=f"mean {np.mean(psnr):.2f} dB")
    ax.set_xlabel("image index")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("per-image restoration quality")
    ax.legend()
    return _finish(fig, out_path)
