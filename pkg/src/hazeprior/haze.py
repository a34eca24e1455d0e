"""Atmospheric scattering model and synthetic scene generation.

The degradation model is the usual one: a clear radiance J seen through a
medium with per-pixel transmission t and a global airlight A arrives as

    H = J * t + A * (1 - t),        t = exp(-beta * depth)

per color channel.  Everything here is plain numpy (the synthesis and the
analytic inverse never need gradients).  Scenes are procedurally generated,
deterministic in their seed, with depth in [0, 1] where larger means farther.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParameterError
from .raster import load_raster, save_preview_png, save_raster
from .runtime import thread_count

STYLES = ("outdoor_ramp", "indoor_boxes", "mixed")
T_FLOOR_DEFAULT = 0.05
SIZE_MIN, SIZE_MAX = 16, 512

MANIFEST_COLUMNS = ("index", "seed", "beta",
                    "airlight_r", "airlight_g", "airlight_b",
                    "height", "width")


@dataclass
class AsmParams:
    """Scattering parameters for one image."""
    beta: float
    airlight: np.ndarray          # (3,)
    t_floor: float = T_FLOOR_DEFAULT

    def __post_init__(self):
        self.airlight = np.asarray(self.airlight, dtype=np.float64).reshape(-1)
        if self.airlight.shape != (3,):
            raise ParameterError(f"airlight must have 3 channels, got {self.airlight.shape}")
        if not self.beta > 0:
            raise ParameterError(f"beta must be > 0, got {self.beta}")
        if not 0 < self.t_floor <= 1:
            raise ParameterError(f"t_floor must lie in (0, 1], got {self.t_floor}")


@dataclass
class ScenePair:
    """One synthetic sample; hazy/params are filled once haze is composed."""
    clear: np.ndarray             # (3, H, W)
    depth: np.ndarray             # (1, H, W), in [0, 1]
    hazy: np.ndarray | None = None
    params: AsmParams | None = None
    seed: int = 0


# ---------------------------------------------------------------------------
# scattering model
# ---------------------------------------------------------------------------


def transmission_map(depth: np.ndarray, beta: float) -> np.ndarray:
    """t = exp(-beta * depth); lies in (0, 1] for depth >= 0, beta > 0."""
    depth = np.asarray(depth, dtype=np.float64)
    if not beta > 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    if depth.size and depth.min() < 0:
        raise ParameterError(f"depth must be non-negative, min is {depth.min()}")
    return np.exp(-beta * depth)


def compose_haze(clear: np.ndarray, t: np.ndarray, airlight: np.ndarray) -> np.ndarray:
    """H = J*t + A*(1-t), channelwise with a global per-channel airlight."""
    clear = np.asarray(clear, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a = np.asarray(airlight, dtype=np.float64).reshape(3, 1, 1)
    return clear * t + a * (1.0 - t)


def analytic_dehaze(hazy: np.ndarray, t: np.ndarray, airlight: np.ndarray,
                    t_floor: float = T_FLOOR_DEFAULT) -> np.ndarray:
    """Exact inverse J = (H - A) / max(t, t_floor) + A.

    Inverts ``compose_haze`` to rounding error wherever t >= t_floor.
    """
    if not 0 < t_floor <= 1:
        raise ParameterError(f"t_floor must lie in (0, 1], got {t_floor}")
    hazy = np.asarray(hazy, dtype=np.float64)
    t = np.maximum(np.asarray(t, dtype=np.float64), t_floor)
    a = np.asarray(airlight, dtype=np.float64).reshape(3, 1, 1)
    return (hazy - a) / t + a


# ---------------------------------------------------------------------------
# procedural scenes
# ---------------------------------------------------------------------------


def _bilinear_resize2d(a: np.ndarray, h: int, w: int) -> np.ndarray:
    ih, iw = a.shape
    y = np.linspace(0.0, ih - 1.0, h)
    x = np.linspace(0.0, iw - 1.0, w)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    fy = (y - y0)[:, None]
    fx = (x - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _smooth_field(rng: np.random.Generator, h: int, w: int,
                  cells: int, amp: float) -> np.ndarray:
    grid = rng.uniform(-amp, amp, size=(cells, cells))
    return _bilinear_resize2d(grid, h, w)


def _textured_albedo(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Stationary piecewise texture; brightness statistics do not follow depth."""
    cells = int(rng.integers(5, 10))
    base = rng.uniform(0.15, 0.75, size=(3, cells, cells))
    img = np.stack([_bilinear_resize2d(base[c], h, w) for c in range(3)])
    fine = rng.uniform(-0.05, 0.05, size=(3, h, w))
    img = img + fine
    for _ in range(int(rng.integers(2, 5))):
        bh = int(rng.integers(h // 8, max(h // 3, h // 8 + 1)))
        bw = int(rng.integers(w // 8, max(w // 3, w // 8 + 1)))
        y = int(rng.integers(0, h - bh + 1))
        x = int(rng.integers(0, w - bw + 1))
        img[:, y:y + bh, x:x + bw] = rng.uniform(0.1, 0.8, size=(3, 1, 1))
    return np.clip(img, 0.0, 1.0)


def _span_depth(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rescale to a wide sub-interval of [0, 1]."""
    lo = rng.uniform(0.0, 0.05)
    hi = rng.uniform(0.95, 1.0)
    dmin, dmax = d.min(), d.max()
    if dmax - dmin < 1e-12:
        return np.full_like(d, 0.5 * (lo + hi))
    return (d - dmin) / (dmax - dmin) * (hi - lo) + lo


def _outdoor_ramp(rng: np.random.Generator, h: int, w: int):
    # farther toward the top row, like ground receding to the horizon
    ramp = np.linspace(1.0, 0.0, h)[:, None] * np.ones((1, w))
    tilt = rng.uniform(-0.08, 0.08) * np.linspace(-1.0, 1.0, w)[None, :]
    depth = ramp + tilt + _smooth_field(rng, h, w, 4, 0.06)
    depth = _span_depth(depth, rng)
    clear = _textured_albedo(rng, h, w)
    return clear, depth[None]


def _indoor_boxes(rng: np.random.Generator, h: int, w: int):
    # mid-distance back wall with a few near occluders in front
    wall = 0.55 + 0.25 * np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    depth = wall + _smooth_field(rng, h, w, 4, 0.03)
    clear = _textured_albedo(rng, h, w)
    for _ in range(int(rng.integers(3, 7))):
        bh = int(rng.integers(max(h // 6, 2), max(h // 2, 3)))
        bw = int(rng.integers(max(w // 6, 2), max(w // 2, 3)))
        y = int(rng.integers(0, h - bh + 1))
        x = int(rng.integers(0, w - bw + 1))
        depth[y:y + bh, x:x + bw] = rng.uniform(0.03, 0.35)
        clear[:, y:y + bh, x:x + bw] = np.clip(
            rng.uniform(0.1, 0.8, size=(3, 1, 1)) + rng.uniform(-0.04, 0.04, size=(3, bh, bw)),
            0.0, 1.0)
    depth = _span_depth(depth, rng)
    return clear, depth[None]


def generate_scene(h: int, w: int, seed: int, style: str = "mixed") -> ScenePair:
    """Procedural clear/depth pair, deterministic in (h, w, seed, style).

    Parameters
    ----------
    h, w : int in [16, 512]
    seed : int
    style : "outdoor_ramp" | "indoor_boxes" | "mixed"
        mixed picks one of the other two per seed and widens the depth span.
    """
    if not (SIZE_MIN <= h <= SIZE_MAX and SIZE_MIN <= w <= SIZE_MAX):
        raise ParameterError(f"scene size must lie in [{SIZE_MIN}, {SIZE_MAX}], got {h}x{w}")
    if style not in STYLES:
        raise ConfigError(f"unknown scene style {style!r}, expected one of {STYLES}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 0xD5]))
    pick = style
    if style == "mixed":
        pick = "outdoor_ramp" if rng.uniform() < 0.5 else "indoor_boxes"
    clear, depth = (_outdoor_ramp if pick == "outdoor_ramp" else _indoor_boxes)(rng, h, w)
    return ScenePair(clear=clear, depth=np.clip(depth, 0.0, 1.0), seed=int(seed))


# ---------------------------------------------------------------------------
# dataset synthesis and loading
# ---------------------------------------------------------------------------


def _pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & (2**63 - 1), int(index)]))


def synth_pair(seed: int, index: int, size: tuple[int, int], style: str,
               beta_range: tuple[float, float],
               airlight_range: tuple[float, float]) -> ScenePair:
    """Draw per-pair parameters and compose one hazy/clear/depth triple."""
    if beta_range[0] > beta_range[1] or beta_range[0] <= 0:
        raise ParameterError(f"bad beta range {beta_range}")
    if airlight_range[0] > airlight_range[1]:
        raise ParameterError(f"bad airlight range {airlight_range}")
    rng = _pair_rng(seed, index)
    beta = float(rng.uniform(*beta_range))
    airlight = rng.uniform(airlight_range[0], airlight_range[1], size=3)
    scene_seed = int(rng.integers(0, 2**62))
    pair = generate_scene(size[0], size[1], scene_seed, style)
    params = AsmParams(beta=beta, airlight=airlight)
    t = transmission_map(pair.depth, beta)
    pair.hazy = compose_haze(pair.clear, t, params.airlight)
    pair.params = params
    pair.seed = scene_seed
    return pair


def _write_pair(out: Path, index: int, pair: ScenePair) -> None:
    stem = f"{index:05d}"
    save_raster(out / f"clear_{stem}.udpf", pair.clear)
    save_raster(out / f"hazy_{stem}.udpf", pair.hazy)
    save_raster(out / f"depth_{stem}.udpf", pair.depth)
    save_preview_png(out / f"clear_{stem}_preview.png", pair.clear)
    save_preview_png(out / f"hazy_{stem}_preview.png", pair.hazy)
    save_preview_png(out / f"depth_{stem}_preview.png", pair.depth)


def synth_dataset(out_dir: str | Path, count: int, seed: int,
                  style: str = "mixed", size: tuple[int, int] = (64, 64),
                  beta_range: tuple[float, float] = (0.5, 1.5),
                  airlight_range: tuple[float, float] = (0.8, 1.0)) -> Path:
    """Write ``count`` triples plus previews and a manifest into ``out_dir``.

    Pair i is a pure function of (seed, i), so synthesis is farmed out to a
    thread pool (capped by UDP_THREADS) and the output is byte-identical to
    a sequential run.  Returns the manifest path.
    """
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def job(i: int) -> list:
        pair = synth_pair(seed, i, size, style, beta_range, airlight_range)
        _write_pair(out, i, pair)
        a = pair.params.airlight
        return [i, pair.seed, repr(pair.params.beta),
                repr(float(a[0])), repr(float(a[1])), repr(float(a[2])),
                size[0], size[1]]

    workers = min(thread_count(), count)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, range(count)))
    else:
        rows = [job(i) for i in range(count)]

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(MANIFEST_COLUMNS)
        wr.writerows(rows)
    return manifest


def read_manifest(dataset_dir: str | Path) -> list[dict]:
    """Manifest rows as dicts with numeric fields parsed."""
    path = Path(dataset_dir) / "manifest.csv"
    if not path.exists():
        raise IOError(f"no manifest.csv in {dataset_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise IOError(f"empty manifest in {dataset_dir}")
    out = []
    for r in rows:
        out.append({
            "index": int(r["index"]),
            "seed": int(r["seed"]),
            "beta": float(r["beta"]),
            "airlight": np.array([float(r["airlight_r"]), float(r["airlight_g"]),
                                  float(r["airlight_b"])]),
            "height": int(r["height"]),
            "width": int(r["width"]),
        })
    return out


def load_pair(dataset_dir: str | Path, index: int, need_clear: bool = True) -> ScenePair:
    """Load one triple by index; a missing file is an I/O error naming it."""
    d = Path(dataset_dir)
    stem = f"{index:05d}"
    paths = {"hazy": d / f"hazy_{stem}.udpf", "depth": d / f"depth_{stem}.udpf"}
    if need_clear:
        paths["clear"] = d / f"clear_{stem}.udpf"
    arrays = {}
    for kind, p in paths.items():
        if not p.exists():
            raise IOError(f"pair {index}: missing {kind} raster {p}")
        arrays[kind] = load_raster(p)
    return ScenePair(clear=arrays.get("clear"), depth=arrays["depth"],
                     hazy=arrays["hazy"], seed=index)


def load_dataset(dataset_dir: str | Path) -> list[ScenePair]:
    rows = read_manifest(dataset_dir)
    return [load_pair(dataset_dir, r["index"]) for r in rows]
