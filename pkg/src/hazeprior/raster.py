"""Flat binary raster format and 8-bit PNG previews.

Layout (little-endian throughout)::

    bytes 0..3   magic "UDPF"
    u32          rank
    rank x u32   extents
    f32 x prod   values, row-major (C order)

Values are stored as float32; loading up-converts to float64, so a
save/load round trip equals ``float64(float32(x))`` exactly.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UDPF"


def raster_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array to the raster wire format."""
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def save_raster(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(raster_bytes(arr))


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise IOError(f"raster truncated while reading {what}")
    return b


def read_raster_stream(buf: io.BufferedIOBase) -> np.ndarray:
    """Parse one raster record from a binary stream; float64 result."""
    magic = _read_exact(buf, 4, "magic")
    if magic != MAGIC:
        raise IOError(f"bad raster magic {magic!r}, want {MAGIC!r}")
    rank, = struct.unpack("<I", _read_exact(buf, 4, "rank"))
    if rank > 8:
        raise IOError(f"implausible raster rank {rank}")
    extents = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, "extents"))
    count = 1
    for e in extents:
        count *= e
    payload = _read_exact(buf, 4 * count, "payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(extents)


def load_raster(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_raster_stream(fh)
        if fh.read(1):
            raise IOError(f"trailing bytes after raster in {path}")
    return arr


def save_preview_png(path: str | Path, img: np.ndarray) -> None:
    """Write a clamped 8-bit preview.

    (3, H, W) saves as RGB, (1, H, W) or (H, W) as grayscale.  Input is
    assumed nominally in [0, 1]; values outside are clamped, never scaled.
    """
    from PIL import Image

    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    elif img.ndim != 2:
        raise ValueError(f"preview needs (3,H,W), (1,H,W) or (H,W), got {img.shape}")
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(Path(path), format="PNG")
