"""Single-file weight archive.

Layout: magic "UDPC", u32 entry count, then per entry a u16 name length,
the UTF-8 name, and an embedded raster.  The network configuration rides
along under the reserved name ``__config__`` as a rank-1 raster of UTF-8
byte values, so a checkpoint alone is enough to rebuild its model.

Rasters store f32.  Saving therefore quantizes the live weights to f32
in place first, which makes save -> load -> forward bit-exact against
the post-save model.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import ConfigError, ShapeError
from .network import ModelWeights, build_variant, config_from_text, config_to_text
from .raster import raster_bytes, read_raster_stream

MAGIC = b"UDPC"
CONFIG_KEY = "__config__"
_RESERVED_PREFIX = "__"


def _text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _array_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode("utf-8")


def quantize_f32(weights: ModelWeights) -> None:
    """Round every parameter to f32 precision, in place."""
    for _, t in weights.named():
        t.data[...] = t.data.astype(np.float32)


def write_archive(path, entries) -> None:
    """``entries``: iterable of (name, float array). Order is preserved."""
    items = list(entries)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ConfigError(f"entry name too long ({len(raw)} bytes)")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(raster_bytes(np.asarray(arr, dtype=np.float64)))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_archive(path) -> dict:
    """Name -> float64 array, insertion-ordered."""
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise IOError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            if name in out:
                raise IOError(f"{path}: duplicate entry {name!r}")
            out[name] = read_raster_stream(f)
    return out


def save_checkpoint(path, weights: ModelWeights, extra: dict | None = None) -> None:
    """Write weights (f32-quantized in place), config, and optional extra
    entries such as optimizer state.  Extra names must not collide with
    parameter names."""
    quantize_f32(weights)
    entries = [(CONFIG_KEY, _text_to_array(config_to_text(weights.cfg)))]
    names = set()
    for name, t in weights.named():
        if name.startswith(_RESERVED_PREFIX):
            raise ConfigError(f"parameter name {name!r} uses a reserved prefix")
        if name in names:
            raise ConfigError(f"duplicate parameter name {name!r}")
        names.add(name)
        entries.append((name, t.data))
    for name, arr in (extra or {}).items():
        if name in names or name == CONFIG_KEY:
            raise ConfigError(f"extra entry {name!r} collides with a parameter")
        entries.append((name, np.asarray(arr, dtype=np.float64).astype(np.float32)))
    write_archive(path, entries)


def load_checkpoint(path):
    """Rebuild (weights, extra) from an archive written by save_checkpoint."""
    raw = read_archive(path)
    if CONFIG_KEY not in raw:
        raise IOError(f"{path}: missing {CONFIG_KEY} entry")
    cfg = config_from_text(_array_to_text(raw.pop(CONFIG_KEY)))
    weights = build_variant(cfg)
    extra = {}
    params = dict(weights.named())
    seen = set()
    for name, arr in raw.items():
        if name in params:
            t = params[name]
            if arr.shape != t.shape:
                raise ShapeError(
                    f"{path}: entry {name!r} has shape {arr.shape}, expected {t.shape}")
            t.data[...] = arr
            seen.add(name)
        else:
            extra[name] = arr
    missing = sorted(set(params) - seen)
    if missing:
        raise IOError(f"{path}: missing parameters {missing[:3]}"
                      f"{' ...' if len(missing) > 3 else ''}")
    return weights, extra
