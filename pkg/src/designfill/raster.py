"""RGBA raster primitives shared by the quantizer, metrics, and preview renderer.

Images are stored as float arrays in [0, 1], channel order R, G, B, A. PNG I/O
converts to and from 8-bit with round-half-up.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ShapeMismatch(ValueError):
    """Two images disagree in shape where identical shapes are required."""


@dataclass(frozen=True, eq=False)
class RasterImage:
    """H x W x 4 image, values in [0, 1], channels RGBA."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 4:
            raise ValueError(f"expected an HxWx4 array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.isfinite(px).all():
            raise ValueError("pixel values must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __repr__(self) -> str:
        return f"RasterImage({self.height}x{self.width})"


def resize_bilinear(img: RasterImage, out_h: int, out_w: int) -> RasterImage:
    """Resize with bilinear interpolation, half-pixel-center sampling.

    Each channel is interpolated independently in lerp form a + w*(b - a),
    which preserves constant images bit-exactly. Output is clamped to [0, 1].
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    src = img.pixels
    h, w = src.shape[:2]
    if (out_h, out_w) == (h, w):
        return RasterImage(src)

    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)

    tl = src[np.ix_(y0c, x0c)]
    tr = src[np.ix_(y0c, x1c)]
    bl = src[np.ix_(y1c, x0c)]
    br = src[np.ix_(y1c, x1c)]
    top = tl + wx * (tr - tl)
    bot = bl + wx * (br - bl)
    out = top + wy * (bot - top)
    return RasterImage(np.clip(out, 0.0, 1.0))


def composite_over_white(img: RasterImage) -> RasterImage:
    """Alpha-composite onto a white background; result has alpha 1 everywhere."""
    px = img.pixels
    a = px[:, :, 3:4]
    # 1 + a*(rgb - 1) stays in [0, 1] exactly and is idempotent once a == 1
    rgb = 1.0 + a * (px[:, :, :3] - 1.0)
    out = np.concatenate([rgb, np.ones_like(a)], axis=2)
    return RasterImage(out)


def mse(a: RasterImage, b: RasterImage, channels: str) -> float:
    """Mean squared error over the selected channels ("rgb" or "alpha")."""
    if a.pixels.shape != b.pixels.shape:
        raise ShapeMismatch(f"{a.pixels.shape} vs {b.pixels.shape}")
    if channels == "rgb":
        sel = slice(0, 3)
    elif channels == "alpha":
        sel = slice(3, 4)
    else:
        raise ValueError(f"channels must be 'rgb' or 'alpha', got {channels!r}")
    d = a.pixels[:, :, sel] - b.pixels[:, :, sel]
    return float(np.mean(d * d))


def to_uint8(img: RasterImage) -> np.ndarray:
    """Convert to 8-bit RGBA with round-half-up."""
    return np.floor(img.pixels * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> RasterImage:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValueError("expected a uint8 array")
    return RasterImage(a.astype(np.float64) / 255.0)


def write_png(path, img: RasterImage) -> None:
    Image.fromarray(to_uint8(img), mode="RGBA").save(Path(path), format="PNG")


def read_png(path) -> RasterImage:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.uint8)
    return from_uint8(arr)


def png_bytes(img: RasterImage) -> bytes:
    """Encoded PNG bytes; used for content-addressed asset storage."""
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()
