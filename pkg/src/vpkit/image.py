"""Raster type and the drawing/filter primitives visual prompts are built from.

Images are 8-bit RGB held in a read-only ``(height, width, 3)`` uint8 array.
Every function here is pure: inputs are never mutated and a fresh raster is
returned. Pixel ``(x, y)`` has its center at ``(x + 0.5, y + 0.5)``; a pixel
belongs to a shape when that center lies inside the ideal shape boundary.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .errors import BoundsError, InvalidParameterError

Shape = Literal["rect-outline", "ellipse-outline", "filled-disc", "arrow"]
SHAPES: tuple[str, ...] = ("rect-outline", "ellipse-outline", "filled-disc", "arrow")


class ImageRaster:
    """Immutable RGB pixel grid."""

    __slots__ = ("_pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.asarray(pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidParameterError(f"expected (H, W, 3) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidParameterError("image dimensions must be positive")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.integer) and (arr.min() < 0 or arr.max() > 255):
                raise InvalidParameterError("channel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.array(arr, dtype=np.uint8, order="C", copy=True)
        arr.setflags(write=False)
        self._pixels = arr

    @classmethod
    def filled(cls, width: int, height: int, color: "Color | tuple[int, int, int]") -> "ImageRaster":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = tuple(color)
        return cls(arr)

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    def tobytes(self) -> bytes:
        return self._pixels.tobytes()

    def digest(self) -> bytes:
        """SHA-256 over dimensions and row-major pixel bytes."""
        h = hashlib.sha256()
        h.update(self.width.to_bytes(4, "little"))
        h.update(self.height.to_bytes(4, "little"))
        h.update(self._pixels.tobytes())
        return h.digest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRaster):
            return NotImplemented
        return np.array_equal(self._pixels, other._pixels)

    def __hash__(self) -> int:
        return hash(self.digest())

    def __repr__(self) -> str:
        return f"ImageRaster({self.width}x{self.height})"


@dataclass(frozen=True)
class Color:
    r: int
    g: int
    b: int

    def __post_init__(self):
        for c in (self.r, self.g, self.b):
            if not 0 <= c <= 255:
                raise InvalidParameterError(f"channel value {c} outside [0, 255]")

    def __iter__(self):
        return iter((self.r, self.g, self.b))


RED = Color(255, 0, 0)


@dataclass(frozen=True)
class RectRegion:
    """Half-open pixel rectangle: x0/y0 inclusive, x1/y1 exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def is_valid_for(self, width: int, height: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def check(self, img: ImageRaster) -> None:
        if not self.is_valid_for(img.width, img.height):
            raise BoundsError(f"{self} is not inside a {img.width}x{img.height} image")

    def grow(self, amount: float) -> tuple[float, float, float, float]:
        return (self.x0 - amount, self.y0 - amount, self.x1 + amount, self.y1 + amount)


def _check_sigma(sigma: float) -> None:
    if not (isinstance(sigma, (int, float)) and math.isfinite(sigma) and sigma > 0):
        raise InvalidParameterError(f"sigma must be a positive finite number, got {sigma!r}")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(3*sigma)."""
    _check_sigma(sigma)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * data.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(data, pad, mode="edge")
    n = data.shape[axis]
    out = np.zeros_like(data)
    for i, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def _to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(data), 0, 255).astype(np.uint8)


def gaussian_blur(img: ImageRaster, sigma: float) -> ImageRaster:
    """Separable Gaussian blur with clamp-to-edge borders."""
    kernel = gaussian_kernel(sigma)
    data = img.pixels.astype(np.float64)
    data = _blur_axis(data, kernel, axis=1)
    data = _blur_axis(data, kernel, axis=0)
    return ImageRaster(_to_uint8(data))


def crop_region(img: ImageRaster, region: RectRegion) -> ImageRaster:
    region.check(img)
    return ImageRaster(img.pixels[region.y0 : region.y1, region.x0 : region.x1])


def _pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    return xs[None, :], ys[:, None]


def arrow_length(width: int, height: int, stroke: int) -> float:
    return max(0.25 * min(width, height), 2.0 * stroke)


def shape_footprint(
    shape: str, region: RectRegion, stroke: int, width: int, height: int
) -> np.ndarray:
    """Boolean ``(height, width)`` mask of the pixels a shape paints."""
    if shape not in SHAPES:
        raise InvalidParameterError(f"unknown shape {shape!r}")
    if not isinstance(stroke, (int, np.integer)) or stroke < 1:
        raise InvalidParameterError(f"stroke must be an integer >= 1, got {stroke!r}")
    if not region.is_valid_for(width, height):
        raise BoundsError(f"{region} is not inside a {width}x{height} image")

    px, py = _pixel_centers(width, height)
    x0, y0, x1, y1 = region.x0, region.y0, region.x1, region.y1

    if shape == "rect-outline":
        # band of `stroke` pixels centered on the region's border ring
        out = (stroke - 1) // 2
        ox0, oy0, ox1, oy1 = x0 - out, y0 - out, x1 + out, y1 + out
        ix0, iy0, ix1, iy1 = ox0 + stroke, oy0 + stroke, ox1 - stroke, oy1 - stroke
        outer = (px > ox0) & (px < ox1) & (py > oy0) & (py < oy1)
        inner = (px > ix0) & (px < ix1) & (py > iy0) & (py < iy1)
        return outer & ~inner

    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    a, b = (x1 - x0) / 2.0, (y1 - y0) / 2.0

    if shape == "filled-disc":
        return ((px - cx) / a) ** 2 + ((py - cy) / b) ** 2 <= 1.0

    if shape == "ellipse-outline":
        half = stroke / 2.0
        oa, ob = a + half, b + half
        outer = ((px - cx) / oa) ** 2 + ((py - cy) / ob) ** 2 <= 1.0
        ia, ib = a - half, b - half
        if ia <= 0 or ib <= 0:
            return outer
        inner = ((px - cx) / ia) ** 2 + ((py - cy) / ib) ** 2 < 1.0
        return outer & ~inner

    # arrow: shaft from above the box down to its top-edge midpoint, head at the tip
    length = arrow_length(width, height, stroke)
    tip_y = float(y0)
    start_y = tip_y - length
    head_len = min(length, 3.0 * stroke)
    head_half = 1.5 * stroke
    shaft = (np.abs(px - cx) <= stroke / 2.0) & (py >= start_y) & (py <= tip_y - head_len)
    in_head_rows = (py >= tip_y - head_len) & (py <= tip_y)
    head = in_head_rows & (np.abs(px - cx) <= head_half * (tip_y - py) / head_len)
    return shaft | head


def footprint_bounds(shape: str, region: RectRegion, stroke: int, width: int, height: int):
    """Dilated box (x0, y0, x1, y1) guaranteed to contain a shape's footprint."""
    grow = float(stroke)
    if shape == "arrow":
        grow += arrow_length(width, height, stroke)
    return region.grow(grow)


def draw_overlay(
    img: ImageRaster,
    shape: str,
    region: RectRegion,
    color: Color | tuple[int, int, int],
    stroke: int,
) -> ImageRaster:
    """Paint an opaque shape anchored on ``region`` and return the new raster."""
    mask = shape_footprint(shape, region, stroke, img.width, img.height)
    out = img.pixels.copy()
    out[mask] = tuple(color)
    return ImageRaster(out)


def resize_bilinear(img: ImageRaster, w: int, h: int) -> ImageRaster:
    """Bilinear resampling with half-pixel-center alignment."""
    if w <= 0 or h <= 0:
        raise InvalidParameterError(f"target size must be positive, got {w}x{h}")
    src = img.pixels.astype(np.float64)
    H, W = img.height, img.width

    def coords(n_out: int, n_in: int):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    xl, xh, xf = coords(w, W)
    yl, yh, yf = coords(h, H)
    xf = xf[None, :, None]
    yf = yf[:, None, None]
    top = src[yl][:, xl] * (1 - xf) + src[yl][:, xh] * xf
    bottom = src[yh][:, xl] * (1 - xf) + src[yh][:, xh] * xf
    return ImageRaster(_to_uint8(top * (1 - yf) + bottom * yf))


def read_image(path: str | Path) -> ImageRaster:
    with Image.open(path) as im:
        return ImageRaster(np.asarray(im.convert("RGB")))


def encode_png(img: ImageRaster) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels).save(buf, format="PNG")
    return buf.getvalue()


def decode_image(data: bytes) -> ImageRaster:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return ImageRaster(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise InvalidParameterError(f"bytes are not a decodable image: {exc}") from exc


def write_image(img: ImageRaster, path: str | Path) -> None:
    """Write PNG or JPEG depending on the suffix. Only PNG is lossless."""
    path = Path(path)
    fmt = "JPEG" if path.suffix.lower() in (".jpg", ".jpeg") else "PNG"
    Image.fromarray(img.pixels).save(path, format=fmt)
