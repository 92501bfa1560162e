"""Shared raster helpers: color-space conversion, grayscale, block statistics.

Slides are 8-bit RGB rasters; float images use [0, 1] per channel. HSV follows
the hexcone convention with hue scaled to [0, 1). OpenCV backs the per-pixel
conversions for speed; everything here is deterministic.
"""

from __future__ import annotations

import cv2
import numpy as np

from .errors import DomainError


def to_float(image: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0, 1]; float input is validated and passed through."""
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255.0)
    img = np.asarray(image, dtype=np.float32)
    return img


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(np.asarray(image, dtype=np.float32) * 255.0), 0, 255).astype(np.uint8)


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """float32 RGB [0,1] -> float32 HSV with h in [0,1), s,v in [0,1]."""
    img = to_float(image)
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)
    hsv[..., 0] /= np.float32(360.0)
    return hsv


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsv; output float32 RGB clipped to [0,1]."""
    h = np.asarray(hsv, dtype=np.float32).copy()
    h[..., 0] *= np.float32(360.0)
    rgb = cv2.cvtColor(h, cv2.COLOR_HSV2RGB)
    return np.clip(rgb, 0.0, 1.0)


def grayscale(image: np.ndarray) -> np.ndarray:
    """Luma grayscale (0.299 R + 0.587 G + 0.114 B), float32 in input scale."""
    img = image if image.dtype == np.float32 else to_float(image)
    return cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)


def saturation_value(image: np.ndarray):
    """Per-pixel HSV saturation and value channels, float32 in [0, 1].

    uint8 input uses the integer HSV conversion (values quantized to 1/255),
    float input the float32 conversion; both deterministic.
    """
    if image.dtype == np.uint8:
        hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV)
        scale = np.float32(1.0 / 255.0)
        return hsv[..., 1] * scale, hsv[..., 2] * scale
    hsv = rgb_to_hsv(image)
    return hsv[..., 1], hsv[..., 2]


def block_sum_exact(arr: np.ndarray, block: int) -> np.ndarray:
    """Per-block sums of a 2-D uint8/float32 array via a float64 integral image."""
    h, w = arr.shape
    rows, cols = h // block, w // block
    integral = cv2.integral(arr, sdepth=cv2.CV_64F)
    corners = integral[::block, ::block]
    a = corners[:rows, :cols]
    b = corners[:rows, 1:cols + 1]
    c = corners[1:rows + 1, :cols]
    d = corners[1:rows + 1, 1:cols + 1]
    return d - b - c + a


def laplacian(gray: np.ndarray) -> np.ndarray:
    return cv2.Laplacian(np.asarray(gray, dtype=np.float32), cv2.CV_32F)


def block_sum_exact(arr: np.ndarray, block: int) -> np.ndarray:
    """Per-block sums of a 2-D uint8/float32 array via a float64 integral image."""
    h, w = arr.shape
    rows, cols = h // block, w // block
    integral = cv2.integral(arr, sdepth=cv2.CV_64F)
    corners = integral[::block, ::block]
    a = corners[:rows, :cols]
    b = corners[:rows, 1:cols + 1]
    c = corners[1:rows + 1, :cols]
    d = corners[1:rows + 1, 1:cols + 1]
    return d - b - c + a


def laplacian(gray: np.ndarray) -> np.ndarray:
    return cv2.Laplacian(np.asarray(gray, dtype=np.float32), cv2.CV_32F)


def block_mean(arr: np.ndarray, block: int) -> np.ndarray:
    """Exact area mean over non-overlapping block x block cells (2-D input)."""
    h, w = arr.shape[:2]
    if h % block or w % block:
        raise DomainError(f"array shape {arr.shape} not divisible by block {block}")
    view = arr.reshape(h // block, block, w // block, block, *arr.shape[2:])
    return view.mean(axis=(1, 3), dtype=np.float64)


def block_var(arr: np.ndarray, block: int) -> np.ndarray:
    """Per-block population variance (2-D input)."""
    m = block_mean(arr, block)
    m2 = block_mean(np.asarray(arr, dtype=np.float64) ** 2, block)
    return np.maximum(m2 - m * m, 0.0)


def area_downsample_u8(image: np.ndarray, factor: int) -> np.ndarray:
    """Integer-factor area-average downsampling of a uint8 raster."""
    if factor == 1:
        return image
    h, w = image.shape[:2]
    return cv2.resize(image, (w // factor, h // factor), interpolation=cv2.INTER_AREA)


def lut_u8(fn) -> np.ndarray:
    """256-entry uint8 lookup table for a scalar map on [0, 255]."""
    i = np.arange(256, dtype=np.float64)
    return np.clip(np.rint(fn(i)), 0, 255).astype(np.uint8)


def color_jitter_u8(image: np.ndarray, brightness: float = 1.0,
                    contrast: float = 1.0, saturation: float = 1.0,
                    hue_deg: float = 0.0) -> np.ndarray:
    """Exact LUT-based color adjustment of a uint8 RGB raster.

    Applied in the fixed order brightness -> contrast -> saturation -> hue;
    saturation and hue act on the FULL-range uint8 HSV wheel (hue shifts
    quantize to 360/256 degree steps; a whole turn is the exact identity).
    Identity factors short-circuit, so the all-identity call returns the
    input bit-for-bit.
    """
    out = image
    if brightness != 1.0:
        out = cv2.LUT(out, lut_u8(lambda i: i * brightness))
    if contrast != 1.0:
        means = out.reshape(-1, 3).mean(axis=0)
        lut = np.stack([lut_u8(lambda i, m=m: (i - m) * contrast + m) for m in means],
                       axis=-1).reshape(1, 256, 3)
        out = cv2.LUT(out, lut)
    hue_shift = int(np.rint(hue_deg * 256.0 / 360.0)) % 256
    if saturation != 1.0 or hue_shift != 0:
        hsv = cv2.cvtColor(out, cv2.COLOR_RGB2HSV_FULL)
        if saturation != 1.0:
            hsv[..., 1] = cv2.LUT(hsv[..., 1], lut_u8(lambda i: i * saturation))
        if hue_shift != 0:
            hue_lut = ((np.arange(256, dtype=np.int32) + hue_shift) % 256).astype(np.uint8)
            hsv[..., 0] = cv2.LUT(hsv[..., 0], hue_lut)
        out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB_FULL)
    return out


def tile_stack(image: np.ndarray, tile_px: int, cells=None) -> np.ndarray:
    """Copy grid-aligned tiles into a (T, tile_px, tile_px, C) stack, row-major.

    cells: optional iterable of (row, col) grid cells; default all full cells.
    """
    h, w = image.shape[:2]
    rows, cols = h // tile_px, w // tile_px
    if cells is None:
        cells = [(r, c) for r in range(rows) for c in range(cols)]
    shape = (len(cells), tile_px, tile_px) + image.shape[2:]
    out = np.empty(shape, dtype=image.dtype)
    for i, (r, c) in enumerate(cells):
        out[i] = image[r * tile_px:(r + 1) * tile_px, c * tile_px:(c + 1) * tile_px]
    return out
