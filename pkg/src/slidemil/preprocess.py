"""Slide tiling with rule-based tissue/marker/blur QC.

Tissue is any pixel that is saturated enough and not too bright (white
background fails both); markers are taken from the synthetic ground-truth mask
when available, otherwise a color-gamut rule catches pen strokes. Tiles are
grid-aligned 224 px squares at x20 (native), x10 (2x area-averaged
downsampling) or x5 (4x); partial edge tiles are dropped. Every candidate cell
appears in the index exactly once, either accepted or carrying its QC flags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import cv2
import numpy as np

from . import imageops
from .errors import ConfigurationError, DomainError

MAGNIFICATION_FACTORS = {"x20": 1, "x10": 2, "x5": 4}
TILE_PX = 224


@dataclass(frozen=True)
class SegmentationParams:
    saturation_threshold: float = 0.08
    luminance_threshold: float = 0.92
    min_tissue_fraction: float = 0.5
    marker_overlap_max: float = 0.0
    blur_variance_min: float = 10.0

    def __post_init__(self):
        for name in ("saturation_threshold", "luminance_threshold",
                     "min_tissue_fraction", "marker_overlap_max"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        if self.blur_variance_min < 0:
            raise ConfigurationError("blur_variance_min must be >= 0")


@dataclass(frozen=True)
class TileSpec:
    slide_id: str
    row: int
    col: int
    magnification: str
    origin_px: tuple           # (y, x) top-left at native resolution
    qc_flags: tuple = ()
    accepted: bool = True

    def to_dict(self) -> dict:
        return {"slide_id": self.slide_id, "row": self.row, "col": self.col,
                "magnification": self.magnification,
                "origin_px": list(self.origin_px),
                "qc_flags": list(self.qc_flags), "accepted": self.accepted}

    @classmethod
    def from_dict(cls, d: dict) -> "TileSpec":
        return cls(slide_id=d["slide_id"], row=d["row"], col=d["col"],
                   magnification=d["magnification"],
                   origin_px=tuple(d["origin_px"]),
                   qc_flags=tuple(d["qc_flags"]), accepted=d["accepted"])


def detect_tissue(image: np.ndarray, params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    """Boolean tissue mask: saturation >= threshold and value <= threshold."""
    if image.size == 0:
        raise DomainError("empty image")
    sat, val = imageops.saturation_value(image)
    return (sat >= params.saturation_threshold) & (val <= params.luminance_threshold)


def detect_marker(image: np.ndarray, marker_mask_ground_truth=None) -> np.ndarray:
    """Marker mask: ground truth verbatim when supplied, else a gamut rule
    flagging saturated blue/green hues (90..245 degrees) and near-black pixels."""
    if image.size == 0:
        raise DomainError("empty image")
    if marker_mask_ground_truth is not None:
        return np.asarray(marker_mask_ground_truth, dtype=bool)
    if image.dtype == np.uint8:
        hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV)   # H in [0, 180)
        hue, sat, val = hsv[..., 0], hsv[..., 1], hsv[..., 2]
        blue_green = (hue >= 45) & (hue <= 122) & (sat >= 115)
        black = val <= 38
        return blue_green | black
    hsv = imageops.rgb_to_hsv(image)
    hue, sat, val = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    blue_green = (hue >= 90.0 / 360.0) & (hue <= 245.0 / 360.0) & (sat >= 0.45)
    black = val <= 0.15
    return blue_green | black


def tile_slide(slide, magnification: str,
               params: SegmentationParams = SegmentationParams(),
               use_marker_ground_truth: bool = True):
    """QC-filtered tiling of one slide at the requested magnification.

    Returns (specs, accepted_stack): specs lists every candidate grid cell in
    row-major order with its flags; accepted_stack is a (A, 224, 224, 3) uint8
    array of the accepted tiles in the same order.
    """
    if magnification not in MAGNIFICATION_FACTORS:
        raise ConfigurationError(f"unknown magnification {magnification!r}")
    factor = MAGNIFICATION_FACTORS[magnification]
    image = slide.image
    native_h, native_w = image.shape[:2]
    scaled = imageops.area_downsample_u8(image, factor)
    h, w = scaled.shape[:2]
    rows, cols = h // TILE_PX, w // TILE_PX
    if rows == 0 or cols == 0:
        return [], np.empty((0, TILE_PX, TILE_PX, 3), dtype=np.uint8)

    # partial edge tiles are dropped: crop to the full grid before block stats
    scaled = scaled[:rows * TILE_PX, :cols * TILE_PX]
    native_tile = TILE_PX * factor
    tissue = detect_tissue(scaled, params)
    marker_gt = slide.marker_mask if use_marker_ground_truth else None
    marker_native = detect_marker(image, marker_gt)[:rows * native_tile, :cols * native_tile]
    if scaled.dtype == np.uint8:
        gray = cv2.cvtColor(scaled, cv2.COLOR_RGB2GRAY).astype(np.float32)
    else:
        gray = imageops.grayscale(scaled) * np.float32(255.0)

    n_px = TILE_PX * TILE_PX
    tissue_frac = imageops.block_sum_exact(tissue.astype(np.uint8), TILE_PX) / n_px
    lap = imageops.laplacian(gray)
    lap_mean = imageops.block_sum_exact(lap, TILE_PX) / n_px
    lap_sq_mean = imageops.block_sum_exact(lap * lap, TILE_PX) / n_px
    lap_var = np.maximum(lap_sq_mean - lap_mean * lap_mean, 0.0)
    # marker overlap measured on the native-resolution footprint of each tile
    marker_frac = imageops.block_sum_exact(
        marker_native.astype(np.uint8), native_tile) / (native_tile * native_tile)

    specs = []
    accepted_cells = []
    for r in range(rows):
        for c in range(cols):
            flags = []
            if tissue_frac[r, c] < params.min_tissue_fraction:
                flags.append("background")
            if marker_frac[r, c] > params.marker_overlap_max:
                flags.append("marker_overlap")
            if lap_var[r, c] < params.blur_variance_min:
                flags.append("blur")
            accepted = not flags
            specs.append(TileSpec(
                slide_id=slide.slide_id, row=r, col=c, magnification=magnification,
                origin_px=(r * native_tile, c * native_tile),
                qc_flags=tuple(flags), accepted=accepted))
            if accepted:
                accepted_cells.append((r, c))
    stack = imageops.tile_stack(scaled, TILE_PX, accepted_cells)
    return specs, stack


def write_tile_index(specs, path):
    with open(path, "w") as fh:
        for spec in specs:
            fh.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")


def read_tile_index(path):
    specs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                specs.append(TileSpec.from_dict(json.loads(line)))
    return specs


@dataclass(frozen=True)
class ColorProfile:
    """Invertible per-channel-gamma + 3x3 linear color transform."""
    name: str
    matrix: tuple              # 3x3 nested tuple
    gamma: tuple               # per-channel gamma

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "ColorProfile":
        m = tuple(tuple(float(x) for x in row) for row in d["matrix"])
        g = tuple(float(x) for x in d["gamma"])
        return cls(name=name, matrix=m, gamma=g)

    def _matrix_array(self) -> np.ndarray:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ConfigurationError(f"profile matrix must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) < 1e-12:
            raise ConfigurationError(f"profile {self.name!r} matrix is singular")
        return m

    def inverse(self) -> "ColorProfile":
        inv = np.linalg.inv(self._matrix_array())
        return ColorProfile(name=self.name + "_inverse",
                            matrix=tuple(tuple(row) for row in inv.tolist()),
                            gamma=self.gamma)


IDENTITY_PROFILE = ColorProfile("identity", ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
                                (1.0, 1.0, 1.0))


def apply_color_standardization(image: np.ndarray, profile: ColorProfile) -> np.ndarray:
    """gamma-decode -> 3x3 matrix -> gamma-encode, clipped to the valid range.

    uint8 input yields uint8 output; float input stays float32 in [0, 1].
    """
    m = profile._matrix_array().astype(np.float32)
    gamma = np.asarray(profile.gamma, dtype=np.float32)
    was_uint8 = image.dtype == np.uint8
    x = imageops.to_float(image)
    if np.any(gamma != 1.0):
        x = np.clip(x, 0.0, 1.0) ** gamma
    y = x.reshape(-1, 3) @ m.T.astype(np.float32)
    y = np.clip(y.reshape(x.shape), 0.0, 1.0)
    if np.any(gamma != 1.0):
        y = y ** (np.float32(1.0) / gamma)
    return imageops.to_uint8(y) if was_uint8 else y
