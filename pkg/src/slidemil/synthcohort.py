"""Synthetic slide cohort generator.

Each slide is a flat grid of tile-sized cells whose histology class comes from
a seeded Voronoi partition of the grid, rendered as H&E-like flat fills plus
nuclei dots and sparse speckle. Tumor cells carry the planted signal: their
dot density and a palette hue rotation scale monotonically with
signal_strength * smooth_label(tpm). Expression values follow a two-mode
mixture in log2(TPM+1) space; copy-number segments, off-target mutation flags
and clinical attributes are drawn independently of the image so downstream
association tests have known ground truth.

All randomness is keyed by (cohort seed, slide index): slides can be generated
in any order, in parallel, with identical results. Scalar fields (tpm,
mutations, attributes, copy number) are drawn before any rendering draws, so
`draw_slide_scalars` reproduces them without paying for pixels.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image

from . import imageops, labels
from .errors import ConfigurationError, DomainError
from .runutil import rng_for
from .special import normal_sf

CLASS_NAMES = ("tumor", "stroma", "epithelium", "necrosis", "immune", "artifact", "background")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

MUTATION_GENES = ("BRAF", "EGFR", "KRAS", "TP53")
_MUTATION_RATES = {"BRAF": 0.05, "EGFR": 0.18, "KRAS": 0.32, "TP53": 0.55}

_ATTRIBUTE_LEVELS = {
    "gender": (("Female", 0.45), ("Male", 0.40), ("Unknown", 0.15)),
    "race": (("White", 0.48), ("Black or African American", 0.10), ("Asian", 0.04),
             ("Other Race", 0.05), ("Unknown", 0.33)),
    "smoking_status": (("Current smoker", 0.17), ("Ex-smoker", 0.40),
                       ("Never smoker", 0.14), ("Unknown", 0.29)),
    "stage": (("Stage 1", 0.08), ("Stage 2", 0.06), ("Stage 3", 0.10),
              ("Stage 4", 0.52), ("Unknown", 0.24)),
    "tissue_site": (("lung", 0.55), ("lymph", 0.10), ("other", 0.35)),
    "specimen_size": (("Large specimens", 0.32), ("Small specimens", 0.68)),
    "scanner": (("philips_like", 0.80), ("aperio_like", 0.20)),
    "stain_source": (("internal", 0.75), ("external", 0.25)),
}

# tissue palettes keep HSV saturation >= ~0.14 and value <= ~0.89 (QC margins
# for the default thresholds) and hues in [272, 315] degrees so stain jitter
# plus moderate hue perturbations never cross the circular wrap at 0/360
_BASE_COLORS = {
    "tumor": (175, 102, 186),
    "stroma": (224, 157, 213),
    "epithelium": (209, 138, 207),
    "necrosis": (219, 184, 211),
    "immune": (148, 101, 163),
    "artifact": (196, 184, 168),
    "background": (247, 246, 249),
}
_DOT_COLOR = (90, 43, 117)
_IMMUNE_DOT_COLOR = (77, 39, 110)
# label-independent per-slide stain/scanner variation; keeps the model off
# absolute color positions and keeps mild test-time perturbations in
# distribution. Brightness stays <= 1.03 so pale palettes clear the
# luminance QC threshold after jitter.
_STAIN_JITTER_HUE_DEG = 15.0
_STAIN_JITTER_BRIGHTNESS = (0.92, 1.03)
_STAIN_JITTER_SATURATION = (0.88, 1.12)
# per class: (base dot count, tpm-scaled extra count, min radius, max radius)
_DOT_SPECS = {
    "tumor": (20, 46, 2, 3),
    "stroma": (9, 0, 2, 3),
    "epithelium": (13, 0, 2, 3),
    "necrosis": (4, 0, 2, 3),
    "immune": (26, 0, 1, 2),
}
_TUMOR_HUE_SHIFT_DEG = -30.0   # at texture parameter 1
_REGION_CLASS_WEIGHTS = (("tumor", 0.32), ("stroma", 0.28), ("epithelium", 0.16),
                         ("necrosis", 0.11), ("immune", 0.13))
_MARKER_COLORS = ((40, 70, 200), (30, 150, 90), (25, 25, 28))
_SPECKLE_FRACTION = 0.06
_SPECKLE_AMPLITUDE = 12


def default_scanner_profiles() -> dict:
    """Named parametric color transforms standing in for scanner ICC profiles.

    The shifts are deliberately stronger than the generator's per-slide stain
    jitter, so a model trained on one "scanner" sees a genuine distribution
    shift (rank metrics should survive it; operating points should move).
    """
    return {
        "identity": {"matrix": np.eye(3).tolist(), "gamma": [1.0, 1.0, 1.0]},
        "warm_shift": {"matrix": [[1.14, 0.06, 0.0], [0.03, 1.0, 0.03], [0.0, 0.05, 0.84]],
                       "gamma": [1.15, 1.0, 0.88]},
        "cool_shift": {"matrix": [[0.84, 0.05, 0.03], [0.0, 0.97, 0.05], [0.03, 0.06, 1.14]],
                       "gamma": [0.90, 1.0, 1.12]},
    }


@dataclass(frozen=True)
class MixtureParams:
    """Two-component Gaussian mixture on log2(TPM + 1)."""
    mean_low: float = 6.5
    mean_high: float = 9.5
    sd_low: float = 0.8
    sd_high: float = 0.8
    weight_low: float = 0.55

    def positive_fraction(self, threshold_log_tpm: float = 8.0) -> float:
        """P(log2(tpm+1) >= threshold) implied by the mixture."""
        z_low = (threshold_log_tpm - self.mean_low) / self.sd_low
        z_high = (threshold_log_tpm - self.mean_high) / self.sd_high
        return (self.weight_low * normal_sf(z_low)
                + (1 - self.weight_low) * normal_sf(z_high))


@dataclass(frozen=True)
class CohortConfig:
    n_slides: int = 10
    grid_rows: int = 10
    grid_cols: int = 10
    tile_px: int = 224
    tpm_mixture: MixtureParams = field(default_factory=MixtureParams)
    signal_strength: float = 1.0
    marker_fraction: float = 0.1
    scanner_profiles: dict = field(default_factory=default_scanner_profiles)
    seed: int = 0

    def __post_init__(self):
        if self.n_slides < 1:
            raise ConfigurationError(f"n_slides must be >= 1, got {self.n_slides}")
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ConfigurationError("grid dimensions must be >= 2")
        if self.tile_px <= 0:
            raise ConfigurationError("tile_px must be > 0")
        if not 0 < self.tpm_mixture.weight_low < 1:
            raise ConfigurationError("mixture weight must be in (0, 1)")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigurationError("signal_strength must be in [0, 1]")
        if not 0.0 <= self.marker_fraction <= 1.0:
            raise ConfigurationError("marker_fraction must be in [0, 1]")


@dataclass
class SlideRecord:
    slide_id: str
    image: np.ndarray            # (H, W, 3) uint8
    histology_mask: np.ndarray   # (H, W) uint8 class indices
    marker_mask: np.ndarray      # (H, W) bool
    tpm: float
    cn_segments: list            # [(length, copy_number), ...]
    attributes: dict
    off_target_mutations: dict

    def __post_init__(self):
        if self.image.shape[:2] != self.histology_mask.shape or \
           self.image.shape[:2] != self.marker_mask.shape:
            raise DomainError("image and masks must share dimensions")
        if self.tpm < 0:
            raise DomainError("tpm must be >= 0")
        for length, _ in self.cn_segments:
            if length <= 0:
                raise DomainError("cn segment lengths must be > 0")


def _choice(rng, levels):
    names = [n for n, _ in levels]
    probs = np.array([p for _, p in levels])
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def _slide_rng(config: CohortConfig, index: int) -> np.random.Generator:
    return rng_for(config.seed, "slide", index)


def _draw_scalars(rng, config: CohortConfig):
    mix = config.tpm_mixture
    low_mode = rng.random() < mix.weight_low
    y = rng.normal(mix.mean_low if low_mode else mix.mean_high,
                   mix.sd_low if low_mode else mix.sd_high)
    y = max(y, 0.0)
    tpm = float(2.0 ** y - 1.0)

    mutations = {g: bool(rng.random() < _MUTATION_RATES[g]) for g in MUTATION_GENES}
    attributes = {k: _choice(rng, levels) for k, levels in _ATTRIBUTE_LEVELS.items()}

    group_draw = rng.random()
    n_seg = int(rng.integers(1, 5))
    lengths = rng.integers(5_000, 200_000, size=n_seg)
    if group_draw < 0.10:
        cns = rng.uniform(2.5, 4.5, size=n_seg)
        group = "intermediate"
    else:
        amplified = rng.random() < (0.75 if np.log2(tpm + 1) >= 8.0 else 0.08)
        if amplified:
            cns = rng.uniform(5.0, 8.0, size=n_seg)
            group = "amplified"
        else:
            cns = np.full(n_seg, 2.0)
            group = "wild_type"
    cn_segments = [(int(l), float(c)) for l, c in zip(lengths, cns)]
    return tpm, mutations, attributes, cn_segments, group


def draw_slide_scalars(config: CohortConfig, index: int) -> dict:
    """Scalar fields of slide `index` without rendering any pixels."""
    rng = _slide_rng(config, index)
    tpm, mutations, attributes, cn_segments, group = _draw_scalars(rng, config)
    return {"slide_id": _slide_id(index), "tpm": tpm, "mutations": mutations,
            "attributes": attributes, "cn_segments": cn_segments, "cn_group": group}


def _slide_id(index: int) -> str:
    return f"S{index:05d}"


def _rotate_hue(rgb, degrees: float):
    h, s, v = colorsys.rgb_to_hsv(*(c / 255.0 for c in rgb))
    h = (h + degrees / 360.0) % 1.0
    return tuple(int(round(c * 255)) for c in colorsys.hsv_to_rgb(h, s, v))


def tumor_texture_params(config: CohortConfig, tpm: float):
    """Ground-truth planted texture: (dot count per tumor cell, hue shift deg)."""
    tau = config.signal_strength * labels.smooth_label(tpm)
    base, extra, _, _ = _DOT_SPECS["tumor"]
    return base + int(round(extra * tau)), _TUMOR_HUE_SHIFT_DEG * tau


def generate_slide(config: CohortConfig, index: int,
                   tpm_override: float | None = None) -> SlideRecord:
    """Render one slide; deterministic in (config.seed, index).

    tpm_override substitutes the expression value after the stream draw, so
    slides with identical structure but different planted signal can be
    compared (used by the monotonicity checks).
    """
    rng = _slide_rng(config, index)
    tpm, mutations, attributes, cn_segments, _ = _draw_scalars(rng, config)
    if tpm_override is not None:
        if tpm_override < 0:
            raise DomainError("tpm_override must be >= 0")
        tpm = float(tpm_override)

    stain_hue = float(rng.uniform(-_STAIN_JITTER_HUE_DEG, _STAIN_JITTER_HUE_DEG))
    stain_brightness = float(rng.uniform(*_STAIN_JITTER_BRIGHTNESS))
    stain_saturation = float(rng.uniform(*_STAIN_JITTER_SATURATION))

    rows, cols, px = config.grid_rows, config.grid_cols, config.tile_px
    height, width = rows * px, cols * px
    tau = config.signal_strength * labels.smooth_label(tpm)

    # Voronoi partition of the tile grid; region 0 always tumor
    n_regions = int(rng.integers(6, 11))
    seeds_rc = rng.uniform(0, (rows, cols), size=(n_regions, 2))
    region_names = [n for n, _ in _REGION_CLASS_WEIGHTS]
    region_probs = np.array([p for _, p in _REGION_CLASS_WEIGHTS])
    region_cls = ["tumor"] + [region_names[int(rng.choice(len(region_names),
                                                          p=region_probs / region_probs.sum()))]
                              for _ in range(n_regions - 1)]
    cell_r, cell_c = np.meshgrid(np.arange(rows) + 0.5, np.arange(cols) + 0.5, indexing="ij")
    d2 = ((cell_r[..., None] - seeds_rc[:, 0]) ** 2
          + (cell_c[..., None] - seeds_rc[:, 1]) ** 2)
    cell_region = np.argmin(d2, axis=-1)
    cell_class = np.array([[CLASS_INDEX[region_cls[cell_region[r, c]]]
                            for c in range(cols)] for r in range(rows)], dtype=np.uint8)

    # focal artifact patches override single cells
    n_artifact = int(rng.integers(0, 3))
    for _ in range(n_artifact):
        ar, ac = int(rng.integers(0, rows)), int(rng.integers(0, cols))
        cell_class[ar, ac] = CLASS_INDEX["artifact"]

    tumor_color = _rotate_hue(_BASE_COLORS["tumor"], _TUMOR_HUE_SHIFT_DEG * tau)
    tumor_dot_color = _rotate_hue(_DOT_COLOR, _TUMOR_HUE_SHIFT_DEG * tau)

    image = np.empty((height, width, 3), dtype=np.uint8)
    histology_mask = np.empty((height, width), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            cls = CLASS_NAMES[cell_class[r, c]]
            jitter = rng.integers(-3, 4, size=3)
            color = tumor_color if cls == "tumor" else _BASE_COLORS[cls]
            fill = np.clip(np.array(color, dtype=np.int16) + jitter, 0, 255).astype(np.uint8)
            image[r * px:(r + 1) * px, c * px:(c + 1) * px] = fill
            histology_mask[r * px:(r + 1) * px, c * px:(c + 1) * px] = cell_class[r, c]
            if cls in _DOT_SPECS:
                base, extra, rmin, rmax = _DOT_SPECS[cls]
                n_max = base + extra
                # positions/radii drawn for the maximum count; prefix used, so
                # the dot set grows monotonically with the planted signal
                xs = rng.integers(rmax, px - rmax, size=n_max)
                ys = rng.integers(rmax, px - rmax, size=n_max)
                radii = rng.integers(rmin, rmax + 1, size=n_max)
                n_dots = base + int(round(extra * tau)) if cls == "tumor" else base
                dot_color = tumor_dot_color if cls == "tumor" else (
                    _IMMUNE_DOT_COLOR if cls == "immune" else _DOT_COLOR)
                for k in range(n_dots):
                    cv2.circle(image, (c * px + int(xs[k]), r * px + int(ys[k])),
                               int(radii[k]), dot_color, -1)

    # sparse speckle so tiles are not perfectly flat (scatter onto ~6% of pixels)
    n_speckle = int(height * width * _SPECKLE_FRACTION)
    flat_pos = rng.integers(0, height * width, size=n_speckle)
    values = rng.integers(-_SPECKLE_AMPLITUDE, _SPECKLE_AMPLITUDE + 1,
                          size=(n_speckle, 3), dtype=np.int16)
    flat_img = image.reshape(-1, 3).astype(np.int16)
    flat_img[flat_pos] += values
    image = np.clip(flat_img, 0, 255).astype(np.uint8).reshape(height, width, 3)

    # blur artifact cells so the QC blur rule rejects them
    for r in range(rows):
        for c in range(cols):
            if cell_class[r, c] == CLASS_INDEX["artifact"]:
                patch = image[r * px:(r + 1) * px, c * px:(c + 1) * px]
                image[r * px:(r + 1) * px, c * px:(c + 1) * px] = \
                    cv2.GaussianBlur(patch, (0, 0), 5.0)

    # pathologist pen strokes
    marker_mask = np.zeros((height, width), dtype=np.uint8)
    if rng.random() < config.marker_fraction:
        n_strokes = int(rng.integers(1, 3))
        for _ in range(n_strokes):
            color = _MARKER_COLORS[int(rng.integers(0, len(_MARKER_COLORS)))]
            thickness = int(rng.integers(14, 22))
            x0 = int(rng.integers(0, max(1, width - 2 * px)))
            y0 = int(rng.integers(0, max(1, height - 2 * px)))
            pts = [(x0, y0)]
            for _ in range(2):
                pts.append((int(np.clip(pts[-1][0] + rng.integers(-px, px + 1), 0, width - 1)),
                            int(np.clip(pts[-1][1] + rng.integers(-px, px + 1), 0, height - 1))))
            for (xa, ya), (xb, yb) in zip(pts[:-1], pts[1:]):
                cv2.line(image, (xa, ya), (xb, yb), color, thickness)
                cv2.line(marker_mask, (xa, ya), (xb, yb), 255, thickness)

    # per-slide stain/scanner color response over the whole raster (ink included)
    image = imageops.color_jitter_u8(image, brightness=stain_brightness,
                                     saturation=stain_saturation,
                                     hue_deg=stain_hue)

    return SlideRecord(
        slide_id=_slide_id(index), image=image, histology_mask=histology_mask,
        marker_mask=marker_mask.astype(bool), tpm=tpm, cn_segments=cn_segments,
        attributes=attributes, off_target_mutations=mutations)


def generate_cohort(config: CohortConfig) -> list:
    """Materialize all slides. For large cohorts prefer iter_cohort."""
    return [generate_slide(config, i) for i in range(config.n_slides)]


def iter_cohort(config: CohortConfig):
    for i in range(config.n_slides):
        yield generate_slide(config, i)


def _png_save(path, array):
    Image.fromarray(array).save(path, compress_level=1)


def write_slide_rasters(record: SlideRecord, root) -> dict:
    """Write image + masks under root; returns manifest-relative paths."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    rel = {
        "image_path": f"images/{record.slide_id}.png",
        "histology_mask_path": f"masks/{record.slide_id}_histology.png",
        "marker_mask_path": f"masks/{record.slide_id}_marker.png",
    }
    _png_save(os.path.join(root, rel["image_path"]), record.image)
    _png_save(os.path.join(root, rel["histology_mask_path"]), record.histology_mask)
    _png_save(os.path.join(root, rel["marker_mask_path"]),
              record.marker_mask.astype(np.uint8) * 255)
    return rel


def manifest_line(record: SlideRecord, rel_paths: dict) -> str:
    entry = {
        "slide_id": record.slide_id,
        "image_path": rel_paths["image_path"],
        "histology_mask_path": rel_paths["histology_mask_path"],
        "marker_mask_path": rel_paths["marker_mask_path"],
        "tpm": record.tpm,
        "cn_segments": [[l, c] for l, c in record.cn_segments],
        "attributes": record.attributes,
        "mutations": record.off_target_mutations,
    }
    return json.dumps(entry, sort_keys=True)


def write_manifest(cohort, path) -> str:
    """Write rasters + line-delimited manifest; returns the manifest path."""
    cohort = list(cohort)
    if not cohort:
        raise DomainError("cohort must be nonempty")
    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    with open(path, "w") as fh:
        for record in cohort:
            rel = write_slide_rasters(record, root)
            fh.write(manifest_line(record, rel) + "\n")
    return path


def read_manifest(path) -> list:
    """Load a manifest written by write_manifest back into SlideRecords."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            image = np.asarray(Image.open(os.path.join(root, entry["image_path"])))
            hist = np.asarray(Image.open(os.path.join(root, entry["histology_mask_path"])))
            marker = np.asarray(Image.open(os.path.join(root, entry["marker_mask_path"]))) > 0
            records.append(SlideRecord(
                slide_id=entry["slide_id"], image=image, histology_mask=hist,
                marker_mask=marker, tpm=float(entry["tpm"]),
                cn_segments=[(int(l), float(c)) for l, c in entry["cn_segments"]],
                attributes=entry["attributes"],
                off_target_mutations={k: bool(v) for k, v in entry["mutations"].items()}))
    return records


def make_operating_point_cohort(n_amplified: int = 100, n_neutral: int = 100,
                                seed: int = 0, threshold_log_tpm: float = 8.0,
                                sensitivity: float = 0.92, specificity: float = 0.80):
    """(tpm, cn_segments) cohort whose score threshold at `threshold_log_tpm`
    yields exactly the requested sensitivity/specificity.

    Amplified cases put round(sensitivity * n) scores at or above the threshold;
    neutral cases put round(specificity * n) strictly below it.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x0C0]))
    n_amp_hi = int(round(sensitivity * n_amplified))
    n_neu_lo = int(round(specificity * n_neutral))
    gap = 0.1

    def scores_to_tpm(scores):
        return [float(2.0 ** s - 1.0) for s in scores]

    amp_scores = np.concatenate([
        threshold_log_tpm + np.sort(rng.uniform(0.0, 2.5, size=n_amp_hi)),
        threshold_log_tpm - gap - np.sort(rng.uniform(0.05, 2.5, size=n_amplified - n_amp_hi)),
    ])
    neu_scores = np.concatenate([
        threshold_log_tpm - gap - np.sort(rng.uniform(0.0, 3.5, size=n_neu_lo)),
        threshold_log_tpm + np.sort(rng.uniform(0.05, 1.5, size=n_neutral - n_neu_lo)),
    ])
    cohort = []
    for s in scores_to_tpm(amp_scores):
        cohort.append((s, [(10_000, float(rng.uniform(5.0, 8.0)))]))
    for s in scores_to_tpm(neu_scores):
        cohort.append((s, [(10_000, 2.0)]))
    return cohort
