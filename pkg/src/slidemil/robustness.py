"""Color-perturbation sweeps and scanner-shift simulation.

A perturbation draw is one (brightness, contrast, saturation, hue) tuple per
slide per repeat, sampled from intervals that widen linearly with the level:
factor in [1 - step*level, 1 + step*level], hue in [-hue_step*level,
+hue_step*level] degrees. Level 0 is the exact identity. Operations apply in
the fixed order brightness -> contrast -> saturation -> hue; saturation and
hue act in HSV space. uint8 images go through exact 256-entry LUTs; float
images use the same math in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import evalstat, imageops
from .errors import ConfigurationError, DomainError
from .preprocess import apply_color_standardization, ColorProfile
from .runutil import rng_for


@dataclass(frozen=True)
class PerturbationSpec:
    n_levels: int = 10
    repeats: int = 5
    brightness_step: float = 0.05
    contrast_step: float = 0.05
    saturation_step: float = 0.05
    hue_step_deg: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.n_levels < 0 or self.repeats < 1:
            raise ConfigurationError("need n_levels >= 0 and repeats >= 1")
        for name in ("brightness_step", "contrast_step", "saturation_step", "hue_step_deg"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def intervals(self, level: int) -> dict:
        if not 0 <= level <= self.n_levels:
            raise DomainError(f"level {level} outside [0, {self.n_levels}]")
        return {
            "brightness": (1 - self.brightness_step * level, 1 + self.brightness_step * level),
            "contrast": (1 - self.contrast_step * level, 1 + self.contrast_step * level),
            "saturation": (1 - self.saturation_step * level, 1 + self.saturation_step * level),
            "hue_deg": (-self.hue_step_deg * level, self.hue_step_deg * level),
        }

    def draw(self, level: int, repeat: int, slide_index: int) -> dict:
        if level == 0:
            return {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0, "hue_deg": 0.0}
        iv = self.intervals(level)
        rng = rng_for(self.seed, "perturb-draw", level, repeat, slide_index)
        draw = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in iv.items()}
        draw["brightness"] = max(draw["brightness"], 1e-6)
        draw["contrast"] = max(draw["contrast"], 1e-6)
        draw["saturation"] = max(draw["saturation"], 1e-6)
        return draw


def _perturb_u8(image: np.ndarray, brightness, contrast, saturation, hue_deg):
    return imageops.color_jitter_u8(image, brightness=brightness, contrast=contrast,
                                    saturation=saturation, hue_deg=hue_deg)


def _perturb_float(image: np.ndarray, brightness, contrast, saturation, hue_deg):
    out = np.asarray(image, dtype=np.float32)
    if brightness != 1.0:
        out = np.clip(out * np.float32(brightness), 0.0, 1.0)
    if contrast != 1.0:
        means = out.reshape(-1, 3).mean(axis=0)
        out = np.clip((out - means) * np.float32(contrast) + means, 0.0, 1.0)
    if saturation != 1.0 or hue_deg != 0.0:
        hsv = imageops.rgb_to_hsv(out)
        if saturation != 1.0:
            hsv[..., 1] = np.clip(hsv[..., 1] * np.float32(saturation), 0.0, 1.0)
        if hue_deg != 0.0:
            hsv[..., 0] = (hsv[..., 0] + np.float32(hue_deg / 360.0)) % np.float32(1.0)
        out = imageops.hsv_to_rgb(hsv)
    return out


def perturb_image(image: np.ndarray, factors: dict) -> np.ndarray:
    """Apply a factor tuple {brightness, contrast, saturation, hue_deg}.

    Identity factors short-circuit, so the level-0 draw returns the input
    bit-for-bit.
    """
    b = float(factors.get("brightness", 1.0))
    c = float(factors.get("contrast", 1.0))
    s = float(factors.get("saturation", 1.0))
    h = float(factors.get("hue_deg", 0.0))
    if b <= 0 or c <= 0 or s <= 0:
        raise DomainError("brightness/contrast/saturation factors must be > 0")
    if image.ndim != 3 or image.shape[2] != 3:
        raise DomainError(f"expected an RGB image, got shape {image.shape}")
    if image.dtype == np.uint8:
        return _perturb_u8(image, b, c, s, h)
    return _perturb_float(image, b, c, s, h)


def run_perturbation_sweep(slides, binary_labels, spec: PerturbationSpec,
                           score_fn, threshold: float):
    """Score every (level, repeat) perturbation of the test slides.

    score_fn maps a list of slide images to an array of model probabilities
    (re-tiling and re-encoding inside). Level 0 is computed once from the
    clean images and replicated across repeats, so it is bitwise equal to the
    clean evaluation. Returns (rows, clean_scores): one row per (level, repeat)
    with the full metric set at the frozen threshold and the mean absolute
    probability shift from clean.
    """
    slides = list(slides)
    y = (np.asarray(binary_labels) != 0).astype(np.int64)
    if len(slides) != len(y):
        raise DomainError("slides/labels length mismatch")
    clean_images = [s.image for s in slides]
    clean_scores = np.asarray(score_fn(clean_images), dtype=np.float64)

    def metric_row(level, repeat, scores):
        tm = evalstat.threshold_metrics(scores, y, threshold)
        auc, _ = evalstat.roc_auc(scores, y)
        ap = evalstat.average_precision(scores, y)
        row = {"level": level, "repeat": repeat, "roc_auc": auc, "average_precision": ap,
               "mean_abs_delta_p": float(np.mean(np.abs(scores - clean_scores)))}
        row.update({k: tm[k] for k in evalstat.THRESHOLD_METRIC_NAMES})
        return row

    rows = []
    for repeat in range(spec.repeats):
        rows.append(metric_row(0, repeat, clean_scores))
    for level in range(1, spec.n_levels + 1):
        for repeat in range(spec.repeats):
            images = [perturb_image(s.image, spec.draw(level, repeat, i))
                      for i, s in enumerate(slides)]
            scores = np.asarray(score_fn(images), dtype=np.float64)
            rows.append(metric_row(level, repeat, scores))
    return rows, clean_scores


def write_sweep_csv(rows, path):
    """Long-format CSV (level, repeat, metric, value)."""
    metric_names = [k for k in rows[0] if k not in ("level", "repeat")]
    with open(path, "w") as fh:
        fh.write("level,repeat,metric,value\n")
        for row in rows:
            for name in metric_names:
                fh.write(f"{row['level']},{row['repeat']},{name},{row[name]!r}\n")


def simulate_scanner_shift(images, profile_name: str, profiles: dict):
    """Apply a named color profile to every slide image."""
    if profile_name not in profiles:
        raise ConfigurationError(
            f"unknown scanner profile {profile_name!r}; have {sorted(profiles)}")
    profile = ColorProfile.from_dict(profile_name, profiles[profile_name])
    return [apply_color_standardization(img, profile) for img in images]
