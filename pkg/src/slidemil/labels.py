"""Label math: segment-weighted copy number, smooth/binary expression labels,
and copy-number-derived score threshold selection.

The smooth label maps a raw expression value (TPM) through
sigmoid(scale * (log2(TPM + 1) - threshold_log_tpm)); the binary label is the
same comparison without the sigmoid, positive on ties (>=), which keeps
binary_label(t) == 1 exactly when smooth_label(t) >= 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from . import evalstat


@dataclass(frozen=True)
class SmoothLabelParams:
    log_offset: float = 1.0
    threshold_log_tpm: float = 8.0
    scale: float = 2.0

    def __post_init__(self):
        if self.scale <= 0:
            raise DomainError(f"scale must be > 0, got {self.scale}")


@dataclass(frozen=True)
class CopyNumberGrouping:
    amplified_min: float = 5.0
    neutral_value: float = 2.0

    def __post_init__(self):
        if self.amplified_min <= self.neutral_value:
            raise DomainError(
                f"amplified_min ({self.amplified_min}) must exceed "
                f"neutral_value ({self.neutral_value})")


DEFAULT_SMOOTH = SmoothLabelParams()
DEFAULT_GROUPING = CopyNumberGrouping()


def _stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def weighted_copy_number(segments) -> float:
    """Length-weighted mean copy number over (length, cn) segments."""
    if not segments:
        raise DomainError("weighted_copy_number needs at least one segment")
    total_len = 0.0
    total = 0.0
    for length, cn in segments:
        if length <= 0:
            raise DomainError(f"segment length must be > 0, got {length}")
        total_len += float(length)
        total += float(length) * float(cn)
    return total / total_len


def smooth_label(tpm, params: SmoothLabelParams = DEFAULT_SMOOTH):
    """Soft target in (0, 1); strictly increasing in tpm."""
    arr = np.asarray(tpm, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("tpm must be >= 0")
    z = params.scale * (np.log2(arr + params.log_offset) - params.threshold_log_tpm)
    out = _stable_sigmoid(z)
    return float(out) if np.isscalar(tpm) or arr.ndim == 0 else out


def binary_label(tpm, params: SmoothLabelParams = DEFAULT_SMOOTH):
    """Hard label: 1 iff log2(tpm + offset) >= threshold (ties positive)."""
    arr = np.asarray(tpm, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("tpm must be >= 0")
    out = (np.log2(arr + params.log_offset) >= params.threshold_log_tpm).astype(np.int64)
    return int(out) if np.isscalar(tpm) or arr.ndim == 0 else out


@dataclass
class ThresholdReport:
    threshold: float
    sensitivity: float
    specificity: float
    auc: float
    roc_points: list
    n_amplified: int
    n_neutral: int
    n_excluded: int
    specificity_floor: float

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "auc": self.auc,
            "n_amplified": self.n_amplified,
            "n_neutral": self.n_neutral,
            "n_excluded": self.n_excluded,
            "specificity_floor": self.specificity_floor,
            "roc_points": [list(p) for p in self.roc_points],
        }


def derive_threshold(cohort, grouping: CopyNumberGrouping = DEFAULT_GROUPING,
                     specificity_floor: float = 0.8,
                     params: SmoothLabelParams = DEFAULT_SMOOTH) -> ThresholdReport:
    """Pick the log-expression threshold separating amplified from neutral cases.

    Cases with weighted copy number >= amplified_min are positives, == neutral_value
    negatives; everything in between is excluded (counted in the report). Candidate
    thresholds are midpoints between adjacent distinct scores; among candidates with
    specificity >= the floor the one with the highest sensitivity wins, ties broken
    toward higher specificity (larger threshold).
    """
    scores = []
    labels = []
    n_excluded = 0
    for tpm, segments in cohort:
        wcn = weighted_copy_number(segments)
        if wcn >= grouping.amplified_min:
            labels.append(1)
        elif wcn == grouping.neutral_value:
            labels.append(0)
        else:
            n_excluded += 1
            continue
        if tpm < 0:
            raise DomainError("tpm must be >= 0")
        scores.append(np.log2(float(tpm) + params.log_offset))
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DomainError(
            f"derive_threshold needs both groups (amplified={n_pos}, neutral={n_neg})")

    auc, roc_points = evalstat.roc_auc(scores, labels)

    distinct = np.unique(scores)
    if len(distinct) == 1:
        candidates = np.array([distinct[0]])
    else:
        candidates = (distinct[:-1] + distinct[1:]) / 2.0
    best = None
    for t in candidates:
        sens = float(np.mean(scores[labels == 1] >= t))
        spec = float(np.mean(scores[labels == 0] < t))
        if spec < specificity_floor:
            continue
        if best is None or sens > best[1] or (sens == best[1] and spec >= best[2]):
            best = (float(t), sens, spec)
    if best is None:
        # no candidate satisfies the floor; fall back to the most specific cut
        t = float(distinct[-1] + 1.0)
        best = (t, float(np.mean(scores[labels == 1] >= t)), 1.0)

    return ThresholdReport(
        threshold=best[0], sensitivity=best[1], specificity=best[2], auc=auc,
        roc_points=roc_points, n_amplified=n_pos, n_neutral=n_neg,
        n_excluded=n_excluded, specificity_floor=specificity_floor)
