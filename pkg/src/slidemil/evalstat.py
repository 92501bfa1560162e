"""Metrics, curves, bootstrap intervals, operating points and association tests.

Conventions pinned here and relied on by the rest of the pipeline:
  - predicted positive means score >= threshold;
  - tied score pairs get half credit in ROC-AUC (Mann-Whitney with ties at 1/2);
  - candidate thresholds are midpoints between adjacent distinct scores;
  - bootstrap intervals use the percentile method on seeded, class-stratified
    resamples with per-resample RNG streams keyed by resample index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, StatisticalError
from .special import chi2_sf, t_two_sided


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DomainError(f"scores/labels must be matching 1-D arrays, got {s.shape} vs {y.shape}")
    if not np.all(np.isfinite(s)):
        raise DomainError("scores must be finite")
    y = (y != 0).astype(np.int64)
    return s, y


def _average_ranks(x: np.ndarray) -> np.ndarray:
    # 1-based ranks with ties averaged
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg = starts + (counts + 1) / 2.0
    return avg[inverse]


def roc_auc(scores, labels):
    """ROC-AUC with half-credit ties, plus the ROC curve.

    Returns (auc, points) where points is a list of (fpr, tpr, threshold)
    from the descending threshold sweep over distinct scores, starting at
    (0, 0, +inf).
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DomainError(f"roc_auc needs both classes (pos={n_pos}, neg={n_neg})")
    ranks = _average_ranks(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    distinct = np.unique(s)[::-1]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    for t in distinct:
        at = s == t
        tp += int((y[at] == 1).sum())
        fp += int((y[at] == 0).sum())
        points.append((fp / n_neg, tp / n_pos, float(t)))
    return float(auc), points


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending original index
    return np.argsort(-scores, kind="mergesort")


def average_precision(scores, labels) -> float:
    """Step-wise AP over the descending-score sweep (no interpolation)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DomainError("average_precision needs at least one positive")
    order = _descending_order(s)
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(s) + 1)
    return float(precision[hits == 1].sum() / n_pos)


def pr_points(scores, labels):
    """(recall, precision, threshold) points of the descending sweep."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DomainError("pr curve needs at least one positive")
    order = _descending_order(s)
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(s) + 1)
    recall = tp / n_pos
    return [(float(r), float(p), float(s[order][i])) for i, (r, p) in enumerate(zip(recall, precision))]


def threshold_metrics(scores, labels, threshold: float) -> dict:
    """Confusion-matrix metrics with predicted positive = score >= threshold."""
    s, y = _as_arrays(scores, labels)
    if y.sum() == 0 or y.sum() == len(y):
        raise DomainError("threshold_metrics needs both classes")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    n = tp + fp + fn + tn
    flags = []
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    if tp + fp == 0:
        precision = 0.0
        flags.append("no_predicted_positives")
    else:
        precision = tp / (tp + fp)
    f1 = 0.0 if precision + sens == 0 else 2 * precision * sens / (precision + sens)
    accuracy = (tp + tn) / n
    p_o = accuracy
    p_e = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n)
    if p_e == 1.0:
        kappa = 0.0
        flags.append("degenerate_marginals")
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return {
        "sensitivity": float(sens), "specificity": float(spec),
        "precision": float(precision), "f1": float(f1),
        "kappa": float(kappa), "accuracy": float(accuracy),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn, "flags": flags,
    }


def pearson_r(x, y):
    """Sample Pearson correlation with a two-sided t-distribution p-value."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    n = len(xa)
    if n < 3 or len(ya) != n:
        raise DomainError(f"pearson_r needs matching arrays with n >= 3, got {n}, {len(ya)}")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise DomainError("pearson_r requires nonzero variance in both inputs")
    r = float(np.clip(np.sum(xc * yc) / (sx * sy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, t_two_sided(float(t), n - 2)


def _resample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, index]))


def _stratified_draw(rng, class_indices):
    parts = [idx[rng.integers(0, len(idx), size=len(idx))] for idx in class_indices]
    return np.concatenate(parts)


def bootstrap_interval(stat_fn, n: int, labels=None, n_resamples: int = 2000,
                       level: float = 0.95, seed: int = 0,
                       max_redraws: int | None = None):
    """Percentile bootstrap interval of stat_fn over resampled index arrays.

    stat_fn receives an int index array of length n. When labels are supplied
    the resampling is stratified by label so class counts are preserved.
    A resample for which stat_fn raises DomainError is redrawn (counted,
    capped at max_redraws, default 10 * n_resamples).
    """
    if n_resamples < 100:
        raise DomainError(f"n_resamples must be >= 100, got {n_resamples}")
    if max_redraws is None:
        max_redraws = 10 * n_resamples
    if labels is not None:
        y = (np.asarray(labels) != 0).astype(np.int64)
        class_indices = [np.flatnonzero(y == c) for c in (0, 1)]
        class_indices = [idx for idx in class_indices if len(idx) > 0]
    else:
        class_indices = [np.arange(n)]
    stats = np.empty(n_resamples)
    redraws = 0
    for i in range(n_resamples):
        rng = _resample_rng(seed, i)
        while True:
            idx = _stratified_draw(rng, class_indices)
            try:
                stats[i] = stat_fn(idx)
                break
            except DomainError:
                redraws += 1
                if redraws > max_redraws:
                    raise StatisticalError(
                        f"bootstrap redraw cap exceeded ({redraws} redraws over "
                        f"{n_resamples} resamples)")
    alpha = (1.0 - level) / 2.0
    lower, upper = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(lower), float(upper)


def select_operating_point(scores, labels, target_sensitivity: float) -> float:
    """Largest candidate threshold whose calibration sensitivity >= target.

    Candidates are midpoints between adjacent distinct scores; when no candidate
    reaches the target the threshold is placed just below the minimum score
    (sensitivity 1).
    """
    s, y = _as_arrays(scores, labels)
    pos = s[y == 1]
    if len(pos) == 0:
        raise DomainError("select_operating_point needs positives")
    distinct = np.unique(s)
    below_min = float(distinct[0]) - max(1e-9, 1e-9 * abs(float(distinct[0])))
    if len(distinct) == 1:
        return below_min
    candidates = (distinct[:-1] + distinct[1:]) / 2.0
    sens = (pos[None, :] >= candidates[:, None]).mean(axis=1)
    feasible = np.flatnonzero(sens >= target_sensitivity)
    if len(feasible) == 0:
        return below_min
    return float(candidates[feasible[-1]])


def off_target_roc(scores, flags, n_resamples: int = 2000, seed: int = 0):
    """AUC of the model score against a gene-mutation flag, with interval."""
    s, f = _as_arrays(scores, flags)
    if f.sum() == 0 or f.sum() == len(f):
        raise DomainError("off_target_roc needs both flag values present")
    auc, _ = roc_auc(s, f)

    def stat(idx):
        a, _ = roc_auc(s[idx], f[idx])
        return a

    lo, hi = bootstrap_interval(stat, len(s), labels=f, n_resamples=n_resamples, seed=seed)
    return auc, (lo, hi)


def chi_square_association(table):
    """Pearson chi-square test of independence on an r x c count table."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 2 or t.shape[1] < 2:
        raise DomainError(f"table must be at least 2x2, got shape {t.shape}")
    if np.any(t < 0):
        raise DomainError("counts must be nonnegative")
    total = t.sum()
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / total
    if np.any(expected <= 0):
        raise DomainError("all expected counts must be > 0")
    stat = float(np.sum((t - expected) ** 2 / expected))
    df = (t.shape[0] - 1) * (t.shape[1] - 1)
    return stat, df, chi2_sf(stat, df)


def subgroup_analysis(scores, labels, attribute_values, min_per_class: int = 20,
                      n_resamples: int = 2000, seed: int = 0):
    """Per-level AUC with intervals plus pairwise bootstrap AUC-difference tests.

    Levels with both classes get an AUC; a level is eligible for testing when
    each class has at least min_per_class members. The pairwise p-value is the
    two-sided bootstrap tail 2 * min(P(d* <= 0), P(d* >= 0)) from independent
    stratified resampling within each level.
    """
    s, y = _as_arrays(scores, labels)
    attr = np.asarray(attribute_values)
    if len(attr) != len(s):
        raise DomainError("attribute_values length mismatch")
    levels = {}
    for level in sorted(set(attr.tolist()), key=str):
        mask = attr == level
        ys = y[mask]
        n_pos, n_neg = int(ys.sum()), int(len(ys) - ys.sum())
        entry = {"n": int(mask.sum()), "n_pos": n_pos, "n_neg": n_neg,
                 "auc": None, "interval": None,
                 "tested": n_pos >= min_per_class and n_neg >= min_per_class}
        if n_pos > 0 and n_neg > 0:
            sub_s, sub_y = s[mask], ys
            entry["auc"], _ = roc_auc(sub_s, sub_y)

            def stat(idx, sub_s=sub_s, sub_y=sub_y):
                a, _ = roc_auc(sub_s[idx], sub_y[idx])
                return a

            entry["interval"] = bootstrap_interval(
                stat, int(mask.sum()), labels=sub_y,
                n_resamples=n_resamples, seed=seed)
        levels[level] = entry
    if not any(e["auc"] is not None for e in levels.values()):
        raise DomainError("no subgroup level has both classes")

    tested = [lv for lv, e in levels.items() if e["tested"] and e["auc"] is not None]
    pairs = []
    for i in range(len(tested)):
        for j in range(i + 1, len(tested)):
            a_lv, b_lv = tested[i], tested[j]
            mask_a, mask_b = attr == a_lv, attr == b_lv
            d = _bootstrap_auc_difference(
                s[mask_a], y[mask_a], s[mask_b], y[mask_b],
                n_resamples=n_resamples, seed=seed)
            pairs.append({"a": a_lv, "b": b_lv,
                          "delta": levels[a_lv]["auc"] - levels[b_lv]["auc"],
                          "p": d})
    return {"levels": levels, "pairs": pairs}


def _bootstrap_auc_difference(s_a, y_a, s_b, y_b, n_resamples: int, seed: int) -> float:
    idx_a = [np.flatnonzero(y_a == c) for c in (0, 1)]
    idx_b = [np.flatnonzero(y_b == c) for c in (0, 1)]
    deltas = np.empty(n_resamples)
    for i in range(n_resamples):
        rng = _resample_rng(seed, i)
        ia = _stratified_draw(rng, idx_a)
        ib = _stratified_draw(rng, idx_b)
        auc_a, _ = roc_auc(s_a[ia], y_a[ia])
        auc_b, _ = roc_auc(s_b[ib], y_b[ib])
        deltas[i] = auc_a - auc_b
    p = 2.0 * min(float(np.mean(deltas <= 0)), float(np.mean(deltas >= 0)))
    return min(1.0, p)


@dataclass
class MetricsReport:
    """Named point estimates with percentile intervals plus curves."""

    metrics: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    operating_threshold: float | None = None
    subgroups: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def set_metric(self, name: str, point: float, interval=None):
        lo, hi = (None, None) if interval is None else interval
        self.metrics[name] = {"point": point, "lower": lo, "upper": hi}

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "curves": self.curves,
            "operating_threshold": self.operating_threshold,
            "subgroups": self.subgroups,
            "extra": self.extra,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(metrics=d["metrics"], curves=d["curves"],
                   operating_threshold=d["operating_threshold"],
                   subgroups=d["subgroups"], extra=d.get("extra", {}))


THRESHOLD_METRIC_NAMES = ("sensitivity", "specificity", "precision", "f1", "kappa", "accuracy")


def compute_report(scores, labels, threshold: float, tpm=None,
                   n_resamples: int = 2000, seed: int = 0,
                   with_curves: bool = True) -> MetricsReport:
    """Full metric set at a frozen operating threshold, with bootstrap intervals."""
    s, y = _as_arrays(scores, labels)
    report = MetricsReport(operating_threshold=float(threshold))

    auc, roc_pts = roc_auc(s, y)
    ap = average_precision(s, y)
    tm = threshold_metrics(s, y, threshold)

    def make_stat(fn):
        def stat(idx):
            return fn(s[idx], y[idx])
        return stat

    report.set_metric("roc_auc", auc, bootstrap_interval(
        make_stat(lambda a, b: roc_auc(a, b)[0]), len(s), labels=y,
        n_resamples=n_resamples, seed=seed))
    report.set_metric("average_precision", ap, bootstrap_interval(
        make_stat(average_precision), len(s), labels=y,
        n_resamples=n_resamples, seed=seed + 1))
    for k, name in enumerate(THRESHOLD_METRIC_NAMES):
        report.set_metric(name, tm[name], bootstrap_interval(
            make_stat(lambda a, b, name=name: threshold_metrics(a, b, threshold)[name]),
            len(s), labels=y, n_resamples=n_resamples, seed=seed + 2 + k))
    if tpm is not None:
        tpm_arr = np.asarray(tpm, dtype=np.float64)
        if len(s) >= 3 and np.ptp(s) > 0 and np.ptp(tpm_arr) > 0:
            r, p = pearson_r(s, tpm_arr)
            report.set_metric("pearson_r_vs_tpm", r)
            report.extra["pearson_p_vs_tpm"] = p
        else:
            report.extra["pearson_note"] = "degenerate scores or tpm; correlation omitted"
    if with_curves:
        report.curves["roc"] = [list(p) for p in roc_pts]
        report.curves["pr"] = [list(p) for p in pr_points(s, y)]
    report.extra["confusion"] = {k: tm[k] for k in ("tp", "fp", "fn", "tn")}
    return report


def write_curve_csv(points, path, header):
    """Two-or-more-column CSV for plotting (ROC / PR / sweep curves)."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
