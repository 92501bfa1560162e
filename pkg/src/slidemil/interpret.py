"""Attention interpretability: high-attention tile selection, histology
enrichment statistics, PCA projection of embeddings, and tile mosaics.

The Wilcoxon signed-rank test enumerates all sign patterns exactly for
n <= 12 (after dropping zero differences, ties get average ranks) and falls
back to the normal approximation with tie-corrected variance and continuity
correction above that. Directional alternatives must be declared by the
caller; nothing is chosen post hoc from the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .runutil import rng_for
from .special import normal_sf

EXACT_ENUMERATION_MAX_N = 12


def high_attention_tiles(weights, mass_fraction: float = 0.1) -> list:
    """Minimal prefix of tiles (by descending weight, ties by ascending index)
    whose cumulative attention reaches mass_fraction of the total."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise DomainError("weights must be a nonempty 1-D array")
    if np.any(w < 0):
        raise DomainError("attention weights must be nonnegative")
    order = np.lexsort((np.arange(len(w)), -w))
    cum = np.cumsum(w[order])
    total = cum[-1]
    # tolerance absorbs accumulation error when the target lands exactly on a
    # partial sum (e.g. uniform weights)
    target = mass_fraction * total - 1e-9 * max(total, 1e-300)
    k = min(int(np.searchsorted(cum, target)) + 1, len(w))
    return sorted(int(i) for i in order[:k])


def _signed_ranks(diffs):
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    if len(d) == 0:
        return None, None
    abs_d = np.abs(d)
    # average ranks over ties; doubling keeps every rank an exact integer
    _, inverse, counts = np.unique(abs_d, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    double_ranks = (2 * starts + counts + 1)[inverse]   # 2 * average rank
    return d, double_ranks


def wilcoxon_signed_rank(diffs, alternative: str = "two-sided"):
    """Wilcoxon signed-rank test on paired differences.

    Returns (W_plus, p, info). Zero differences are dropped; if none remain the
    result is degenerate with p = 1. Exact enumeration of the 2^n sign patterns
    is used for n <= 12, else the tie-corrected normal approximation with
    continuity correction.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise DomainError(f"unknown alternative {alternative!r}")
    d, double_ranks = _signed_ranks(diffs)
    if d is None:
        return 0.0, 1.0, {"n": 0, "mode": "degenerate", "degenerate": True}
    n = len(d)
    w2_obs = int(double_ranks[d > 0].sum())       # 2 * W+
    if n <= EXACT_ENUMERATION_MAX_N:
        patterns = np.arange(2 ** n)[:, None] >> np.arange(n)[None, :] & 1
        w2_all = patterns @ double_ranks
        total = 2 ** n
        p_greater = float(np.count_nonzero(w2_all >= w2_obs)) / total
        p_less = float(np.count_nonzero(w2_all <= w2_obs)) / total
        mode = "exact"
    else:
        mean2 = n * (n + 1) / 2.0                 # 2 * n(n+1)/4
        _, counts = np.unique(double_ranks, return_counts=True)
        tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
        sd2 = 2.0 * np.sqrt(var)                  # sd of 2 * W+
        p_greater = normal_sf((w2_obs - mean2 - 1.0) / sd2)
        p_less = normal_sf((mean2 - w2_obs - 1.0) / sd2)
        mode = "normal"
    if alternative == "greater":
        p = p_greater
    elif alternative == "less":
        p = p_less
    else:
        p = min(1.0, 2.0 * min(p_greater, p_less))
    return w2_obs / 2.0, float(p), {"n": n, "mode": mode, "degenerate": False}


def bh_fdr(p_values):
    """Benjamini/Hochberg adjusted p-values, restored to input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise DomainError("p_values must be a nonempty 1-D array")
    if np.any((p < 0) | (p > 1)):
        raise DomainError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="mergesort")
    adjusted = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(adjusted[::-1])[::-1]
    adjusted = np.minimum(adjusted, 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


@dataclass
class EnrichmentRow:
    tile_class: str
    all_fraction_mean: float
    all_fraction_sd: float
    high_fraction_mean: float
    high_fraction_sd: float
    alternative: str
    p_raw: float
    p_adjusted: float = float("nan")
    note: str = ""


@dataclass
class EnrichmentResult:
    class_vs_all: list          # EnrichmentRow per class: high-attn vs all tiles
    tumor_vs_other: list        # EnrichmentRow per non-tumor class within high-attn
    mass_fraction: float
    n_slides: int
    omitted: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def rows(rs):
            return [vars(r) for r in rs]
        return {"class_vs_all": rows(self.class_vs_all),
                "tumor_vs_other": rows(self.tumor_vs_other),
                "mass_fraction": self.mass_fraction,
                "n_slides": self.n_slides, "omitted": self.omitted}


DEFAULT_DIRECTIONS = {"tumor": "greater"}   # all other classes default to "less"


def enrichment_analysis(slide_attention, slide_classes, class_names,
                        mass_fraction: float = 0.1,
                        directions: dict | None = None,
                        reference_class: str = "tumor") -> EnrichmentResult:
    """Histology-class enrichment in high-attention tiles.

    slide_attention: per slide, 1-D attention weights; slide_classes: per slide,
    the tile histology class names aligned with the weights. Test (i) compares
    each class's high-attention fraction against its all-tile fraction with a
    paired Wilcoxon across slides under the declared direction; test (ii)
    compares the reference class's high-attention fraction against each other
    class's within high-attention tiles. BH correction within each family.
    """
    if len(slide_attention) < 2:
        raise DomainError("enrichment_analysis needs >= 2 slides")
    if len(slide_attention) != len(slide_classes):
        raise DomainError("attention/classes slide count mismatch")
    directions = dict(directions or DEFAULT_DIRECTIONS)

    n_slides = len(slide_attention)
    all_frac = {c: np.zeros(n_slides) for c in class_names}
    high_frac = {c: np.zeros(n_slides) for c in class_names}
    for s, (weights, classes) in enumerate(zip(slide_attention, slide_classes)):
        classes = np.asarray(classes)
        if len(classes) != len(weights):
            raise DomainError(f"slide {s}: weights/classes length mismatch")
        high_idx = high_attention_tiles(weights, mass_fraction)
        high_classes = classes[high_idx]
        for c in class_names:
            all_frac[c][s] = np.mean(classes == c)
            high_frac[c][s] = np.mean(high_classes == c)

    present = [c for c in class_names if np.any(all_frac[c] > 0)]
    omitted = [c for c in class_names if c not in present]

    rows_i = []
    for c in present:
        alt = directions.get(c, "less")
        _, p, info = wilcoxon_signed_rank(high_frac[c] - all_frac[c], alternative=alt)
        rows_i.append(EnrichmentRow(
            tile_class=c,
            all_fraction_mean=float(all_frac[c].mean()), all_fraction_sd=float(all_frac[c].std()),
            high_fraction_mean=float(high_frac[c].mean()), high_fraction_sd=float(high_frac[c].std()),
            alternative=("greater_in_high_attention" if alt == "greater"
                         else "less_in_high_attention"),
            p_raw=p, note="degenerate" if info["degenerate"] else ""))
    adj = bh_fdr([r.p_raw for r in rows_i])
    for r, a in zip(rows_i, adj):
        r.p_adjusted = float(a)

    rows_ii = []
    if reference_class in present:
        others = [c for c in present if c != reference_class]
        for c in others:
            _, p, info = wilcoxon_signed_rank(
                high_frac[reference_class] - high_frac[c], alternative="greater")
            rows_ii.append(EnrichmentRow(
                tile_class=c,
                all_fraction_mean=float(high_frac[reference_class].mean()),
                all_fraction_sd=float(high_frac[reference_class].std()),
                high_fraction_mean=float(high_frac[c].mean()),
                high_fraction_sd=float(high_frac[c].std()),
                alternative=f"{reference_class}_greater_than_{c}",
                p_raw=p, note="degenerate" if info["degenerate"] else ""))
        adj2 = bh_fdr([r.p_raw for r in rows_ii]) if rows_ii else []
        for r, a in zip(rows_ii, adj2):
            r.p_adjusted = float(a)

    return EnrichmentResult(class_vs_all=rows_i, tumor_vs_other=rows_ii,
                            mass_fraction=mass_fraction, n_slides=n_slides,
                            omitted=omitted)


def write_enrichment_table(result: EnrichmentResult, path):
    """Tab-separated enrichment table (one row per class, family i)."""
    with open(path, "w") as fh:
        fh.write("tile_class\tall_tile_fraction\thigh_attention_tile_fraction\t"
                 "alternative\traw_p\tfdr_corrected_p\n")
        for r in result.class_vs_all:
            fh.write(f"{r.tile_class}\t{r.all_fraction_mean:.4f} +/- {r.all_fraction_sd:.4f}\t"
                     f"{r.high_fraction_mean:.4f} +/- {r.high_fraction_sd:.4f}\t"
                     f"{r.alternative}\t{r.p_raw:.6g}\t{r.p_adjusted:.6g}\n")


def project_embeddings(embeddings, tol: float = 1e-9, max_iter: int = 1000,
                       seed: int = 0):
    """Two leading PCA components via power iteration with deflation.

    Returns (coords (n, 2), explained_variance_ratios (2,)). Sign convention:
    the largest-magnitude loading of each component is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DomainError(f"need >= 3 embedding rows, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    total_var = float(np.trace(cov))
    if total_var <= 0:
        raise DomainError("embeddings have zero variance (rank < 2)")

    rng = rng_for(seed, "pca-power-iteration")
    components = []
    eigvals = []
    mat = cov.copy()
    for _ in range(2):
        v = rng.standard_normal(cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            nv = mat @ v
            norm = np.linalg.norm(nv)
            if norm == 0:
                break
            nv /= norm
            if np.linalg.norm(nv - v) < tol:
                v = nv
                break
            v = nv
        lam = float(v @ mat @ v)
        if len(components) == 1 and (lam <= 0 or lam / max(eigvals[0], 1e-300) < 1e-12):
            raise DomainError("embedding covariance has rank < 2")
        i_max = int(np.argmax(np.abs(v)))
        if v[i_max] < 0:
            v = -v
        components.append(v)
        eigvals.append(lam)
        mat = mat - lam * np.outer(v, v)
    comps = np.stack(components, axis=1)
    coords = centered @ comps
    ratios = np.array(eigvals) / total_var
    return coords, ratios


def attention_buckets(weights_pooled, n_buckets: int = 10):
    """Percentile-bucket index per tile from pooled raw attention weights.

    Rank-based so the buckets always partition the tiles, ties broken by
    original index.
    """
    w = np.asarray(weights_pooled, dtype=np.float64)
    if len(w) == 0:
        raise DomainError("no weights to bucket")
    order = np.lexsort((np.arange(len(w)), w))
    ranks = np.empty(len(w), dtype=np.int64)
    ranks[order] = np.arange(len(w))
    return np.minimum((ranks * n_buckets) // len(w), n_buckets - 1)


def attention_mosaic(tile_entries, buckets, k_per_bucket: int, n_buckets: int = 10,
                     seed: int = 0):
    """Seeded sample of k tile references per attention bucket.

    tile_entries: sequence of opaque tile references (dicts); buckets: bucket
    index per entry. Returns a manifest list of (bucket, entry); empty buckets
    are skipped with a note in the second return value.
    """
    buckets = np.asarray(buckets)
    if len(tile_entries) != len(buckets):
        raise DomainError("tile_entries/buckets length mismatch")
    manifest = []
    notes = []
    for b in range(n_buckets):
        idx = np.flatnonzero(buckets == b)
        if len(idx) == 0:
            notes.append(f"bucket {b} empty, skipped")
            continue
        rng = rng_for(seed, "mosaic-bucket", b)
        take = min(k_per_bucket, len(idx))
        chosen = np.sort(rng.choice(idx, size=take, replace=False))
        for i in chosen:
            manifest.append((b, tile_entries[int(i)]))
    return manifest, notes
