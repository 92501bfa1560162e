"""Cross-validation, configuration comparison, data titration and final
retraining.

Five folds, stratified by binary label; each rotation uses 3 folds for
training, the next fold for epoch selection (early stopping) and the held-out
fold for generalization metrics. All variant comparisons reuse one fold plan
and one training seed so the varied factor is the only difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import evalstat, milcore
from .errors import ConfigurationError, DomainError
from .runutil import rng_for
from .special import t_two_sided


@dataclass
class CvPlan:
    n_folds: int
    fold_of: np.ndarray          # fold index per slide
    seed: int

    def rotations(self):
        """(train, selection, test) index triples for each fold rotation."""
        out = []
        for k in range(self.n_folds):
            test = np.flatnonzero(self.fold_of == k)
            sel = np.flatnonzero(self.fold_of == (k + 1) % self.n_folds)
            train = np.flatnonzero(~np.isin(self.fold_of, [k, (k + 1) % self.n_folds]))
            out.append({"train": train, "selection": sel, "test": test})
        return out


def make_folds(binary_labels, n_folds: int = 5, seed: int = 0) -> CvPlan:
    """Stratified fold assignment, deterministic given seed."""
    y = (np.asarray(binary_labels) != 0).astype(np.int64)
    fold_of = np.empty(len(y), dtype=np.int64)
    rng = rng_for(seed, "cv-folds")
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < n_folds:
            raise ConfigurationError(
                f"class {cls} has {len(idx)} slides, fewer than {n_folds} folds")
        perm = rng.permutation(idx)
        for pos, slide in enumerate(perm):
            fold_of[slide] = pos % n_folds
    return CvPlan(n_folds=n_folds, fold_of=fold_of, seed=seed)


def _check_no_leakage(rotation):
    a, b, c = (set(rotation["train"].tolist()), set(rotation["selection"].tolist()),
               set(rotation["test"].tolist()))
    if a & b or a & c or b & c:
        raise DomainError("fold leakage: train/selection/test overlap")


def _fold_metrics(probs, binary, tpm):
    report = {}
    report["roc_auc"], _ = evalstat.roc_auc(probs, binary)
    report["average_precision"] = evalstat.average_precision(probs, binary)
    if (tpm is not None and len(tpm) >= 3
            and len(set(np.asarray(tpm).tolist())) > 1
            and len(set(np.asarray(probs).tolist())) > 1):
        report["pearson_r_vs_tpm"], report["pearson_p_vs_tpm"] = \
            evalstat.pearson_r(probs, tpm)
    return report


def run_cv(bags, smooth_labels, binary_labels, tpm, plan: CvPlan,
           config: milcore.TrainConfig):
    """Train/evaluate every rotation; returns (fold reports, summary)."""
    smooth = np.asarray(smooth_labels, dtype=np.float64)
    binary = (np.asarray(binary_labels) != 0).astype(np.int64)
    tpm = None if tpm is None else np.asarray(tpm, dtype=np.float64)
    fold_reports = []
    for k, rotation in enumerate(plan.rotations()):
        _check_no_leakage(rotation)
        tr, sel, te = rotation["train"], rotation["selection"], rotation["test"]
        try:
            params, log = milcore.train(
                [bags[i] for i in tr], smooth[tr],
                [bags[i] for i in sel], smooth[sel], config)
        except Exception as exc:
            raise type(exc)(f"fold {k}: {exc}") from exc
        probs, _ = milcore.predict([bags[i] for i in te], params)
        metrics = _fold_metrics(probs, binary[te], None if tpm is None else tpm[te])
        fold_reports.append({"fold": k, "metrics": metrics,
                             "best_epoch": log["best_epoch"],
                             "n_train": len(tr), "n_selection": len(sel),
                             "n_test": len(te)})
    summary = summarize_folds(fold_reports)
    return fold_reports, summary


def summarize_folds(fold_reports, metric: str = "roc_auc") -> dict:
    vals = np.array([fr["metrics"][metric] for fr in fold_reports])
    # percentiles of 5 numbers are under-determined: report the interpolated
    # interval and the raw min/max side by side
    return {
        "metric": metric,
        "fold_values": vals.tolist(),
        "mean": float(vals.mean()),
        "percentile_interval_2p5_97p5": [float(np.percentile(vals, 2.5)),
                                         float(np.percentile(vals, 97.5))],
        "min_max": [float(vals.min()), float(vals.max())],
    }


def paired_t_test(a, b):
    """Two-sided paired t-test; degenerate zero-variance pairs give p = 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise DomainError("paired_t_test needs two equal-length vectors, n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        return 0.0, (1.0 if d.mean() == 0 else 0.0)
    t = d.mean() / (sd / np.sqrt(len(d)))
    return float(t), t_two_sided(float(t), len(d) - 1)


def compare_configs(variants, plan: CvPlan, config: milcore.TrainConfig):
    """Run CV for named variants on identical folds and compare fold AUCs.

    variants: list of (name, bags, smooth, binary, tpm). Returns a report with
    per-variant summaries and a paired two-sided t-test for every pair.
    """
    if len(variants) < 2:
        raise ConfigurationError("compare_configs needs >= 2 variants")
    n = len(plan.fold_of)
    for name, bags, smooth, binary, _ in variants:
        if len(bags) != n:
            raise ConfigurationError(f"variant {name!r} has {len(bags)} bags, plan has {n}")
    results = {}
    for name, bags, smooth, binary, tpm in variants:
        folds, summary = run_cv(bags, smooth, binary, tpm, plan, config)
        results[name] = {"folds": folds, "summary": summary}
    pairs = []
    names = [v[0] for v in variants]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a = [f["metrics"]["roc_auc"] for f in results[names[i]]["folds"]]
            b = [f["metrics"]["roc_auc"] for f in results[names[j]]["folds"]]
            t, p = paired_t_test(a, b)
            pairs.append({"a": names[i], "b": names[j],
                          "mean_diff": float(np.mean(a) - np.mean(b)),
                          "t": t, "p": p})
    return {"variants": results, "pairs": pairs}


@dataclass(frozen=True)
class TitrationPlan:
    fractions: tuple = (0.25, 0.5, 1.0)
    repeats: int = 3
    seed: int = 0

    def __post_init__(self):
        if list(self.fractions) != sorted(self.fractions) or \
           any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigurationError("fractions must be ascending values in (0, 1]")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")


def run_titration(bags, smooth_labels, binary_labels, plan: CvPlan,
                  titration: TitrationPlan, config: milcore.TrainConfig):
    """Positive-case titration on rotation 0 of the fold plan.

    For each fraction and repeat, a seeded subsample of the training positives
    (original order preserved) plus all training negatives trains a model that
    is evaluated on the fixed test fold. fraction 1.0 is a no-op subsample and
    reproduces the plain rotation-0 result.
    """
    smooth = np.asarray(smooth_labels, dtype=np.float64)
    binary = (np.asarray(binary_labels) != 0).astype(np.int64)
    rotation = plan.rotations()[0]
    _check_no_leakage(rotation)
    tr, sel, te = rotation["train"], rotation["selection"], rotation["test"]
    pos_tr = tr[binary[tr] == 1]
    neg_tr = tr[binary[tr] == 0]
    results = []
    for fi, fraction in enumerate(titration.fractions):
        k = int(round(fraction * len(pos_tr)))
        if k < 2:
            raise ConfigurationError(
                f"fraction {fraction} leaves {k} positive training slides (< 2)")
        for rep in range(titration.repeats):
            rng = rng_for(titration.seed, "titration", fi, rep)
            chosen = np.sort(rng.choice(len(pos_tr), size=k, replace=False))
            train_idx = np.sort(np.concatenate([pos_tr[chosen], neg_tr]))
            params, _ = milcore.train(
                [bags[i] for i in train_idx], smooth[train_idx],
                [bags[i] for i in sel], smooth[sel], config)
            probs, _ = milcore.predict([bags[i] for i in te], params)
            auc, _ = evalstat.roc_auc(probs, binary[te])
            results.append({"fraction": fraction, "repeat": rep,
                            "n_positives": k, "roc_auc": auc})
    curve = []
    for fraction in titration.fractions:
        vals = [r["roc_auc"] for r in results if r["fraction"] == fraction]
        curve.append({"fraction": fraction, "mean_auc": float(np.mean(vals)),
                      "sd_auc": float(np.std(vals)), "n": len(vals)})
    return results, curve


def final_train(bags, smooth_labels, binary_labels, seed: int,
                base_config: milcore.TrainConfig,
                learning_rates=(1e-3, 1e-4), weight_decays=(1e-2, 1e-3),
                selection_fraction: float = 0.2):
    """Reshuffled train/selection split plus a small lr/weight-decay grid.

    Returns the best-epoch parameters of the grid point with the lowest
    selection loss, plus a trial log.
    """
    smooth = np.asarray(smooth_labels, dtype=np.float64)
    binary = (np.asarray(binary_labels) != 0).astype(np.int64)
    rng = rng_for(seed, "final-split")
    sel_idx = []
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(binary == cls))
        n_sel = max(1, int(round(selection_fraction * len(idx))))
        sel_idx.extend(idx[:n_sel].tolist())
    sel_idx = np.sort(np.array(sel_idx, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(len(bags)), sel_idx)

    best = None
    trials = []
    for lr in learning_rates:
        for wd in weight_decays:
            config = milcore.TrainConfig(
                learning_rate=lr, weight_decay=wd, beta1=base_config.beta1,
                beta2=base_config.beta2, eps=base_config.eps,
                max_epochs=base_config.max_epochs, patience=base_config.patience,
                bags_per_step=base_config.bags_per_step,
                max_tiles_per_bag=base_config.max_tiles_per_bag,
                seed=base_config.seed,
                decoupled_weight_decay=base_config.decoupled_weight_decay)
            params, log = milcore.train(
                [bags[i] for i in train_idx], smooth[train_idx],
                [bags[i] for i in sel_idx], smooth[sel_idx], config)
            trials.append({"learning_rate": lr, "weight_decay": wd,
                           "best_val_loss": log["best_val_loss"],
                           "best_epoch": log["best_epoch"]})
            if best is None or log["best_val_loss"] < best[0]:
                best = (log["best_val_loss"], params, lr, wd, log)
    _, params, lr, wd, log = best
    return params, {"learning_rate": lr, "weight_decay": wd, "trials": trials,
                    "train_idx": train_idx.tolist(), "selection_idx": sel_idx.tolist(),
                    "log": log}
