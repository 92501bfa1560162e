"""Acceptance suite: one test per acceptance criterion, run in order.

Each criterion prints a PASS line with its measured runtime. Runtime budgets
are stated for one desktop core and scaled by the session machine factor
(see conftest.machine_factor) so shared/throttled CI hardware does not fail
on wall clock alone.

The heavyweight criteria (end-to-end learning, enrichment, perturbation)
share one full `replicate` run on the default configuration (300 train /
100 test slides, 10x10 tile grid, signal strength 1).
"""

import csv
import json
import os
import time
from decimal import Decimal, getcontext
from fractions import Fraction

import numpy as np
import pytest

from slidemil import encoder, evalstat, interpret, labels, milcore, pipeline, synthcohort
from slidemil.config import PipelineConfig, from_dict

from test_evalstat import ap_sweep_oracle, auc_pairwise_oracle
from test_milcore import finite_difference_grads


def _report(name, elapsed, budget_s, machine_factor, detail=""):
    limit = budget_s * machine_factor
    status = "PASS" if elapsed <= limit else "FAIL(runtime)"
    print(f"[{status}] {name}: {elapsed:.1f}s (budget {budget_s}s x factor "
          f"{machine_factor:.1f}) {detail}")
    assert elapsed <= limit, f"{name} exceeded runtime budget: {elapsed:.1f}s > {limit:.1f}s"


@pytest.fixture(scope="module")
def default_run(tmp_path_factory, machine_factor):
    """One full default replicate; reused by criteria 5, 10 and 11."""
    run_dir = str(tmp_path_factory.mktemp("acceptance_run"))
    cfg = PipelineConfig()
    t0 = time.perf_counter()
    summary = pipeline.replicate(cfg, run_dir)
    elapsed = time.perf_counter() - t0
    return {"run_dir": run_dir, "summary": summary, "elapsed": elapsed, "cfg": cfg}


@pytest.fixture(scope="module")
def permuted_run(tmp_path_factory):
    """Null experiment: default cohort with permuted training labels."""
    run_dir = str(tmp_path_factory.mktemp("acceptance_null"))
    cfg = PipelineConfig()
    cfg.replicate.permute_labels = True
    cfg.replicate.run_cv = False
    cfg.replicate.run_titration = False
    cfg.replicate.run_perturbation = False
    cfg.replicate.run_scanner_shift = False
    cfg.replicate.run_interpret = False
    t0 = time.perf_counter()
    summary = pipeline.replicate(cfg, run_dir)
    return {"summary": summary, "elapsed": time.perf_counter() - t0}


def test_criterion_01_label_math_oracle(machine_factor):
    """smooth/binary/weighted copy number vs high-precision oracles, 1e-12."""
    t0 = time.perf_counter()
    getcontext().prec = 50
    ln2 = Decimal(2).ln()

    def smooth_oracle(tpm: float) -> float:
        x = (Decimal(repr(tpm)) + 1).ln() / ln2
        z = Decimal(2) * (x - 8)
        return float(1 / (1 + (-z).exp()))

    rng = np.random.default_rng(20240101)
    tpms = np.concatenate([
        rng.uniform(0, 5000, size=900),
        rng.uniform(200, 310, size=97),       # near the decision boundary
        np.array([0.0, 255.0, 1023.0]),
    ])
    for tpm in tpms:
        tpm = float(tpm)
        expected = smooth_oracle(tpm)
        got = labels.smooth_label(tpm)
        assert abs(got - expected) < 1e-12, f"smooth_label({tpm})"
        # log2(tpm+1) >= 8 is exactly tpm >= 255: integer comparison avoids
        # the rounding a finite-precision log would introduce at the boundary
        exact_binary = 1 if Decimal(repr(tpm)) >= 255 else 0
        assert labels.binary_label(tpm) == exact_binary
        assert (labels.binary_label(tpm) == 1) == (labels.smooth_label(tpm) >= 0.5)

    for _ in range(1000):
        n = int(rng.integers(1, 6))
        segs = [(int(rng.integers(1, 10_000)), float(rng.uniform(0, 9)))
                for _ in range(n)]
        exact = Fraction(0)
        total = Fraction(0)
        for length, cn in segs:
            exact += Fraction(length) * Fraction(repr(cn))
            total += Fraction(length)
        expected = float(exact / total)
        assert abs(labels.weighted_copy_number(segs) - expected) < 1e-12
    _report("criterion 1 label math oracle", time.perf_counter() - t0, 1.0,
            machine_factor, f"({len(tpms)} tpm + 1000 wcn inputs)")


def test_criterion_02_threshold_recovery(machine_factor):
    """derive_threshold recovers log-TPM 8 at sens 0.92 / spec 0.80."""
    t0 = time.perf_counter()
    cohort = synthcohort.make_operating_point_cohort(
        n_amplified=100, n_neutral=100, seed=31)
    rep = labels.derive_threshold(cohort)
    scores = np.sort([np.log2(t + 1) for t, _ in cohort])
    gap = float(np.max(np.diff(scores)))
    assert rep.sensitivity == pytest.approx(0.92)
    assert rep.specificity == pytest.approx(0.80)
    assert abs(rep.threshold - 8.0) <= gap
    _report("criterion 2 threshold recovery", time.perf_counter() - t0, 5.0,
            machine_factor, f"(threshold {rep.threshold:.4f}, gap {gap:.4f})")


def test_criterion_03_gradient_correctness(machine_factor):
    """Analytic backward vs central differences, 20 draws, bags of 1-64 tiles."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(17)
    max_rel = 0.0
    for trial in range(20):
        d, h, L = 20, 10, 6
        params = milcore.init_params(d, h, L, seed=trial)
        K = int(rng.integers(1, 65))
        X = rng.standard_normal((K, d))
        y = float(rng.uniform(0, 1))
        analytic = milcore.backward(X, params, y)
        numeric = finite_difference_grads(X, params, y, step=1e-5)
        for name, g_num in numeric.items():
            g_ana = np.asarray(getattr(analytic, name), dtype=np.float64).reshape(g_num.shape)
            rel = np.max(np.abs(g_ana - g_num) / np.maximum(np.abs(g_num), 1e-6))
            max_rel = max(max_rel, float(rel))
    assert max_rel < 1e-4
    _report("criterion 3 gradient correctness", time.perf_counter() - t0, 30.0,
            machine_factor, f"(max rel err {max_rel:.2e})")


def test_criterion_04_mil_invariances(machine_factor):
    """Permutation and duplication invariance of p to 1e-12 over 100 bags."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(18)
    worst = 0.0
    for trial in range(100):
        params = milcore.init_params(32, 12, 6, seed=1000 + trial)
        K = int(rng.integers(1, 80))
        X = rng.standard_normal((K, 32)) * float(rng.uniform(0.2, 3))
        base = milcore.forward(X, params)
        perm = rng.permutation(K)
        p_perm = milcore.forward(X[perm], params)
        p_dup = milcore.forward(np.concatenate([X, X]), params)
        worst = max(worst, abs(p_perm.prob - base.prob), abs(p_dup.prob - base.prob))
        assert abs(p_perm.prob - base.prob) <= 1e-12
        assert abs(p_dup.prob - base.prob) <= 1e-12
        assert abs(base.attention.sum() - 1.0) <= 1e-12
    _report("criterion 4 MIL invariances", time.perf_counter() - t0, 10.0,
            machine_factor, f"(worst deviation {worst:.2e})")


def test_criterion_05_end_to_end_learning(default_run, permuted_run, machine_factor):
    """Default replicate: holdout AUC >= 0.85, r >= 0.6; permuted null near 0.5."""
    summary = default_run["summary"]
    cfg = default_run["cfg"]
    assert cfg.cohort.n_train == 300 and cfg.cohort.n_test == 100
    assert cfg.cohort.signal_strength == 1.0

    # every slide keeps >= 64 accepted tiles at x20
    index_path = os.path.join(default_run["run_dir"], "tiles", "index_x20.jsonl")
    accepted = {}
    with open(index_path) as fh:
        for line in fh:
            row = json.loads(line)
            accepted[row["slide_id"]] = accepted.get(row["slide_id"], 0) + int(row["accepted"])
    assert len(accepted) == 400
    assert min(accepted.values()) >= 64

    auc = summary["holdout_auc"]
    r = summary["holdout_pearson_r"]
    null_auc = permuted_run["summary"]["holdout_auc"]
    assert auc >= 0.85
    assert r >= 0.6
    assert 0.40 <= null_auc <= 0.60
    _report("criterion 5 end-to-end learning", default_run["elapsed"], 600.0,
            machine_factor,
            f"(AUC {auc:.3f}, r {r:.3f}, null AUC {null_auc:.3f}; "
            f"permuted run {permuted_run['elapsed']:.0f}s)")


def test_criterion_06_metric_oracles(machine_factor):
    """AUC vs O(n^2) oracle and AP vs sweep oracle on 200 tied instances."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(19)
    for _ in range(200):
        n = int(rng.integers(4, 51))
        scores = np.round(rng.uniform(0, 1, size=n), 2)
        y = rng.integers(0, 2, size=n)
        if y.sum() in (0, n):
            y[0] = 1 - y[0]
        auc, _ = evalstat.roc_auc(scores, y)
        assert abs(auc - auc_pairwise_oracle(scores, y)) < 1e-12
        ap = evalstat.average_precision(scores, y)
        assert abs(ap - ap_sweep_oracle(scores, y)) < 1e-12
    scores = np.array([0.9] * 8 + [0.1] * 2 + [0.8] * 3 + [0.2] * 7)
    y = np.array([1] * 10 + [0] * 10)
    m = evalstat.threshold_metrics(scores, y, 0.5)
    assert m["sensitivity"] == 0.8 and m["specificity"] == 0.7 and m["kappa"] == 0.5
    _report("criterion 6 metric oracles", time.perf_counter() - t0, 5.0, machine_factor)


def test_criterion_07_statistics(machine_factor):
    """Wilcoxon enumeration, BH correction and chi-square reference values."""
    t0 = time.perf_counter()
    _, p, info = interpret.wilcoxon_signed_rank([1, 2, 3], alternative="greater")
    assert info["mode"] == "exact" and p == 0.125
    assert np.allclose(interpret.bh_fdr([0.01, 0.02, 0.04]), [0.03, 0.03, 0.04],
                       atol=1e-12)
    stat, df, p = evalstat.chi_square_association([[10, 20], [20, 10]])
    assert stat == pytest.approx(6.667, abs=1e-3)
    assert df == 1
    assert p == pytest.approx(0.0098, abs=1e-3)
    _report("criterion 7 statistics", time.perf_counter() - t0, 1.0, machine_factor)


def test_criterion_08_bootstrap_coverage(machine_factor):
    """95% AUC interval covers 0.5 in >= 90 of 100 null trials (n=200)."""
    t0 = time.perf_counter()
    covered = 0
    for trial in range(100):
        rng = np.random.default_rng(3000 + trial)
        scores = rng.uniform(0, 1, size=200)
        y = rng.integers(0, 2, size=200)
        if y.sum() in (0, 200):
            y[0] = 1 - y[0]

        def stat(idx, scores=scores, y=y):
            auc, _ = evalstat.roc_auc(scores[idx], y[idx])
            return auc

        lo, hi = evalstat.bootstrap_interval(stat, 200, labels=y,
                                             n_resamples=2000, seed=trial)
        if lo <= 0.5 <= hi:
            covered += 1
    assert covered >= 90
    _report("criterion 8 bootstrap coverage", time.perf_counter() - t0, 120.0,
            machine_factor, f"({covered}/100 covered)")


def test_criterion_09_operating_point(machine_factor):
    """Target-0.8 threshold achieves sensitivity >= 0.8 and is the largest such."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(21)
    for _ in range(100):
        n = int(rng.integers(5, 60))
        scores = np.round(rng.uniform(0, 1, size=n), 2)
        y = rng.integers(0, 2, size=n)
        if y.sum() == 0:
            y[0] = 1
        thr = evalstat.select_operating_point(scores, y, 0.8)
        pos = scores[y == 1]
        assert np.mean(pos >= thr) >= 0.8
        distinct = np.unique(scores)
        if len(distinct) > 1:
            for cand in (distinct[:-1] + distinct[1:]) / 2:
                if cand > thr:
                    assert np.mean(pos >= cand) < 0.8
    _report("criterion 9 operating point", time.perf_counter() - t0, 5.0, machine_factor)


def test_criterion_10_attention_enrichment(default_run, machine_factor):
    """Tumor enriched in high-attention tiles on the trained default model."""
    t0 = time.perf_counter()
    run_dir = default_run["run_dir"]
    enr = json.load(open(os.path.join(run_dir, "interpret", "enrichment.json")))
    tumor = next(r for r in enr["class_vs_all"] if r["tile_class"] == "tumor")
    assert tumor["alternative"] == "greater_in_high_attention"
    assert tumor["p_adjusted"] < 0.01

    # recompute per-slide fractions from the persisted artifacts (training reuse)
    params, _ = milcore.load_checkpoint(os.path.join(run_dir, "final", "checkpoint.bin"))
    bags = encoder.read_embeddings(os.path.join(run_dir, "embeddings", "x20.bin"))
    classes_by_slide = {}
    with open(os.path.join(run_dir, "tiles", "classes_x20.jsonl")) as fh:
        for line in fh:
            row = json.loads(line)
            classes_by_slide[row["slide_id"]] = row["classes"]
    test_ids = set()
    with open(os.path.join(run_dir, "final", "scores.csv")) as fh:
        next(fh)
        for line in fh:
            test_ids.add(line.split(",")[0])
    test_bags = [b for b in bags if b.slide_id in test_ids]
    assert len(test_bags) == 100
    better = 0
    for bag in test_bags:
        fwd = milcore.forward(bag.embeddings, params)
        cl = np.asarray(classes_by_slide[bag.slide_id])
        hi = interpret.high_attention_tiles(fwd.attention, 0.1)
        if np.mean(cl[hi] == "tumor") > np.mean(cl == "tumor"):
            better += 1
    assert better >= 90
    _report("criterion 10 attention enrichment", time.perf_counter() - t0, 120.0,
            machine_factor,
            f"(tumor adj p {tumor['p_adjusted']:.2e}; {better}/100 slides enriched)")


def test_criterion_11_perturbation_harness(default_run, machine_factor):
    """Level-0 sweep equals clean evaluation bitwise; full grid; stable AUC."""
    t0 = time.perf_counter()
    run_dir = default_run["run_dir"]
    cfg = default_run["cfg"]
    rows = {}
    with open(os.path.join(run_dir, "perturb", "sweep.csv")) as fh:
        for row in csv.DictReader(fh):
            key = (int(row["level"]), int(row["repeat"]))
            rows.setdefault(key, {})[row["metric"]] = float(row["value"])
    n_levels, repeats = cfg.perturb.n_levels, cfg.perturb.repeats
    assert len(rows) == (n_levels + 1) * repeats

    # independent clean evaluation of the sweep's slide subset
    from slidemil.runutil import rng_for
    summary = default_run["summary"]
    threshold = summary["operating_threshold"]
    scores_by_id = {}
    labels_by_id = {}
    with open(os.path.join(run_dir, "final", "scores.csv")) as fh:
        next(fh)
        for line in fh:
            sid, prob, lab, _ = line.strip().split(",")
            scores_by_id[sid] = float(prob)
            labels_by_id[sid] = int(lab)
    test_ids = sorted(scores_by_id)
    rng = rng_for(cfg.seed, "perturb-subsample")
    rel = np.sort(rng.choice(len(test_ids), size=cfg.perturb.max_slides, replace=False))
    sub_ids = [test_ids[i] for i in rel]
    clean_scores = np.array([scores_by_id[s] for s in sub_ids])
    clean_y = np.array([labels_by_id[s] for s in sub_ids])
    clean_auc, _ = evalstat.roc_auc(clean_scores, clean_y)
    clean_tm = evalstat.threshold_metrics(clean_scores, clean_y, threshold)
    for repeat in range(repeats):
        row = rows[(0, repeat)]
        assert row["roc_auc"] == clean_auc
        assert row["sensitivity"] == clean_tm["sensitivity"]
        assert row["specificity"] == clean_tm["specificity"]
        assert row["mean_abs_delta_p"] == 0.0
    worst = 0.0
    for (level, repeat), row in rows.items():
        if 1 <= level <= 3:
            worst = max(worst, abs(row["roc_auc"] - clean_auc))
    assert worst < 0.05
    _report("criterion 11 perturbation harness", time.perf_counter() - t0, 600.0,
            machine_factor,
            f"(rows {(n_levels + 1) * repeats}, worst level<=3 AUC shift {worst:.4f})")


def test_derived_probability_shift_monotone(default_run):
    """Mean |dp| grows with perturbation level (one inversion <= 0.005 allowed)."""
    run_dir = default_run["run_dir"]
    by_level = {}
    with open(os.path.join(run_dir, "perturb", "sweep.csv")) as fh:
        for row in csv.DictReader(fh):
            if row["metric"] == "mean_abs_delta_p":
                by_level.setdefault(int(row["level"]), []).append(float(row["value"]))
    means = [float(np.mean(by_level[lv])) for lv in sorted(by_level)]
    inversions = [max(0.0, means[i] - means[i + 1]) for i in range(len(means) - 1)]
    big = [d for d in inversions if d > 1e-12]
    print(f"    mean |dp| by level: {[round(m, 4) for m in means]}")
    assert len(big) <= 1 and all(d <= 0.005 for d in big), \
        f"inversions {inversions}"


def test_derived_scanner_shift_rank_vs_operating(machine_factor):
    """Scanner shift moves the operating point more than the ranking
    (|AUC change| < operating-metric change) in >= 8 of 10 seeded runs."""
    from slidemil import preprocess, robustness
    from slidemil.pipeline import encoder_spec, score_images, seg_params

    t0 = time.perf_counter()
    sp, es = seg_params(PipelineConfig()), encoder_spec(PipelineConfig())

    def run_seed(seed):
        cfg = synthcohort.CohortConfig(n_slides=40, grid_rows=4, grid_cols=4,
                                       seed=seed, marker_fraction=0.1)
        bags, tpms, imgs, masks, ids = [], [], [], [], []
        for i in range(cfg.n_slides):
            s = synthcohort.generate_slide(cfg, i)
            specs, stack = preprocess.tile_slide(s, "x20")
            bags.append(encoder.encode_slide(specs, stack).embeddings)
            tpms.append(s.tpm)
            if i >= 24:
                imgs.append(s.image)
                masks.append(s.marker_mask)
                ids.append(s.slide_id)
        tpms = np.asarray(tpms)
        smooth = labels.smooth_label(tpms)
        binary = labels.binary_label(tpms)
        if binary[:18].sum() < 3 or binary[:18].sum() > 15 or binary[24:].sum() in (0, 16):
            return None
        tc = milcore.TrainConfig(learning_rate=1e-3, weight_decay=1e-2,
                                 max_epochs=25, patience=5, seed=seed)
        params, _ = milcore.train(bags[:18], smooth[:18], bags[18:24],
                                  smooth[18:24], tc)
        tr_probs, _ = milcore.predict(bags[:18], params)
        thr = evalstat.select_operating_point(tr_probs, binary[:18], 0.9)
        clean = score_images(imgs, masks, ids, sp, es, params)
        shifted_imgs = robustness.simulate_scanner_shift(
            imgs, "warm_shift", synthcohort.default_scanner_profiles())
        shifted = score_images(shifted_imgs, masks, ids, sp, es, params)
        y = binary[24:]
        auc_c, _ = evalstat.roc_auc(clean, y)
        auc_s, _ = evalstat.roc_auc(shifted, y)
        tm_c = evalstat.threshold_metrics(clean, y, thr)
        tm_s = evalstat.threshold_metrics(shifted, y, thr)
        d_op = max(abs(tm_s["sensitivity"] - tm_c["sensitivity"]),
                   abs(tm_s["specificity"] - tm_c["specificity"]))
        return abs(auc_s - auc_c), d_op

    wins = valid = 0
    seed = 200
    while valid < 10 and seed < 260:
        out = run_seed(seed)
        seed += 1
        if out is None:
            continue
        valid += 1
        if out[0] < out[1]:
            wins += 1
    assert valid == 10
    assert wins >= 8
    print(f"    scanner shift rank-vs-operating: {wins}/10 seeds "
          f"({time.perf_counter() - t0:.0f}s)")


def test_criterion_12_determinism(tmp_path, machine_factor):
    """Full replicate chain is byte-identical across worker counts."""
    t0 = time.perf_counter()
    cfg_dict = {
        "seed": 77,
        "cohort": {"n_train": 24, "n_test": 12, "grid_rows": 4, "grid_cols": 4,
                   "marker_fraction": 0.2},
        "train": {"learning_rate": 2e-3, "max_epochs": 8, "patience": 3},
        "cv": {"magnifications": ["x20", "x5"], "compare_label_modes": True},
        "titration": {"fractions": [1.0], "repeats": 1},
        "evaluation": {"n_resamples": 200, "subgroup_resamples": 100,
                       "subgroup_attributes": ["specimen_size"]},
        "perturb": {"n_levels": 2, "repeats": 2, "max_slides": 4},
        "scanner": {"max_slides": 4},
        "interpret": {"k_per_bucket": 2},
    }
    run_a, run_b = tmp_path / "w1", tmp_path / "w3"
    cfg1 = from_dict(dict(cfg_dict, workers=1))
    cfg3 = from_dict(dict(cfg_dict, workers=3))
    pipeline.replicate(cfg1, str(run_a))
    pipeline.replicate(cfg3, str(run_b))
    mismatched = []
    for root, _, files in os.walk(run_a):
        for name in files:
            pa = os.path.join(root, name)
            pb = os.path.join(str(run_b), os.path.relpath(pa, str(run_a)))
            if open(pa, "rb").read() != open(pb, "rb").read():
                mismatched.append(os.path.relpath(pa, str(run_a)))
    assert mismatched == []
    _report("criterion 12 determinism", time.perf_counter() - t0, 600.0,
            machine_factor, "(full chain, workers 1 vs 3, every artifact byte-compared)")
