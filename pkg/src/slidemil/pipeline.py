"""End-to-end run driver: the `replicate` chain and its reusable stages.

A run directory is laid out as:

    run_manifest.json             config echo + hash + environment versions
    cohort/manifest.jsonl         slide records (+ images/, masks/)
    tiles/index_<mag>.jsonl       tile index per magnification
    tiles/classes_<mag>.jsonl     per-tile majority histology class
    embeddings/<mag>.bin          MILE embeddings per magnification
    labels/threshold_derivation.json (+ threshold_roc.csv)
    cv/...                        fold reports, magnification + label comparisons
    titration/titration.csv (+ .json)
    final/checkpoint.bin, holdout_metrics.json, roc.csv, pr.csv, scores.csv
    final/subgroups.json, off_target.json
    perturb/sweep.csv
    scanner/scanner_shift.json
    interpret/enrichment.tsv (+ .json), projection.csv, mosaics/

Nothing written contains timestamps, so identical configs produce identical
bytes regardless of wall clock or worker count.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import __version__, evalstat, harness, imageops, interpret, labels, milcore, robustness
from . import encoder as encoder_mod
from . import preprocess as preprocess_mod
from . import synthcohort
from .config import PipelineConfig, canonical_dict, config_hash
from .errors import DomainError, EmptyBagError
from .runutil import pmap, rng_for

MAGNIFICATIONS = ("x20", "x10", "x5")


def cohort_config(cfg: PipelineConfig) -> synthcohort.CohortConfig:
    c = cfg.cohort
    return synthcohort.CohortConfig(
        n_slides=c.n_train + c.n_test, grid_rows=c.grid_rows, grid_cols=c.grid_cols,
        tile_px=c.tile_px,
        tpm_mixture=synthcohort.MixtureParams(
            mean_low=c.mixture_mean_low, mean_high=c.mixture_mean_high,
            sd_low=c.mixture_sd_low, sd_high=c.mixture_sd_high,
            weight_low=c.mixture_weight_low),
        signal_strength=c.signal_strength, marker_fraction=c.marker_fraction,
        seed=cfg.seed)


def seg_params(cfg: PipelineConfig) -> preprocess_mod.SegmentationParams:
    p = cfg.preprocess
    return preprocess_mod.SegmentationParams(
        saturation_threshold=p.saturation_threshold,
        luminance_threshold=p.luminance_threshold,
        min_tissue_fraction=p.min_tissue_fraction,
        marker_overlap_max=p.marker_overlap_max,
        blur_variance_min=p.blur_variance_min)


def encoder_spec(cfg: PipelineConfig) -> encoder_mod.EncoderSpec:
    e = cfg.encoder
    return encoder_mod.EncoderSpec(kind=e.kind, seed=e.seed,
                                   external_path=e.external_path)


def train_config(cfg: PipelineConfig) -> milcore.TrainConfig:
    t = cfg.train
    return milcore.TrainConfig(
        learning_rate=t.learning_rate, weight_decay=t.weight_decay,
        beta1=t.beta1, beta2=t.beta2, eps=t.eps, max_epochs=t.max_epochs,
        patience=t.patience, bags_per_step=t.bags_per_step,
        max_tiles_per_bag=t.max_tiles_per_bag, seed=cfg.seed,
        decoupled_weight_decay=t.decoupled_weight_decay)


def tile_majority_classes(record, specs) -> list:
    """Majority histology class name over each accepted tile's native footprint."""
    out = []
    mask = record.histology_mask
    for s in specs:
        if not s.accepted:
            continue
        factor = preprocess_mod.MAGNIFICATION_FACTORS[s.magnification]
        size = preprocess_mod.TILE_PX * factor
        y, x = s.origin_px
        patch = mask[y:y + size, x:x + size]
        counts = np.bincount(patch.ravel(), minlength=len(synthcohort.CLASS_NAMES))
        out.append(synthcohort.CLASS_NAMES[int(np.argmax(counts))])
    return out


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunArtifacts:
    """In-memory products of the generate/tile/encode pass."""
    scalars: list                 # per-slide dict (tpm, attributes, mutations, cn)
    bags: dict                    # magnification -> list[TileBag | None]
    tile_classes: dict            # magnification -> list[list[str]]
    accepted_counts: dict         # magnification -> list[int]


def run_generate_encode(cfg: PipelineConfig, run_dir: str,
                        magnifications=MAGNIFICATIONS) -> RunArtifacts:
    """Fused pass: generate each slide, write rasters/manifest/indexes, encode.

    Slides are processed independently (parallelizable); pixels are dropped as
    soon as the slide's tiles are encoded.
    """
    ccfg = cohort_config(cfg)
    sparams = seg_params(cfg)
    espec = encoder_spec(cfg)
    os.makedirs(os.path.join(run_dir, "cohort"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "tiles"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "embeddings"), exist_ok=True)

    def work(index):
        record = synthcohort.generate_slide(ccfg, index)
        rel = synthcohort.write_slide_rasters(record, os.path.join(run_dir, "cohort"))
        line = synthcohort.manifest_line(record, rel)
        per_mag = {}
        for mag in magnifications:
            specs, stack = preprocess_mod.tile_slide(record, mag, sparams)
            try:
                bag = encoder_mod.encode_slide(specs, stack, espec)
            except EmptyBagError:
                bag = None
            classes = tile_majority_classes(record, specs)
            per_mag[mag] = (specs, bag, classes)
        scalars = {"index": index, "slide_id": record.slide_id, "tpm": record.tpm,
                   "cn_segments": record.cn_segments,
                   "attributes": record.attributes,
                   "mutations": record.off_target_mutations}
        return line, scalars, per_mag

    results = pmap(work, range(ccfg.n_slides), cfg.workers)

    with open(os.path.join(run_dir, "cohort", "manifest.jsonl"), "w") as fh:
        for line, _, _ in results:
            fh.write(line + "\n")
    bags = {m: [] for m in magnifications}
    tile_classes = {m: [] for m in magnifications}
    accepted_counts = {m: [] for m in magnifications}
    for mag in magnifications:
        with open(os.path.join(run_dir, "tiles", f"index_{mag}.jsonl"), "w") as fh_idx, \
             open(os.path.join(run_dir, "tiles", f"classes_{mag}.jsonl"), "w") as fh_cls:
            for _, scalars, per_mag in results:
                specs, bag, classes = per_mag[mag]
                for s in specs:
                    fh_idx.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
                fh_cls.write(json.dumps(
                    {"slide_id": scalars["slide_id"], "classes": classes},
                    sort_keys=True) + "\n")
                bags[mag].append(bag)
                tile_classes[mag].append(classes)
                accepted_counts[mag].append(0 if bag is None else bag.embeddings.shape[0])
        encoder_mod.write_embeddings(
            os.path.join(run_dir, "embeddings", f"{mag}.bin"),
            [b for b in bags[mag] if b is not None])
    scalars = [s for _, s, _ in results]
    return RunArtifacts(scalars=scalars, bags=bags, tile_classes=tile_classes,
                        accepted_counts=accepted_counts)


def stage_threshold_derivation(artifacts: RunArtifacts, run_dir: str):
    os.makedirs(os.path.join(run_dir, "labels"), exist_ok=True)
    cohort = [(s["tpm"], s["cn_segments"]) for s in artifacts.scalars]
    report = labels.derive_threshold(cohort)
    _json_dump(report.to_dict(), os.path.join(run_dir, "labels", "threshold_derivation.json"))
    evalstat.write_curve_csv([(p[0], p[1]) for p in report.roc_points],
                             os.path.join(run_dir, "labels", "threshold_roc.csv"),
                             ["fpr", "tpr"])
    return report


def _slide_labels(artifacts: RunArtifacts):
    tpm = np.array([s["tpm"] for s in artifacts.scalars])
    smooth = labels.smooth_label(tpm)
    binary = labels.binary_label(tpm)
    return tpm, smooth, binary


def score_images(images, marker_masks, slide_ids, sparams, espec, params,
                 magnification="x20", workers: int = 1):
    """Tile, encode and score a list of slide images; QC-empty slides get 0.5."""
    def work(i):
        holder = _ImageSlide(slide_ids[i], images[i], marker_masks[i])
        specs, stack = preprocess_mod.tile_slide(holder, magnification, sparams)
        try:
            bag = encoder_mod.encode_slide(specs, stack, espec)
        except EmptyBagError:
            return 0.5
        return milcore.forward(bag.embeddings, params).prob

    return np.asarray(pmap(work, range(len(images)), workers))


class _ImageSlide:
    """Duck-typed slide wrapper for re-scoring perturbed/shifted images."""

    def __init__(self, slide_id, image, marker_mask):
        self.slide_id = slide_id
        self.image = image
        self.marker_mask = marker_mask


def load_test_records(run_dir: str, indices):
    records = []
    manifest = os.path.join(run_dir, "cohort", "manifest.jsonl")
    with open(manifest) as fh:
        lines = fh.read().splitlines()
    root = os.path.dirname(os.path.abspath(manifest))
    for i in indices:
        entry = json.loads(lines[i])
        image = np.asarray(Image.open(os.path.join(root, entry["image_path"])))
        marker = np.asarray(Image.open(os.path.join(root, entry["marker_mask_path"]))) > 0
        records.append(_ImageSlide(entry["slide_id"], image, marker))
    return records


def replicate(cfg: PipelineConfig, run_dir: str) -> dict:
    """Run the full chain; returns a summary dict (also written to disk).

    QC exclusions are per stage: experiments comparing magnifications drop
    slides with an empty bag at any compared magnification; everything else
    only requires a nonempty x20 bag. Excluded slide ids land in the summary.
    """
    os.makedirs(run_dir, exist_ok=True)
    summary = {"config_hash": config_hash(cfg)}

    artifacts = run_generate_encode(cfg, run_dir)
    stage_threshold_derivation(artifacts, run_dir)
    n_train = cfg.cohort.n_train
    tpm, smooth, binary = _slide_labels(artifacts)

    if cfg.replicate.permute_labels:
        # null experiment: permute training-portion labels, keep truth on test
        perm = rng_for(cfg.seed, "label-permutation").permutation(n_train)
        for arr in (tpm, smooth, binary):
            arr[:n_train] = arr[:n_train][perm]

    x20_ok = np.array([b is not None for b in artifacts.bags["x20"]])
    train_idx = np.flatnonzero(x20_ok[:n_train])
    test_idx = n_train + np.flatnonzero(x20_ok[n_train:])
    summary["excluded_slides_x20"] = [artifacts.scalars[i]["slide_id"]
                                      for i in np.flatnonzero(~x20_ok)]

    tcfg = train_config(cfg)

    def bags_at(mag, idx):
        return [artifacts.bags[mag][i].embeddings for i in idx]

    train_bags = bags_at("x20", train_idx)
    plan = harness.make_folds(binary[train_idx], cfg.cv.n_folds, seed=cfg.seed)

    if cfg.replicate.run_cv:
        os.makedirs(os.path.join(run_dir, "cv"), exist_ok=True)
        cv_ok = x20_ok.copy()
        for mag in cfg.cv.magnifications:
            cv_ok &= np.array([b is not None for b in artifacts.bags[mag]])
        cv_idx = np.flatnonzero(cv_ok[:n_train])
        summary["cv_excluded_train_slides"] = int(n_train - len(cv_idx))
        cv_plan = harness.make_folds(binary[cv_idx], cfg.cv.n_folds, seed=cfg.seed)
        variants = [(mag, bags_at(mag, cv_idx), smooth[cv_idx], binary[cv_idx],
                     tpm[cv_idx]) for mag in cfg.cv.magnifications]
        if len(variants) >= 2:
            mag_report = harness.compare_configs(variants, cv_plan, tcfg)
        else:
            name, bags_v, sm, bi, tp = variants[0]
            folds, fold_summary = harness.run_cv(bags_v, sm, bi, tp, cv_plan, tcfg)
            mag_report = {"variants": {name: {"folds": folds, "summary": fold_summary}},
                          "pairs": []}
        _json_dump(_strip_folds(mag_report),
                   os.path.join(run_dir, "cv", "magnification_comparison.json"))
        for mag, res in mag_report["variants"].items():
            _json_dump(res["folds"], os.path.join(run_dir, "cv", f"folds_{mag}.json"))
        first_mag = cfg.cv.magnifications[0]
        _json_dump(mag_report["variants"][first_mag]["summary"],
                   os.path.join(run_dir, "cv", "summary.json"))
        summary["cv_mean_auc"] = mag_report["variants"][first_mag]["summary"]["mean"]

        if cfg.cv.compare_label_modes:
            label_variants = [
                ("smooth", bags_at("x20", cv_idx), smooth[cv_idx], binary[cv_idx],
                 tpm[cv_idx]),
                ("binary", bags_at("x20", cv_idx), binary[cv_idx].astype(float),
                 binary[cv_idx], tpm[cv_idx]),
            ]
            label_report = harness.compare_configs(label_variants, cv_plan, tcfg)
            _json_dump(_strip_folds(label_report),
                       os.path.join(run_dir, "cv", "label_mode_comparison.json"))

    if cfg.replicate.run_titration:
        os.makedirs(os.path.join(run_dir, "titration"), exist_ok=True)
        tplan = harness.TitrationPlan(fractions=tuple(cfg.titration.fractions),
                                      repeats=cfg.titration.repeats, seed=cfg.seed)
        results, curve = harness.run_titration(
            train_bags, smooth[train_idx], binary[train_idx], plan, tplan, tcfg)
        _json_dump({"results": results, "curve": curve},
                   os.path.join(run_dir, "titration", "titration.json"))
        with open(os.path.join(run_dir, "titration", "titration.csv"), "w") as fh:
            fh.write("fraction,repeat,n_positives,roc_auc\n")
            for r in results:
                fh.write(f"{r['fraction']},{r['repeat']},{r['n_positives']},{r['roc_auc']!r}\n")

    # final model: reshuffled train/selection split + lr/wd grid
    os.makedirs(os.path.join(run_dir, "final"), exist_ok=True)
    lr_grid = tuple(cfg.train.grid_learning_rates) or (tcfg.learning_rate,)
    wd_grid = tuple(cfg.train.grid_weight_decays) or (tcfg.weight_decay,)
    params, fit_info = harness.final_train(
        train_bags, smooth[train_idx], binary[train_idx], cfg.seed, tcfg,
        learning_rates=lr_grid, weight_decays=wd_grid)
    _json_dump({k: fit_info[k] for k in ("learning_rate", "weight_decay", "trials")},
               os.path.join(run_dir, "final", "grid_selection.json"))
    milcore.save_checkpoint(
        os.path.join(run_dir, "final", "checkpoint.bin"), params,
        meta={"seed": cfg.seed, "best_epoch": fit_info["log"]["best_epoch"],
              "learning_rate": fit_info["learning_rate"],
              "weight_decay": fit_info["weight_decay"],
              "embedding_version": encoder_mod.EMBED_VERSION})

    # operating point from the training-side selection split at target sensitivity
    sel_rel = np.asarray(fit_info["selection_idx"], dtype=np.int64)
    sel_probs, _ = milcore.predict([train_bags[i] for i in sel_rel], params)
    threshold = evalstat.select_operating_point(
        sel_probs, binary[train_idx][sel_rel], cfg.evaluation.target_sensitivity)

    # holdout evaluation
    test_bags = bags_at("x20", test_idx)
    test_probs, test_attention = milcore.predict(test_bags, params)
    y_test = binary[test_idx]
    report = evalstat.compute_report(
        test_probs, y_test, threshold, tpm=tpm[test_idx],
        n_resamples=cfg.evaluation.n_resamples, seed=cfg.seed)
    report.save(os.path.join(run_dir, "final", "holdout_metrics.json"))
    evalstat.write_curve_csv([(p[0], p[1]) for p in report.curves["roc"]],
                             os.path.join(run_dir, "final", "roc.csv"), ["fpr", "tpr"])
    evalstat.write_curve_csv([(p[0], p[1]) for p in report.curves["pr"]],
                             os.path.join(run_dir, "final", "pr.csv"),
                             ["recall", "precision"])
    with open(os.path.join(run_dir, "final", "scores.csv"), "w") as fh:
        fh.write("slide_id,probability,binary_label,tpm\n")
        for k, i in enumerate(test_idx):
            s = artifacts.scalars[i]
            fh.write(f"{s['slide_id']},{float(test_probs[k])!r},{int(binary[i])},"
                     f"{float(tpm[i])!r}\n")
    summary["holdout_auc"] = report.metrics["roc_auc"]["point"]
    summary["holdout_pearson_r"] = report.metrics.get(
        "pearson_r_vs_tpm", {}).get("point")
    summary["operating_threshold"] = threshold

    # subgroup + off-target analyses
    subgroups = {}
    for name in cfg.evaluation.subgroup_attributes:
        values = [artifacts.scalars[i]["attributes"][name] for i in test_idx]
        try:
            subgroups[name] = evalstat.subgroup_analysis(
                test_probs, y_test, values,
                n_resamples=cfg.evaluation.subgroup_resamples, seed=cfg.seed)
        except DomainError as exc:
            subgroups[name] = {"error": str(exc)}
    _json_dump(subgroups, os.path.join(run_dir, "final", "subgroups.json"))

    off_target = {}
    for gene in synthcohort.MUTATION_GENES:
        flags = [artifacts.scalars[i]["mutations"][gene] for i in test_idx]
        try:
            auc, interval = evalstat.off_target_roc(
                test_probs, flags, n_resamples=cfg.evaluation.subgroup_resamples,
                seed=cfg.seed)
            off_target[gene] = {"auc": auc, "interval": list(interval)}
        except DomainError as exc:
            off_target[gene] = {"error": str(exc)}
    _json_dump(off_target, os.path.join(run_dir, "final", "off_target.json"))

    sparams = seg_params(cfg)
    espec = encoder_spec(cfg)

    def subsample_test(max_slides, purpose):
        if max_slides and max_slides < len(test_idx):
            rng = rng_for(cfg.seed, purpose)
            rel = np.sort(rng.choice(len(test_idx), size=max_slides, replace=False))
        else:
            rel = np.arange(len(test_idx))
        return rel

    def manifest_indices(rel):
        return [int(artifacts.scalars[test_idx[int(r)]]["index"]) for r in rel]

    if cfg.replicate.run_perturbation:
        os.makedirs(os.path.join(run_dir, "perturb"), exist_ok=True)
        rel = subsample_test(cfg.perturb.max_slides, "perturb-subsample")
        records = load_test_records(run_dir, manifest_indices(rel))
        spec = robustness.PerturbationSpec(
            n_levels=cfg.perturb.n_levels, repeats=cfg.perturb.repeats,
            brightness_step=cfg.perturb.brightness_step,
            contrast_step=cfg.perturb.contrast_step,
            saturation_step=cfg.perturb.saturation_step,
            hue_step_deg=cfg.perturb.hue_step_deg, seed=cfg.seed)

        def score_fn(images):
            return score_images(images, [r.marker_mask for r in records],
                                [r.slide_id for r in records], sparams, espec,
                                params, workers=cfg.workers)

        rows, _ = robustness.run_perturbation_sweep(
            records, y_test[rel], spec, score_fn, threshold)
        robustness.write_sweep_csv(rows, os.path.join(run_dir, "perturb", "sweep.csv"))
        summary["perturb_rows"] = len(rows)

    if cfg.replicate.run_scanner_shift:
        os.makedirs(os.path.join(run_dir, "scanner"), exist_ok=True)
        rel = subsample_test(cfg.scanner.max_slides, "scanner-subsample")
        records = load_test_records(run_dir, manifest_indices(rel))
        profiles = synthcohort.default_scanner_profiles()
        shifted = robustness.simulate_scanner_shift(
            [r.image for r in records], cfg.scanner.profile, profiles)
        clean_probs = score_images([r.image for r in records],
                                   [r.marker_mask for r in records],
                                   [r.slide_id for r in records], sparams, espec,
                                   params, workers=cfg.workers)
        shift_probs = score_images(shifted, [r.marker_mask for r in records],
                                   [r.slide_id for r in records], sparams, espec,
                                   params, workers=cfg.workers)
        yb = y_test[rel]
        shift_report = {}
        for name, probs in (("clean", clean_probs), ("shifted", shift_probs)):
            auc, _ = evalstat.roc_auc(probs, yb)
            tm = evalstat.threshold_metrics(probs, yb, threshold)
            shift_report[name] = {
                "roc_auc": auc,
                "average_precision": evalstat.average_precision(probs, yb),
                "sensitivity": tm["sensitivity"], "specificity": tm["specificity"]}
        shift_report["profile"] = cfg.scanner.profile
        shift_report["mean_abs_delta_p"] = float(np.mean(np.abs(shift_probs - clean_probs)))
        _json_dump(shift_report, os.path.join(run_dir, "scanner", "scanner_shift.json"))

    if cfg.replicate.run_interpret:
        os.makedirs(os.path.join(run_dir, "interpret"), exist_ok=True)
        test_classes = [artifacts.tile_classes["x20"][i] for i in test_idx]
        enr = interpret.enrichment_analysis(
            test_attention, test_classes, synthcohort.CLASS_NAMES,
            mass_fraction=cfg.interpret.mass_fraction)
        _json_dump(enr.to_dict(), os.path.join(run_dir, "interpret", "enrichment.json"))
        interpret.write_enrichment_table(enr, os.path.join(run_dir, "interpret",
                                                           "enrichment.tsv"))
        summary["tumor_enrichment_p"] = next(
            (r.p_adjusted for r in enr.class_vs_all if r.tile_class == "tumor"), None)

        pooled = np.concatenate(test_bags, axis=0)
        pooled_weights = np.concatenate(test_attention)
        pooled_classes = [c for cl in test_classes for c in cl]
        pooled_refs = [ref for i in test_idx for ref in artifacts.bags["x20"][i].tile_refs]
        coords, ratios = interpret.project_embeddings(pooled, seed=cfg.seed)
        buckets = interpret.attention_buckets(pooled_weights, cfg.interpret.n_buckets)
        with open(os.path.join(run_dir, "interpret", "projection.csv"), "w") as fh:
            fh.write("slide_id,row,col,x,y,tile_class,attention_bucket\n")
            for i, ref in enumerate(pooled_refs):
                fh.write(f"{ref.slide_id},{ref.row},{ref.col},{float(coords[i,0])!r},"
                         f"{float(coords[i,1])!r},{pooled_classes[i]},{int(buckets[i])}\n")
        _json_dump({"explained_variance_ratios": ratios.tolist()},
                   os.path.join(run_dir, "interpret", "projection_meta.json"))
        write_mosaics(cfg, run_dir, pooled_refs, buckets)

    _json_dump({"config": canonical_dict(cfg), "config_hash": summary["config_hash"],
                "versions": environment_versions(),
                "summary": {k: v for k, v in summary.items() if k != "config_hash"}},
               os.path.join(run_dir, "run_manifest.json"))
    return summary


def _strip_folds(report: dict) -> dict:
    """Comparison report without per-fold bulk (kept in separate files)."""
    return {"variants": {name: {"summary": res["summary"]}
                         for name, res in report["variants"].items()},
            "pairs": report["pairs"]}


def write_mosaics(cfg: PipelineConfig, run_dir: str, pooled_refs, buckets):
    entries = [{"slide_id": r.slide_id, "row": r.row, "col": r.col,
                "magnification": r.magnification, "origin_px": list(r.origin_px)}
               for r in pooled_refs]
    manifest, notes = interpret.attention_mosaic(
        entries, buckets, cfg.interpret.k_per_bucket, cfg.interpret.n_buckets,
        seed=cfg.seed)
    mosaic_dir = os.path.join(run_dir, "interpret", "mosaics")
    os.makedirs(mosaic_dir, exist_ok=True)
    with open(os.path.join(mosaic_dir, "manifest.jsonl"), "w") as fh:
        for bucket, entry in manifest:
            fh.write(json.dumps({"bucket": bucket, **entry}, sort_keys=True) + "\n")
    # group tile crops by slide so each image is read once
    by_slide = {}
    for bucket, entry in manifest:
        by_slide.setdefault(entry["slide_id"], []).append((bucket, entry))
    crops = {}
    manifest_root = os.path.join(run_dir, "cohort")
    with open(os.path.join(manifest_root, "manifest.jsonl")) as fh:
        slide_paths = {json.loads(l)["slide_id"]: json.loads(l)["image_path"]
                       for l in fh.read().splitlines() if l.strip()}
    tile_px = preprocess_mod.TILE_PX
    for slide_id, items in by_slide.items():
        img = np.asarray(Image.open(os.path.join(manifest_root, slide_paths[slide_id])))
        for bucket, entry in items:
            factor = preprocess_mod.MAGNIFICATION_FACTORS[entry["magnification"]]
            y, x = entry["origin_px"]
            size = tile_px * factor
            patch = imageops.area_downsample_u8(img[y:y + size, x:x + size], factor)
            crops.setdefault(bucket, []).append(patch)
    for bucket, tiles in sorted(crops.items()):
        grid = np.concatenate(tiles, axis=1)
        Image.fromarray(grid).save(os.path.join(mosaic_dir, f"bucket_{bucket}.png"),
                                   compress_level=1)
    if notes:
        with open(os.path.join(mosaic_dir, "notes.txt"), "w") as fh:
            fh.write("\n".join(notes) + "\n")


def environment_versions() -> dict:
    import cv2
    import PIL
    return {"slidemil": __version__, "numpy": np.__version__,
            "opencv": cv2.__version__, "pillow": PIL.__version__}
