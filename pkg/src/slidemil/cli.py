"""Command-line entry point.

Subcommands mirror the pipeline stages (generate, tile, encode, train, cv,
titrate, eval, perturb, interpret) plus `replicate`, which runs the whole
chain into a run directory. Exit codes: 0 success, 1 domain/config error,
2 I/O error (including refusing to overwrite an existing run directory
without --force).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evalstat, harness, interpret, labels, milcore, pipeline, robustness, synthcohort
from . import encoder as encoder_mod
from . import preprocess as preprocess_mod
from .config import PipelineConfig, load_config, serialize
from .errors import SlidemilError
from .runutil import rng_for


def _load_cfg(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PipelineConfig()


def _prepare_out(path, force: bool):
    if os.path.exists(path) and os.listdir(path) and not force:
        raise OSError(f"output directory {path!r} exists; rerun with --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _manifest_scalars(manifest_path):
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _labels_for_bags(bags, manifest_path):
    rows = _manifest_scalars(manifest_path)
    by_id = {r["slide_id"]: r for r in rows}
    tpm = np.array([by_id[b.slide_id]["tpm"] for b in bags])
    return tpm, labels.smooth_label(tpm), labels.binary_label(tpm), by_id


def cmd_generate(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    ccfg = pipeline.cohort_config(cfg)
    manifest = os.path.join(args.out, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for i in range(ccfg.n_slides):
            record = synthcohort.generate_slide(ccfg, i)
            rel = synthcohort.write_slide_rasters(record, args.out)
            fh.write(synthcohort.manifest_line(record, rel) + "\n")
    print(f"wrote {ccfg.n_slides} slides to {manifest}")


def cmd_tile(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    sparams = pipeline.seg_params(cfg)
    records = synthcohort.read_manifest(args.manifest)
    index_path = os.path.join(args.out, f"index_{args.magnification}.jsonl")
    classes_path = os.path.join(args.out, f"classes_{args.magnification}.jsonl")
    n_acc = 0
    with open(index_path, "w") as fh_idx, open(classes_path, "w") as fh_cls:
        for record in records:
            specs, _ = preprocess_mod.tile_slide(record, args.magnification, sparams)
            for s in specs:
                fh_idx.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
            classes = pipeline.tile_majority_classes(record, specs)
            fh_cls.write(json.dumps({"slide_id": record.slide_id, "classes": classes},
                                    sort_keys=True) + "\n")
            n_acc += sum(1 for s in specs if s.accepted)
    print(f"indexed {len(records)} slides ({n_acc} accepted tiles) -> {index_path}")


def cmd_encode(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    sparams = pipeline.seg_params(cfg)
    espec = pipeline.encoder_spec(cfg)
    records = synthcohort.read_manifest(args.manifest)
    bags = []
    for record in records:
        specs, stack = preprocess_mod.tile_slide(record, args.magnification, sparams)
        try:
            bags.append(encoder_mod.encode_slide(specs, stack, espec))
        except SlidemilError as exc:
            print(f"slide {record.slide_id} excluded: {exc}", file=sys.stderr)
    out_path = os.path.join(args.out, f"{args.magnification}.bin")
    encoder_mod.write_embeddings(out_path, bags)
    print(f"encoded {len(bags)} slides -> {out_path}")


def cmd_train(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    bags = encoder_mod.read_embeddings(args.embeddings)
    tpm, smooth, binary, _ = _labels_for_bags(bags, args.manifest)
    arrays = [b.embeddings for b in bags]
    tcfg = pipeline.train_config(cfg)
    params, fit_info = harness.final_train(arrays, smooth, binary, cfg.seed, tcfg)
    milcore.save_checkpoint(os.path.join(args.out, "checkpoint.bin"), params,
                            meta={"seed": cfg.seed,
                                  "learning_rate": fit_info["learning_rate"],
                                  "weight_decay": fit_info["weight_decay"],
                                  "best_epoch": fit_info["log"]["best_epoch"],
                                  "embedding_version": encoder_mod.EMBED_VERSION})
    pipeline._json_dump({k: fit_info[k] for k in ("learning_rate", "weight_decay", "trials")},
                        os.path.join(args.out, "training.json"))
    print(f"trained model -> {os.path.join(args.out, 'checkpoint.bin')}")


def cmd_cv(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    bags = encoder_mod.read_embeddings(args.embeddings)
    tpm, smooth, binary, _ = _labels_for_bags(bags, args.manifest)
    arrays = [b.embeddings for b in bags]
    plan = harness.make_folds(binary, cfg.cv.n_folds, seed=cfg.seed)
    folds, summary = harness.run_cv(arrays, smooth, binary, tpm, plan,
                                    pipeline.train_config(cfg))
    pipeline._json_dump(folds, os.path.join(args.out, "folds.json"))
    pipeline._json_dump(summary, os.path.join(args.out, "summary.json"))
    print(f"cv mean AUC {summary['mean']:.4f} -> {args.out}")


def cmd_titrate(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    bags = encoder_mod.read_embeddings(args.embeddings)
    tpm, smooth, binary, _ = _labels_for_bags(bags, args.manifest)
    arrays = [b.embeddings for b in bags]
    plan = harness.make_folds(binary, cfg.cv.n_folds, seed=cfg.seed)
    tplan = harness.TitrationPlan(fractions=tuple(cfg.titration.fractions),
                                  repeats=cfg.titration.repeats, seed=cfg.seed)
    results, curve = harness.run_titration(arrays, smooth, binary, plan, tplan,
                                           pipeline.train_config(cfg))
    pipeline._json_dump({"results": results, "curve": curve},
                        os.path.join(args.out, "titration.json"))
    with open(os.path.join(args.out, "titration.csv"), "w") as fh:
        fh.write("fraction,repeat,n_positives,roc_auc\n")
        for r in results:
            fh.write(f"{r['fraction']},{r['repeat']},{r['n_positives']},{r['roc_auc']!r}\n")
    print(f"titration curve -> {args.out}")


def cmd_eval(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    params, _ = milcore.load_checkpoint(args.checkpoint)
    bags = encoder_mod.read_embeddings(args.embeddings)
    tpm, smooth, binary, _ = _labels_for_bags(bags, args.manifest)
    probs, _ = milcore.predict([b.embeddings for b in bags], params)
    if args.threshold is not None:
        threshold = args.threshold
    else:
        threshold = evalstat.select_operating_point(
            probs, binary, cfg.evaluation.target_sensitivity)
    report = evalstat.compute_report(probs, binary, threshold, tpm=tpm,
                                     n_resamples=cfg.evaluation.n_resamples,
                                     seed=cfg.seed)
    report.save(os.path.join(args.out, "metrics.json"))
    evalstat.write_curve_csv([(p[0], p[1]) for p in report.curves["roc"]],
                             os.path.join(args.out, "roc.csv"), ["fpr", "tpr"])
    evalstat.write_curve_csv([(p[0], p[1]) for p in report.curves["pr"]],
                             os.path.join(args.out, "pr.csv"), ["recall", "precision"])
    print(f"AUC {report.metrics['roc_auc']['point']:.4f} at threshold "
          f"{threshold:.4f} -> {args.out}")


def cmd_perturb(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    params, _ = milcore.load_checkpoint(args.checkpoint)
    records = synthcohort.read_manifest(args.manifest)
    if cfg.perturb.max_slides and cfg.perturb.max_slides < len(records):
        rng = rng_for(cfg.seed, "perturb-subsample")
        keep = np.sort(rng.choice(len(records), size=cfg.perturb.max_slides, replace=False))
        records = [records[i] for i in keep]
    binary = labels.binary_label(np.array([r.tpm for r in records]))
    sparams = pipeline.seg_params(cfg)
    espec = pipeline.encoder_spec(cfg)
    spec = robustness.PerturbationSpec(
        n_levels=cfg.perturb.n_levels, repeats=cfg.perturb.repeats,
        brightness_step=cfg.perturb.brightness_step,
        contrast_step=cfg.perturb.contrast_step,
        saturation_step=cfg.perturb.saturation_step,
        hue_step_deg=cfg.perturb.hue_step_deg, seed=cfg.seed)

    def score_fn(images):
        return pipeline.score_images(images, [r.marker_mask for r in records],
                                     [r.slide_id for r in records], sparams, espec, params)

    clean_probs = score_fn([r.image for r in records])
    if args.threshold is not None:
        threshold = args.threshold
    else:
        threshold = evalstat.select_operating_point(
            clean_probs, binary, cfg.evaluation.target_sensitivity)
    rows, _ = robustness.run_perturbation_sweep(records, binary, spec, score_fn, threshold)
    robustness.write_sweep_csv(rows, os.path.join(args.out, "sweep.csv"))
    print(f"{len(rows)} sweep rows -> {os.path.join(args.out, 'sweep.csv')}")


def cmd_interpret(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    params, _ = milcore.load_checkpoint(args.checkpoint)
    bags = encoder_mod.read_embeddings(args.embeddings)
    classes_by_slide = {}
    with open(args.classes) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                classes_by_slide[row["slide_id"]] = row["classes"]
    _, attention = milcore.predict([b.embeddings for b in bags], params)
    slide_classes = [classes_by_slide[b.slide_id] for b in bags]
    enr = interpret.enrichment_analysis(attention, slide_classes,
                                        synthcohort.CLASS_NAMES,
                                        mass_fraction=cfg.interpret.mass_fraction)
    pipeline._json_dump(enr.to_dict(), os.path.join(args.out, "enrichment.json"))
    interpret.write_enrichment_table(enr, os.path.join(args.out, "enrichment.tsv"))
    pooled = np.concatenate([b.embeddings for b in bags], axis=0)
    coords, ratios = interpret.project_embeddings(pooled, seed=cfg.seed)
    weights = np.concatenate(attention)
    buckets = interpret.attention_buckets(weights, cfg.interpret.n_buckets)
    refs = [r for b in bags for r in b.tile_refs]
    flat_classes = [c for cl in slide_classes for c in cl]
    with open(os.path.join(args.out, "projection.csv"), "w") as fh:
        fh.write("slide_id,row,col,x,y,tile_class,attention_bucket\n")
        for i, ref in enumerate(refs):
            fh.write(f"{ref.slide_id},{ref.row},{ref.col},{float(coords[i,0])!r},"
                     f"{float(coords[i,1])!r},{flat_classes[i]},{int(buckets[i])}\n")
    pipeline._json_dump({"explained_variance_ratios": ratios.tolist()},
                        os.path.join(args.out, "projection_meta.json"))
    print(f"interpretability reports -> {args.out}")


def cmd_replicate(args):
    cfg = _load_cfg(args)
    _prepare_out(args.out, args.force)
    if args.workers is not None:
        cfg.workers = args.workers
    if args.permute_labels:
        cfg.replicate.permute_labels = True
    summary = pipeline.replicate(cfg, args.out)
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))


def cmd_show_config(args):
    cfg = _load_cfg(args)
    sys.stdout.write(serialize(cfg))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidemil",
        description="Attention-MIL pipeline on synthetic tiled slides")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.set_defaults(fn=fn)
        return p

    add("generate", cmd_generate)
    p = add("tile", cmd_tile)
    p.add_argument("--manifest", required=True)
    p.add_argument("--magnification", default="x20", choices=sorted(preprocess_mod.MAGNIFICATION_FACTORS))
    p = add("encode", cmd_encode)
    p.add_argument("--manifest", required=True)
    p.add_argument("--magnification", default="x20", choices=sorted(preprocess_mod.MAGNIFICATION_FACTORS))
    p = add("train", cmd_train)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p = add("cv", cmd_cv)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p = add("titrate", cmd_titrate)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p = add("eval", cmd_eval)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="frozen operating threshold (default: derive at target sensitivity)")
    p = add("perturb", cmd_perturb)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p = add("interpret", cmd_interpret)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes", required=True,
                   help="per-slide tile class file (classes_<mag>.jsonl)")
    p = add("replicate", cmd_replicate)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--permute-labels", action="store_true",
                   help="null experiment: permute training labels")

    p = sub.add_parser("show-config")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_show_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; our contract reserves 2 for I/O
        return 0 if exc.code in (0, None) else 1
    try:
        args.fn(args)
    except SlidemilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
