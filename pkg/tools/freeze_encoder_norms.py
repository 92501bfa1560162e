"""Regenerate the frozen encoder normalization constants.

Samples accepted x20 tiles from a fixed synthetic cohort (seed 7777), computes
raw encoder features, and writes per-feature mean/std into the package data
file. Run once when the feature recipe or the generator palette changes:

    python tools/freeze_encoder_norms.py
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from slidemil import encoder, preprocess, synthcohort  # noqa: E402

TARGET_TILES = 10_000
SEED = 7777
OUT = os.path.join(os.path.dirname(__file__), "..", "src", "slidemil", "data",
                   "encoder_norms.json")


def main():
    cfg = synthcohort.CohortConfig(
        n_slides=400, grid_rows=8, grid_cols=8, seed=SEED,
        signal_strength=1.0, marker_fraction=0.1)
    feats = []
    n = 0
    for i in range(cfg.n_slides):
        record = synthcohort.generate_slide(cfg, i)
        specs, stack = preprocess.tile_slide(record, "x20")
        if stack.shape[0] == 0:
            continue
        feats.append(encoder.raw_features(stack, seed=encoder.EncoderSpec().seed))
        n += stack.shape[0]
        if n >= TARGET_TILES:
            break
    all_feats = np.concatenate(feats, axis=0)[:TARGET_TILES]
    mu = all_feats.mean(axis=0)
    sigma = np.maximum(all_feats.std(axis=0), 1e-6)
    payload = {
        "version": encoder.EMBED_VERSION,
        "seed": SEED,
        "encoder_seed": encoder.EncoderSpec().seed,
        "n_tiles": int(all_feats.shape[0]),
        "mu": mu.tolist(),
        "sigma": sigma.tolist(),
    }
    with open(OUT, "w") as fh:
        json.dump(payload, fh)
    print(f"froze normalization over {all_feats.shape[0]} tiles -> {OUT}")


if __name__ == "__main__":
    main()
