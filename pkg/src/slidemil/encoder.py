"""Deterministic reference tile encoder (512-dim) plus the embeddings file format.

Feature layout per 224x224 RGB tile (values in [0, 1]):

    [0:3]    RGB channel means          [3:6]    RGB channel stds
    [6:9]    HSV channel means          [9:12]   HSV channel stds
    [12:24]  4-bin histograms per RGB channel (fractions)
    [24:32]  8-bin gradient-magnitude histogram (fractions)
    [32:512] seeded Gaussian random projection of the 16x16x3 area-downsampled
             tile (768 -> 480)

followed by per-feature affine normalization ((f - mu) / sigma, clipped to
[-10, 10]) with constants frozen in data/encoder_norms.json. Hue is treated as
a linear value in [0, 1) (the synthetic palettes stay away from the wrap).

The batch path (encode_tiles) is the single implementation; encode_tile wraps
it with T=1 and the projection is applied row-by-row, so results never depend
on how tiles are grouped into calls.
"""

from __future__ import annotations

import importlib.resources
import json
import struct
from dataclasses import dataclass

import cv2
import numpy as np

from . import imageops
from .errors import DomainError, EmptyBagError
from .preprocess import TileSpec
from .runutil import rng_for

EMBED_DIM = 512
HANDCRAFTED_DIM = 32
PROJECTION_DIM = EMBED_DIM - HANDCRAFTED_DIM
DOWNSAMPLE_PX = 16
TILE_PX = 224
EMBED_MAGIC = b"MILE"
EMBED_VERSION = 1
NORM_BOUND = 10.0

HUE_MEAN_INDEX = 6

_GRAD_EDGES = np.array([0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32])
_GRAD_EDGES_SQ = _GRAD_EDGES ** 2

_projection_cache: dict = {}
_norms_cache: dict = {}


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "reference"            # "reference" | "external"
    seed: int = 1234
    external_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("reference", "external"):
            raise DomainError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "external" and not self.external_path:
            raise DomainError("external encoder requires external_path")


@dataclass
class TileEmbedding:
    vector: np.ndarray
    tile_ref: TileSpec


@dataclass
class TileBag:
    slide_id: str
    embeddings: np.ndarray     # (T, 512) float32
    tile_refs: list            # list[TileSpec] in tile-index order


def projection_matrix(seed: int) -> np.ndarray:
    if seed not in _projection_cache:
        rng = rng_for(seed, "encoder-projection")
        w = rng.standard_normal((PROJECTION_DIM, DOWNSAMPLE_PX * DOWNSAMPLE_PX * 3))
        _projection_cache[seed] = w / np.sqrt(w.shape[1])
    return _projection_cache[seed]


def load_normalization() -> dict:
    if "norms" not in _norms_cache:
        text = importlib.resources.files("slidemil").joinpath(
            "data/encoder_norms.json").read_text()
        d = json.loads(text)
        _norms_cache["norms"] = {
            "mu": np.asarray(d["mu"], dtype=np.float64),
            "sigma": np.maximum(np.asarray(d["sigma"], dtype=np.float64), 1e-9),
            "meta": {k: d[k] for k in d if k not in ("mu", "sigma")},
        }
    return _norms_cache["norms"]


def _check_stack(stack: np.ndarray) -> np.ndarray:
    stack = np.asarray(stack)
    if stack.ndim != 4 or stack.shape[1:] != (TILE_PX, TILE_PX, 3):
        raise DomainError(
            f"tile stack must be (T, {TILE_PX}, {TILE_PX}, 3), got {stack.shape}")
    if stack.dtype == np.uint8:
        return stack.astype(np.float32) / np.float32(255.0)
    stack = stack.astype(np.float32, copy=False)
    if stack.size and (stack.min() < 0.0 or stack.max() > 1.0):
        raise DomainError("float tiles must lie in [0, 1]")
    return stack


def _block_mean_std(planes, t: int):
    """Per-tile mean/std from per-channel (t*224, 224) planes via cv2 area means.

    Each output pixel of an integer-factor INTER_AREA resize is the exact box
    mean of its own source block, so per-tile values are independent of how
    many tiles share the call.
    """
    means = np.empty((t, len(planes)))
    stds = np.empty((t, len(planes)))
    for ch, plane in enumerate(planes):
        m = cv2.resize(plane, (1, t), interpolation=cv2.INTER_AREA)[:, 0].astype(np.float64)
        m2 = cv2.resize(plane * plane, (1, t),
                        interpolation=cv2.INTER_AREA)[:, 0].astype(np.float64)
        means[:, ch] = m
        stds[:, ch] = np.sqrt(np.maximum(m2 - m * m, 0.0))
    return means, stds


def raw_features(stack: np.ndarray, seed: int) -> np.ndarray:
    """Unnormalized (T, 512) float64 features for a stack of tiles."""
    xf = _check_stack(stack)
    t = xf.shape[0]
    if t == 0:
        return np.empty((0, EMBED_DIM), dtype=np.float64)
    n_px = TILE_PX * TILE_PX

    sheet = xf.reshape(t * TILE_PX, TILE_PX, 3)
    rgb_mean, rgb_std = _block_mean_std(cv2.split(sheet), t)
    hsv_sheet = imageops.rgb_to_hsv(sheet)
    hsv_mean, hsv_std = _block_mean_std(cv2.split(hsv_sheet), t)

    ch_offsets = np.arange(3, dtype=np.int32) * 4
    rgb_hist = np.empty((t, 12))
    flat = xf.reshape(t, n_px, 3)
    for i in range(t):
        q = np.minimum((flat[i] * 4.0).astype(np.int32), 3)
        q += ch_offsets
        rgb_hist[i] = np.bincount(q.ravel(), minlength=12)
    rgb_hist /= float(n_px)

    gray = imageops.grayscale(xf.reshape(t * TILE_PX, TILE_PX, 3)).reshape(
        t, TILE_PX, TILE_PX)
    gx = gray[:, :TILE_PX - 1, 1:] - gray[:, :TILE_PX - 1, :-1]
    gy = gray[:, 1:, :TILE_PX - 1] - gray[:, :-1, :TILE_PX - 1]
    mag_sq = gx * gx
    mag_sq += gy * gy
    edges = _GRAD_EDGES_SQ.astype(np.float32)
    grad_hist = np.empty((t, 8))
    n_grad = mag_sq.shape[1] * mag_sq.shape[2]
    for i in range(t):
        bins = np.searchsorted(edges, mag_sq[i].ravel(), side="right")
        grad_hist[i] = np.bincount(bins, minlength=8)
    grad_hist /= float(n_grad)

    down = cv2.resize(xf.reshape(t * TILE_PX, TILE_PX, 3),
                      (DOWNSAMPLE_PX, t * DOWNSAMPLE_PX),
                      interpolation=cv2.INTER_AREA).reshape(t, -1).astype(np.float64)
    w = projection_matrix(seed)
    proj = np.empty((t, PROJECTION_DIM))
    for i in range(t):
        proj[i] = w @ down[i]

    return np.concatenate([rgb_mean, rgb_std, hsv_mean, hsv_std,
                           rgb_hist, grad_hist, proj], axis=1)


def encode_tiles(stack: np.ndarray, spec: EncoderSpec = EncoderSpec()) -> np.ndarray:
    """Normalized float32 embeddings, row k for tile k of the stack."""
    feats = raw_features(stack, spec.seed)
    norms = load_normalization()
    z = (feats - norms["mu"]) / norms["sigma"]
    return np.clip(z, -NORM_BOUND, NORM_BOUND).astype(np.float32)


def encode_tile(tile: np.ndarray, spec: EncoderSpec = EncoderSpec(),
                tile_ref: TileSpec | None = None) -> TileEmbedding:
    tile = np.asarray(tile)
    if tile.shape != (TILE_PX, TILE_PX, 3):
        raise DomainError(f"tile must be {TILE_PX}x{TILE_PX}x3, got {tile.shape}")
    vec = encode_tiles(tile[None], spec)[0]
    return TileEmbedding(vector=vec, tile_ref=tile_ref)


def encode_slide(tile_specs, stack: np.ndarray,
                 spec: EncoderSpec = EncoderSpec()) -> TileBag:
    """Encode a slide's accepted tiles into a TileBag (tile-index order)."""
    accepted = [s for s in tile_specs if s.accepted]
    if len(accepted) == 0:
        slide = tile_specs[0].slide_id if tile_specs else "?"
        raise EmptyBagError(f"slide {slide} has no accepted tiles")
    if len(accepted) != stack.shape[0]:
        raise DomainError(
            f"stack has {stack.shape[0]} tiles but {len(accepted)} accepted specs")
    emb = encode_tiles(stack, spec)
    return TileBag(slide_id=accepted[0].slide_id, embeddings=emb, tile_refs=accepted)


def write_embeddings(path, bags):
    """Binary embeddings file: MILE header, float32 LE rows, then a tile
    reference table (JSON lines) mirroring the tile index."""
    bags = list(bags)
    count = sum(b.embeddings.shape[0] for b in bags)
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<HQI", EMBED_VERSION, count, EMBED_DIM))
        for bag in bags:
            fh.write(np.ascontiguousarray(bag.embeddings, dtype="<f4").tobytes())
        for bag in bags:
            for ref in bag.tile_refs:
                fh.write((json.dumps(ref.to_dict(), sort_keys=True) + "\n").encode())


def read_embeddings(path):
    """Load an embeddings file back into TileBags (grouped by slide_id)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBED_MAGIC:
            raise DomainError(f"not an embeddings file: {path}")
        version, count, dim = struct.unpack("<HQI", fh.read(14))
        if version != EMBED_VERSION:
            raise DomainError(f"embeddings version {version} != supported {EMBED_VERSION}")
        if dim != EMBED_DIM:
            raise DomainError(f"embeddings dim {dim} != expected {EMBED_DIM}")
        matrix = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
        refs = [TileSpec.from_dict(json.loads(line))
                for line in fh.read().decode().splitlines() if line.strip()]
    if len(refs) != count:
        raise DomainError(f"reference table has {len(refs)} rows for {count} embeddings")
    bags = []
    start = 0
    for i in range(1, count + 1):
        if i == count or refs[i].slide_id != refs[start].slide_id:
            bags.append(TileBag(slide_id=refs[start].slide_id,
                                embeddings=np.array(matrix[start:i]),
                                tile_refs=refs[start:i]))
            start = i
    return bags
