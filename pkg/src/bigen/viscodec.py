"""Two-level image representation: dense grid features and a discrete codec.

An image is split into an 8x8 grid of 8x8-pixel patches. The dense form is the
normalized flattened patch (zero-mean / unit-range: pixel - 0.5). The discrete
form assigns each patch the index of its nearest centroid in a K-means visual
vocabulary; the inverse pastes de-normalized centroids back into a visible
raster, which makes image generation exactly invertible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

GRID = 8
PATCH = 8
M = GRID * GRID                 # grid cells per image
D = PATCH * PATCH * 3           # flattened patch dimension
FEATURE_MEAN = 0.5              # normalization: f = (pixel - mean) / scale
FEATURE_SCALE = 1.0

DEFAULT_K = 512
KMEANS_MAX_ITER = 100

_VOCAB_MAGIC = b"BVV1"


class CodecError(ValueError):
    pass


def grid_positions() -> np.ndarray:
    """Canonical M x 4 (x0, y0, x1, y1) boxes tiling the unit square, row-major."""
    boxes = np.empty((M, 4), dtype=np.float64)
    for i in range(M):
        r, c = divmod(i, GRID)
        boxes[i] = (c / GRID, r / GRID, (c + 1) / GRID, (r + 1) / GRID)
    return boxes


_POSITIONS = grid_positions()


@dataclass
class GridFeatures:
    features: np.ndarray   # M x D
    positions: np.ndarray  # M x 4

    def __post_init__(self):
        if self.features.shape != (M, D):
            raise CodecError(f"features must be {M}x{D}, got {self.features.shape}")
        if self.positions.shape != (M, 4):
            raise CodecError(f"positions must be {M}x4, got {self.positions.shape}")


@dataclass
class VisualVocabulary:
    centroids: np.ndarray            # K x D
    mean: float = FEATURE_MEAN
    scale: float = FEATURE_SCALE
    objective_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[1] != D:
            raise CodecError(f"centroids must be Kx{D}, got {self.centroids.shape}")
        if self.centroids.shape[0] < 2:
            raise CodecError("vocabulary needs K >= 2")
        if not np.isfinite(self.centroids).all():
            raise CodecError("non-finite centroid entries")
        if len(np.unique(self.centroids, axis=0)) != self.centroids.shape[0]:
            raise CodecError("duplicate centroids")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


def extract_grid_features(image: np.ndarray) -> GridFeatures:
    """Dense features: normalized flattened patches in row-major grid order."""
    if image.shape != (GRID * PATCH, GRID * PATCH, 3):
        raise CodecError(f"expected {GRID * PATCH}x{GRID * PATCH}x3 image, got {image.shape}")
    patches = (image.reshape(GRID, PATCH, GRID, PATCH, 3)
                    .transpose(0, 2, 1, 3, 4)
                    .reshape(M, D))
    feats = (patches - FEATURE_MEAN) / FEATURE_SCALE
    return GridFeatures(features=feats.astype(np.float64), positions=_POSITIONS.copy())


def _chunked_sq_dists(points: np.ndarray, centroids: np.ndarray,
                      chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """(assignments, squared distance to assigned centroid) via the GEMM identity."""
    c_norms = (centroids ** 2).sum(axis=1)
    assign = np.empty(len(points), dtype=np.int64)
    dists = np.empty(len(points), dtype=np.float64)
    for lo in range(0, len(points), chunk):
        part = points[lo:lo + chunk]
        d2 = (part ** 2).sum(axis=1)[:, None] - 2.0 * part @ centroids.T + c_norms[None, :]
        idx = d2.argmin(axis=1)
        assign[lo:lo + chunk] = idx
        dists[lo:lo + chunk] = np.maximum(d2[np.arange(len(part)), idx], 0.0)
    return assign, dists


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(len(points))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = points[rng.integers(len(points))]
        else:
            centroids[j] = points[rng.choice(len(points), p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def build_vocabulary(features, k: int = DEFAULT_K, seed: int = 0,
                     max_iter: int = KMEANS_MAX_ITER) -> VisualVocabulary:
    """Lloyd's K-means with k-means++ init over all patches of `features`.

    `features` is a GridFeatures, a list of them, or a raw (N, D) array.
    Converges when the assignment vector stops changing; empty clusters are
    reseeded to the point currently farthest from its assigned centroid.
    """
    if isinstance(features, GridFeatures):
        points = features.features
    elif isinstance(features, np.ndarray):
        points = features
    else:
        points = np.concatenate([f.features for f in features], axis=0)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != D:
        raise CodecError(f"expected (N, {D}) patch matrix, got {points.shape}")
    if len(points) < k:
        raise CodecError(f"need at least K={k} patches, got {len(points)}")
    if len(np.unique(points, axis=0)) < k:
        raise CodecError(f"fewer than K={k} distinct patches")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    history = []
    prev_assign = None
    for _ in range(max_iter):
        assign, d2 = _chunked_sq_dists(points, centroids)
        # repair empty clusters from the points that fit worst
        empties = np.setdiff1d(np.arange(k), assign)
        if len(empties) > 0:
            order = np.argsort(-d2)
            for j, p_idx in zip(empties, order):
                centroids[j] = points[p_idx]
            assign, d2 = _chunked_sq_dists(points, centroids)
        history.append(float(d2.sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for j in range(k):
            sel = assign == j
            if sel.any():
                centroids[j] = points[sel].mean(axis=0)
    vocab = VisualVocabulary(centroids=centroids)
    vocab.objective_history = history
    return vocab


def quantize(features: GridFeatures, vocab: VisualVocabulary) -> np.ndarray:
    """Nearest-centroid token per grid cell; ties break to the lowest index."""
    return quantize_rows(features.features, vocab)


def quantize_rows(rows: np.ndarray, vocab: VisualVocabulary) -> np.ndarray:
    """Exact nearest-neighbor assignment for an (N, D) feature matrix."""
    if rows.shape[-1] != vocab.centroids.shape[1]:
        raise CodecError("feature dimension does not match vocabulary")
    tokens = np.empty(len(rows), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, vocab.size * rows.shape[-1]) + 1)
    for lo in range(0, len(rows), chunk):
        diff = rows[lo:lo + chunk, None, :] - vocab.centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        tokens[lo:lo + chunk] = d2.argmin(axis=1)
    return tokens


def discrete_features(tokens: np.ndarray, vocab: VisualVocabulary) -> GridFeatures:
    """Coarse features: the assigned centroid per cell, canonical positions."""
    tokens = np.asarray(tokens)
    if tokens.shape != (M,):
        raise CodecError(f"token grid must have length {M}, got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= vocab.size:
        raise CodecError(f"token id out of range [0, {vocab.size})")
    return GridFeatures(features=vocab.centroids[tokens].copy(),
                        positions=_POSITIONS.copy())


def render_tokens(tokens: np.ndarray, vocab: VisualVocabulary) -> np.ndarray:
    """Paste de-normalized centroid patches row-major; clamp to [0, 1]."""
    feats = discrete_features(tokens, vocab).features
    pixels = np.clip(feats * vocab.scale + vocab.mean, 0.0, 1.0)
    image = (pixels.reshape(GRID, GRID, PATCH, PATCH, 3)
                   .transpose(0, 2, 1, 3, 4)
                   .reshape(GRID * PATCH, GRID * PATCH, 3))
    return image


def save_vocabulary(vocab: VisualVocabulary, path: Path) -> None:
    """magic | uint32 K | uint32 D | float64 mean | float64 scale | float32-LE centroids."""
    path = Path(path)
    k, d = vocab.centroids.shape
    header = _VOCAB_MAGIC + struct.pack("<IIdd", k, d, vocab.mean, vocab.scale)
    body = vocab.centroids.astype("<f4").tobytes(order="C")
    path.write_bytes(header + body)


def load_vocabulary(path: Path) -> VisualVocabulary:
    raw = Path(path).read_bytes()
    if raw[:4] != _VOCAB_MAGIC:
        raise CodecError(f"{path}: not a visual vocabulary file")
    k, d, mean, scale = struct.unpack("<IIdd", raw[4:28])
    expected = 28 + k * d * 4
    if len(raw) != expected:
        raise CodecError(f"{path}: truncated vocabulary file")
    centroids = np.frombuffer(raw[28:], dtype="<f4").reshape(k, d).astype(np.float64)
    return VisualVocabulary(centroids=centroids, mean=mean, scale=scale)
