"""Surface-relative coordinates of query points.

A point ``x`` at frame ``t`` is described by its ``k`` nearest vertices on
that frame's surface: each neighbor contributes the canonical (frame 0)
position of the same vertex index and the signed distance from the vertex to
``x`` measured in the current frame. Points that move with the surface keep
the same description, so they hash to the same features in every frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from selfnerf.errors import ConfigError
from selfnerf.grid_encoding import HashGridConfig, HashGridTables, encode_blended

UNIT_TOL = 1e-6
WEIGHT_FLOOR = 1e-8
BOX_MARGIN = 0.10


@dataclass
class SurfaceFrame:
    points: np.ndarray  # (M, 3)
    normals: np.ndarray  # (M, 3), unit length
    index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"surface points must be (M, 3), got {self.points.shape}")
        if self.normals.shape != self.points.shape:
            raise ValueError("normals must match points in shape")
        lengths = np.linalg.norm(self.normals, axis=1)
        if len(lengths) and np.max(np.abs(lengths - 1.0)) > UNIT_TOL:
            raise ValueError(f"frame {self.index}: normals are not unit length")

    def __len__(self):
        return len(self.points)

    def bounds(self, margin: float = BOX_MARGIN):
        return inflated_box(self.points, margin)


@dataclass
class CanonicalSurface:
    points: np.ndarray  # (M, 3), frame-0 template

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    def __len__(self):
        return len(self.points)


@dataclass
class RelativeSample:
    """The ``k`` canonical anchors of one query, nearest first."""

    indices: np.ndarray  # (k,) vertex indices
    canonical_points: np.ndarray  # (k, 3)
    distances: np.ndarray  # (k,) signed, scene units
    weights: np.ndarray  # (k,) raw blend weights in [0, 1]
    z: np.ndarray | None = None  # (k, 4) normalized coordinates


def inflated_box(points, margin: float = BOX_MARGIN):
    """Axis-aligned box of ``points`` grown by ``margin`` of its extent about the center."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * (1.0 + margin)
    return center - half, center + half


def _workers() -> int:
    value = os.environ.get("SELFNERF_THREADS")
    return max(1, int(value)) if value else -1


class KnnIndex:
    """Exact k-nearest-neighbor queries over one frame's vertices.

    Results are ordered by (distance, vertex index); distances are recomputed
    from the coordinates so they do not depend on the tree's arithmetic.
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) == 0:
            raise ValueError("cannot index an empty point cloud")
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, x, k: int):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = x.reshape(-1, 3)
        m = len(self.points)
        if k < 1 or k > m:
            raise ValueError(f"k={k} must be in [1, {m}]")
        extra = min(m, k + 2)
        _, cand = self.tree.query(x, k=extra, workers=_workers())
        cand = np.asarray(cand).reshape(len(x), extra)
        dist = _distances(x, self.points[cand])
        order = np.lexsort((cand, dist), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        if extra > k:
            # the tree may pick either side of a (near-)tie at the k-th slot;
            # settle those rows by a full scan
            kth, nxt = dist[:, k - 1], dist[:, k]
            ambiguous = np.flatnonzero(nxt - kth <= 1e-12 * np.maximum(1.0, kth))
            if len(ambiguous):
                bd, bi = brute_force_knn(x[ambiguous], self.points, k)
                cand[ambiguous, :k], dist[ambiguous, :k] = bi, bd
        cand, dist = cand[:, :k], dist[:, :k]
        if single:
            return dist[0], cand[0]
        return dist, cand


def _distances(x, p):
    return np.sqrt(np.sum((x[:, None, :] - p) ** 2, axis=-1))


def brute_force_knn(x, points, k: int):
    """O(M Q) scan with the same (distance, index) ordering as :class:`KnnIndex`."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64)
    dist = _distances(x, points[None, :, :])
    idx = np.broadcast_to(np.arange(len(points)), dist.shape)
    order = np.lexsort((idx, dist), axis=-1)[:, :k]
    return np.take_along_axis(dist, order, axis=1), order


def build_knn_index(frame: SurfaceFrame) -> KnnIndex:
    return KnnIndex(frame.points)


def signed_distance(x, p, n):
    """Distance from vertex ``p`` to ``x``, positive on the side ``n`` points to."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    dist = np.linalg.norm(diff, axis=-1)
    side = np.sum(diff * n, axis=-1)
    return np.where(side >= 0.0, dist, -dist)


def blend_weight(x, p, n):
    """``|cos|`` of the angle between ``x - p`` and ``n``; 1 where ``x == p``."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    dist = np.linalg.norm(diff, axis=-1)
    dot = np.abs(np.sum(diff * n, axis=-1))
    safe = np.where(dist > 0.0, dist, 1.0)
    return np.where(dist > 0.0, np.minimum(dot / safe, 1.0), 1.0)


def normalized_weights(w):
    """Divide by the sum; rows with every weight below the floor become uniform."""
    w = np.asarray(w, dtype=np.float64)
    degenerate = np.all(w < WEIGHT_FLOOR, axis=-1, keepdims=True)
    w = np.where(degenerate, 1.0, w)
    return w / w.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class NormalizationBox:
    """Affine map of (canonical point, signed distance) into ``[0, 1]^4``."""

    lo: np.ndarray
    hi: np.ndarray
    d_max: float

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if np.any(hi - lo <= 0.0):
            raise ConfigError("normalization box has zero extent on an axis")
        if not self.d_max > 0.0:
            raise ConfigError("d_max must be positive")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_canonical(cls, canonical: CanonicalSurface, d_max: float, margin: float = BOX_MARGIN):
        lo, hi = inflated_box(canonical.points, margin)
        return cls(lo, hi, d_max)


def normalize_rep(canonical_points, distances, box: NormalizationBox):
    """Map ``(p, d)`` pairs to ``[0, 1]^4``; values outside the ranges clamp."""
    p = (np.asarray(canonical_points, dtype=np.float64) - box.lo) / (box.hi - box.lo)
    d = (np.asarray(distances, dtype=np.float64) / box.d_max + 1.0) * 0.5
    return np.clip(np.concatenate([p, d[..., None]], axis=-1), 0.0, 1.0)


def relative_batch(x, frame: SurfaceFrame, canonical: CanonicalSurface, k: int, index: KnnIndex | None = None):
    """Vectorized :func:`relative_set` for ``x`` of shape ``(n, 3)``.

    Returns ``(indices, canonical_points, distances, weights)`` with shapes
    ``(n, k)``, ``(n, k, 3)``, ``(n, k)``, ``(n, k)``.
    """
    if len(frame) != len(canonical):
        raise ValueError("frame and canonical surface differ in vertex count")
    if index is None:
        index = build_knn_index(frame)
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    _, idx = index.query(x, k)
    p, n = frame.points[idx], frame.normals[idx]
    xb = x[:, None, :]
    return idx, canonical.points[idx], signed_distance(xb, p, n), blend_weight(xb, p, n)


def relative_set(x, frame: SurfaceFrame, canonical: CanonicalSurface, k: int = 4,
                 index: KnnIndex | None = None, box: NormalizationBox | None = None) -> RelativeSample:
    idx, pbar, d, w = relative_batch(np.asarray(x).reshape(1, 3), frame, canonical, k, index)
    z = normalize_rep(pbar[0], d[0], box) if box is not None else None
    return RelativeSample(idx[0], pbar[0], d[0], w[0], z)


def rel_feature(x, frame: SurfaceFrame, canonical: CanonicalSurface, tables: HashGridTables,
                config: HashGridConfig, box: NormalizationBox, k: int = 4, index: KnnIndex | None = None):
    """Blend of the hash encodings of the ``k`` normalized anchors of ``x``.

    Accepts one point ``(3,)`` or a batch ``(n, 3)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    _, pbar, d, w = relative_batch(x.reshape(-1, 3), frame, canonical, k, index)
    z = normalize_rep(pbar, d, box)
    out = encode_blended(z, normalized_weights(w), config, tables)
    return out[0] if single else out
