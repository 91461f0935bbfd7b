"""Multi-resolution hash encoding over normalized 4D coordinates.

A query ``z`` in ``[0, 1]^4`` is scaled by each level's resolution, the 16
corners of its enclosing cell are hashed into that level's feature table and
quadrilinearly interpolated. Levels are concatenated level-major, so the
output has ``levels * features`` entries.

Also holds the two non-hash encoders used by the ablation harness: the
per-vertex signed-distance bank and a fixed frequency encoding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import reduce

import numba
import numpy as np

from selfnerf.errors import ConfigError

log = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861, 3674653429)
INIT_SCALE = 1e-4
SNAP_ULPS = 4.0

_clamp_warned = False


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features: int = 2
    table_size: int = 2**15
    min_res: int = 16
    max_res: int = 512
    primes: tuple[int, int, int, int] = HASH_PRIMES
    clamp: bool = True  # False rejects out-of-range queries instead

    def __post_init__(self):
        for name in ("levels", "features", "table_size", "min_res", "max_res"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"hash grid {name} must be positive")
        if self.max_res < self.min_res:
            raise ConfigError("max_res must be >= min_res")
        if self.levels == 1 and self.max_res != self.min_res:
            raise ConfigError("a single-level grid needs max_res == min_res")
        if self.levels > 1 and self.max_res == self.min_res:
            raise ConfigError("multi-level grid needs max_res > min_res")
        if len(self.primes) != 4:
            raise ConfigError("hash needs exactly 4 constants")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features


@dataclass
class HashGridTables:
    """Learnable tables, shape ``(levels, table_size, features)``."""

    data: np.ndarray

    @classmethod
    def init(cls, config: HashGridConfig, seed: int = 0, scale: float = INIT_SCALE):
        rng = np.random.default_rng(seed)
        shape = (config.levels, config.table_size, config.features)
        return cls(rng.uniform(-scale, scale, size=shape))

    @classmethod
    def constant(cls, config: HashGridConfig, value: float):
        return cls(np.full((config.levels, config.table_size, config.features), float(value)))


def level_resolutions(config: HashGridConfig) -> list[int]:
    """Geometrically spaced per-level grid resolutions, coarse to fine."""
    if config.levels == 1:
        return [int(config.min_res)]
    growth = (math.log(config.max_res) - math.log(config.min_res)) / (config.levels - 1)
    res = [int(math.floor(config.min_res * math.exp(l * growth) + 1e-9)) for l in range(config.levels)]
    res[0] = int(config.min_res)
    res[-1] = int(config.max_res)
    return res


def spatial_hash(z_int, config: HashGridConfig) -> int:
    """XOR of coordinate-prime products, modulo the table size."""
    if len(z_int) != 4:
        raise ValueError("spatial_hash takes 4 integer coordinates")
    return reduce(lambda a, b: a ^ b, (int(z) * int(p) for z, p in zip(z_int, config.primes))) % config.table_size


# --------------------------------------------------------------------------
# numba kernels. Queries come as (n, k, 4) with per-neighbor blend weights
# (n, k); plain encoding is k = 1 with unit weight.


@numba.njit(cache=True)
def _corner_terms(z, scale, primes, wt, ht):
    for d in range(4):
        pos = z[d] * scale
        # v / N rarely round-trips exactly; land such points on the vertex itself
        near = math.floor(pos + 0.5)
        if abs(pos - near) <= SNAP_ULPS * 2.220446049250313e-16 * max(1.0, pos):
            pos = near
        base = math.floor(pos)
        if base >= scale:
            base = scale - 1
        frac = pos - base
        wt[d, 0] = 1.0 - frac
        wt[d, 1] = frac
        b = np.uint64(base)
        ht[d, 0] = b * primes[d]
        ht[d, 1] = (b + np.uint64(1)) * primes[d]


@numba.njit(cache=True)
def _row(h, table_size, mask):
    if mask != 0:
        return np.int64(h & mask)
    return np.int64(h % table_size)


@numba.njit(cache=True)
def _encode_range(z, weights, res, tables, primes, out, lo, hi):
    k = weights.shape[1]
    n_levels, table_size, n_feat = tables.shape
    tsz = np.uint64(table_size)
    mask = np.uint64(table_size - 1) if (table_size & (table_size - 1)) == 0 else np.uint64(0)
    wt = np.empty((4, 2))
    ht = np.empty((4, 2), dtype=np.uint64)
    for i in range(lo, hi):
        for q in range(out.shape[1]):
            out[i, q] = 0.0
        for j in range(k):
            w = weights[i, j]
            if w == 0.0:
                continue
            for l in range(n_levels):
                _corner_terms(z[i, j], res[l], primes, wt, ht)
                o = l * n_feat
                for a in range(2):
                    wa = w * wt[0, a]
                    ha = ht[0, a]
                    for b in range(2):
                        wb = wa * wt[1, b]
                        hb = ha ^ ht[1, b]
                        for c in range(2):
                            wc = wb * wt[2, c]
                            hc = hb ^ ht[2, c]
                            for e in range(2):
                                we = wc * wt[3, e]
                                if we == 0.0:
                                    continue
                                row = _row(hc ^ ht[3, e], tsz, mask)
                                for f in range(n_feat):
                                    out[i, o + f] += we * tables[l, row, f]


@numba.njit(cache=True, parallel=True)
def _encode_parallel(z, weights, res, tables, primes, out, chunk):
    n = z.shape[0]
    n_chunks = (n + chunk - 1) // chunk
    for c in numba.prange(n_chunks):
        _encode_range(z, weights, res, tables, primes, out, c * chunk, min(n, (c + 1) * chunk))


@numba.njit(cache=True)
def _backward_level(z, weights, res, upstream, primes, grad, l):
    # walks the queries in order, so the accumulation order is fixed
    n, k = weights.shape
    table_size, n_feat = grad.shape[1], grad.shape[2]
    tsz = np.uint64(table_size)
    mask = np.uint64(table_size - 1) if (table_size & (table_size - 1)) == 0 else np.uint64(0)
    wt = np.empty((4, 2))
    ht = np.empty((4, 2), dtype=np.uint64)
    o = l * n_feat
    for i in range(n):
        for j in range(k):
            w = weights[i, j]
            if w == 0.0:
                continue
            _corner_terms(z[i, j], res[l], primes, wt, ht)
            for a in range(2):
                wa = w * wt[0, a]
                ha = ht[0, a]
                for b in range(2):
                    wb = wa * wt[1, b]
                    hb = ha ^ ht[1, b]
                    for c in range(2):
                        wc = wb * wt[2, c]
                        hc = hb ^ ht[2, c]
                        for e in range(2):
                            we = wc * wt[3, e]
                            if we == 0.0:
                                continue
                            row = _row(hc ^ ht[3, e], tsz, mask)
                            for f in range(n_feat):
                                grad[l, row, f] += we * upstream[i, o + f]


@numba.njit(cache=True)
def _backward_serial(z, weights, res, upstream, primes, grad):
    for l in range(grad.shape[0]):
        _backward_level(z, weights, res, upstream, primes, grad, l)


@numba.njit(cache=True, parallel=True)
def _backward_parallel(z, weights, res, upstream, primes, grad):
    # one level per task: each task owns its table slice
    for l in numba.prange(grad.shape[0]):
        _backward_level(z, weights, res, upstream, primes, grad, l)


PARALLEL_MIN = 4096  # below this many (point, neighbor) pairs thread start-up dominates
CHUNK = 1024


def _use_threads(z) -> bool:
    return numba.get_num_threads() > 1 and z.shape[0] * z.shape[1] >= PARALLEL_MIN


def _prepare(z, config: HashGridConfig):
    global _clamp_warned
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != 4:
        raise ValueError(f"expected 4D coordinates, got shape {z.shape}")
    if np.any((z < 0.0) | (z > 1.0)) or not np.all(np.isfinite(z)):
        if not config.clamp:
            raise ValueError("coordinates outside [0, 1]^4")
        if not _clamp_warned:
            log.warning("clamping hash-grid coordinates into [0, 1]^4")
            _clamp_warned = True
        z = np.clip(np.nan_to_num(z, nan=0.5), 0.0, 1.0)
    return z


def _kernel_args(config: HashGridConfig):
    res = np.asarray(level_resolutions(config), dtype=np.int64)
    primes = np.asarray(config.primes, dtype=np.uint64)
    return res, primes


def encode_blended(z, weights, config: HashGridConfig, tables: HashGridTables) -> np.ndarray:
    """Weighted sum over neighbors of the encodings of ``z``.

    ``z`` has shape ``(n, k, 4)`` and ``weights`` ``(n, k)``; returns
    ``(n, levels * features)``. Weights are used as given (callers normalize).
    """
    z = np.ascontiguousarray(_prepare(z, config))
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    res, primes = _kernel_args(config)
    out = np.empty((z.shape[0], config.output_dim))
    if _use_threads(z):
        _encode_parallel(z, weights, res, tables.data, primes, out, CHUNK)
    else:
        _encode_range(z, weights, res, tables.data, primes, out, 0, z.shape[0])
    return out


def encode_blended_backward(z, weights, upstream, config: HashGridConfig, grad: np.ndarray | None = None):
    """Accumulate the table gradient of :func:`encode_blended` into ``grad``."""
    z = np.ascontiguousarray(_prepare(z, config))
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if grad is None:
        grad = np.zeros((config.levels, config.table_size, config.features))
    res, primes = _kernel_args(config)
    if _use_threads(z):
        _backward_parallel(z, weights, res, upstream, primes, grad)
    else:
        _backward_serial(z, weights, res, upstream, primes, grad)
    return grad


def encode(z, config: HashGridConfig, tables: HashGridTables) -> np.ndarray:
    """Encode one 4-vector, or a batch of shape ``(n, 4)``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z.reshape(-1, 1, 4)
    out = encode_blended(zb, np.ones((zb.shape[0], 1)), config, tables)
    return out[0] if single else out


@dataclass
class TableGrad:
    """Sparse gradient over table entries: one row per touched (level, index)."""

    levels: np.ndarray
    rows: np.ndarray
    values: np.ndarray  # (m, features)

    def to_dense(self, config: HashGridConfig) -> np.ndarray:
        dense = np.zeros((config.levels, config.table_size, config.features))
        np.add.at(dense, (self.levels, self.rows), self.values)
        return dense


def encode_backward(z, upstream, config: HashGridConfig, tables: HashGridTables | None = None) -> TableGrad:
    """Gradient of ``<upstream, encode(z)>`` with respect to the tables.

    The encoding is linear in the tables, so ``tables`` is not needed; it is
    accepted to keep the call symmetric with :func:`encode`.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1, 1, 4)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(z.shape[0], config.output_dim)
    dense = encode_blended_backward(z, np.ones((z.shape[0], 1)), upstream, config)
    # touched entries, including those whose accumulated value is exactly zero
    touched = touched_entries(z.reshape(-1, 4), config)
    lv, rw = touched[:, 0], touched[:, 1]
    return TableGrad(lv, rw, dense[lv, rw])


def touched_entries(z, config: HashGridConfig) -> np.ndarray:
    """Unique ``(level, row)`` pairs read when encoding the queries ``z``."""
    z = _prepare(np.asarray(z, dtype=np.float64).reshape(-1, 4), config)
    pairs = []
    for l, scale in enumerate(level_resolutions(config)):
        base = np.minimum(np.floor(z * scale), scale - 1).astype(np.int64)
        for c in range(16):
            offs = np.array([(c >> d) & 1 for d in range(4)])
            corner = base + offs
            h = np.zeros(len(z), dtype=np.uint64)
            for d in range(4):
                h ^= corner[:, d].astype(np.uint64) * np.uint64(config.primes[d])
            rows = (h % np.uint64(config.table_size)).astype(np.int64)
            pairs.append(np.stack([np.full(len(z), l), rows], axis=1))
    return np.unique(np.concatenate(pairs), axis=0)


# --------------------------------------------------------------------------
# ablation encoders


@dataclass(frozen=True)
class VertexBankConfig:
    """Per-vertex bank of features indexed by a quantized signed distance."""

    n_vertices: int
    bins: int = 96
    features: int = 32

    @property
    def output_dim(self) -> int:
        return self.features


def distance_bin(dist, d_max: float, bins: int) -> np.ndarray:
    """Nearest of ``bins`` evenly spaced centers over ``[-d_max, d_max]``.

    Out-of-range distances land in the boundary bins.
    """
    u = (np.asarray(dist, dtype=np.float64) / d_max + 1.0) * 0.5
    return np.clip(np.rint(u * (bins - 1)), 0, bins - 1).astype(np.int64)


def init_vertex_bank(config: VertexBankConfig, seed: int = 0, scale: float = INIT_SCALE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=(config.n_vertices, config.bins, config.features))


def vertex_bank_lookup(indices, dist, weights, bank, d_max: float) -> np.ndarray:
    """Blend per-neighbor bank rows. Shapes: ``(n, k)`` in, ``(n, features)`` out."""
    bins = distance_bin(dist, d_max, bank.shape[1])
    rows = bank[indices, bins]  # (n, k, features)
    return np.einsum("nk,nkf->nf", weights, rows)


def vertex_bank_backward(indices, dist, weights, upstream, bank_shape, d_max: float, grad=None):
    if grad is None:
        grad = np.zeros(bank_shape)
    n_vert, n_bins, n_feat = bank_shape
    bins = distance_bin(dist, d_max, n_bins)
    flat = (np.asarray(indices) * n_bins + bins).ravel()
    contrib = (weights[..., None] * upstream[:, None, :]).reshape(-1, n_feat)
    g = grad.reshape(-1, n_feat)
    for f in range(n_feat):
        g[:, f] += np.bincount(flat, weights=contrib[:, f], minlength=n_vert * n_bins)
    return grad


@dataclass(frozen=True)
class FrequencyConfig:
    """Fixed sin/cos encoding of the 4D coordinates (no learnable state)."""

    n_freqs: int = 6
    include_input: bool = True

    @property
    def output_dim(self) -> int:
        return 4 * (2 * self.n_freqs + int(self.include_input))


def frequency_encode(z, config: FrequencyConfig) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    bands = (2.0 ** np.arange(config.n_freqs)) * np.pi
    scaled = z[..., None, :] * bands[:, None]  # (..., n_freqs, 4)
    parts = [np.sin(scaled).reshape(*z.shape[:-1], -1), np.cos(scaled).reshape(*z.shape[:-1], -1)]
    if config.include_input:
        parts.insert(0, z)
    return np.concatenate(parts, axis=-1)
