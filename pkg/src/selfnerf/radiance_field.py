"""Frame-conditioned radiance field.

A small ReLU network maps the blended surface-relative feature of a point,
concatenated with a learnable per-frame latent, to a density (softplus head)
and an RGB radiance (sigmoid head). Gradients are written out by hand for
every learnable, the encoder's own state included.

Parameters live in a flat ``dict[str, ndarray]``:

* ``mlp.w{i}`` / ``mlp.b{i}``: layer weights ``(fan_in, fan_out)`` and biases
* ``latents``: ``(n_frames, latent_dim)``
* ``grid.tables`` or ``vertex.bank``: encoder state, when it has any
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from selfnerf.errors import ConfigError
from selfnerf.grid_encoding import (
    FrequencyConfig,
    HashGridConfig,
    HashGridTables,
    VertexBankConfig,
    encode_blended,
    encode_blended_backward,
    frequency_encode,
    init_vertex_bank,
    vertex_bank_backward,
    vertex_bank_lookup,
)
from selfnerf.surface_relative import (
    CanonicalSurface,
    KnnIndex,
    NormalizationBox,
    SurfaceFrame,
    blend_weight,
    inflated_box,
    normalize_rep,
    normalized_weights,
    signed_distance,
)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class FieldConfig:
    hidden_layers: int = 2
    hidden_width: int = 64
    latent_dim: int = 16
    activation: str = "relu"
    density_activation: str = "softplus"
    color_activation: str = "sigmoid"
    use_viewdirs: bool = False

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1 or self.latent_dim < 1:
            raise ConfigError("field dimensions must be positive")
        if self.activation != "relu" or self.density_activation != "softplus" or self.color_activation != "sigmoid":
            raise ConfigError("supported activations: relu hidden, softplus density, sigmoid color")


def init_params(config: FieldConfig, n_frames: int, seed: int, input_dim: int) -> Params:
    """MLP weights uniform in ``±1/sqrt(fan_in)``, zero biases, zero latents."""
    rng = np.random.default_rng(seed)
    in_dim = input_dim + config.latent_dim + (3 if config.use_viewdirs else 0)
    dims = [in_dim] + [config.hidden_width] * config.hidden_layers + [4]
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"mlp.w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"mlp.b{i}"] = np.zeros(fan_out)
    params["latents"] = np.zeros((n_frames, config.latent_dim))
    return params


def n_layers(params: Params) -> int:
    return sum(1 for key in params if key.startswith("mlp.w"))


def softplus(x):
    return np.logaddexp(0.0, x)


def mlp_forward(inputs, params: Params):
    """Returns ``(sigma, rgb, cache)``."""
    acts = [inputs]
    h = inputs
    last = n_layers(params) - 1
    for i in range(last):
        h = np.maximum(h @ params[f"mlp.w{i}"] + params[f"mlp.b{i}"], 0.0)
        acts.append(h)
    out = h @ params[f"mlp.w{last}"] + params[f"mlp.b{last}"]
    sigma = softplus(out[:, 0])
    rgb = expit(out[:, 1:4])
    return sigma, rgb, (acts, out, rgb)


def mlp_backward(cache, g_sigma, g_rgb, params: Params, grads: Params):
    """Accumulates weight gradients into ``grads``; returns the input gradient."""
    acts, out, rgb = cache
    g_out = np.empty_like(out)
    g_out[:, 0] = g_sigma * expit(out[:, 0])
    g_out[:, 1:4] = g_rgb * rgb * (1.0 - rgb)
    g = g_out
    for i in reversed(range(n_layers(params))):
        h = acts[i]
        grads[f"mlp.w{i}"] += h.T @ g
        grads[f"mlp.b{i}"] += g.sum(axis=0)
        g = g @ params[f"mlp.w{i}"].T
        if i > 0:
            g = g * (h > 0.0)
    return g


# --------------------------------------------------------------------------
# encoders on top of the surface-relative anchors


@dataclass
class RelBatch:
    """Anchors of a batch of points: everything the encoders consume."""

    indices: np.ndarray  # (n, k)
    z: np.ndarray  # (n, k, 4)
    distances: np.ndarray  # (n, k)
    weights: np.ndarray  # (n, k), normalized


class HashEncoder:
    name = "hash"
    param_key = "grid.tables"

    def __init__(self, config: HashGridConfig):
        self.config = config

    @property
    def output_dim(self):
        return self.config.output_dim

    def init(self, seed: int) -> Params:
        return {self.param_key: HashGridTables.init(self.config, seed).data}

    def forward(self, rel: RelBatch, params: Params):
        return encode_blended(rel.z, rel.weights, self.config, HashGridTables(params[self.param_key]))

    def backward(self, rel: RelBatch, g_feat, params: Params, grads: Params):
        encode_blended_backward(rel.z, rel.weights, g_feat, self.config, grads[self.param_key])


class VertexEncoder:
    """Independent per-vertex features at quantized signed distance; no hashing."""

    name = "vertex"
    param_key = "vertex.bank"

    def __init__(self, config: VertexBankConfig, d_max: float):
        self.config = config
        self.d_max = d_max

    @property
    def output_dim(self):
        return self.config.output_dim

    def init(self, seed: int) -> Params:
        return {self.param_key: init_vertex_bank(self.config, seed)}

    def forward(self, rel: RelBatch, params: Params):
        return vertex_bank_lookup(rel.indices, rel.distances, rel.weights, params[self.param_key], self.d_max)

    def backward(self, rel: RelBatch, g_feat, params: Params, grads: Params):
        bank = params[self.param_key]
        vertex_bank_backward(rel.indices, rel.distances, rel.weights, g_feat, bank.shape, self.d_max,
                             grads[self.param_key])


class FrequencyEncoder:
    name = "frequency"
    param_key = None

    def __init__(self, config: FrequencyConfig):
        self.config = config

    @property
    def output_dim(self):
        return self.config.output_dim

    def init(self, seed: int) -> Params:
        return {}

    def forward(self, rel: RelBatch, params: Params):
        return np.einsum("nk,nkf->nf", rel.weights, frequency_encode(rel.z, self.config))

    def backward(self, rel, g_feat, params, grads):
        pass


def default_d_max(surfaces) -> float:
    """1.5 x half the largest extent of the union of the inflated frame boxes."""
    lo = np.min([inflated_box(s.points)[0] for s in surfaces], axis=0)
    hi = np.max([inflated_box(s.points)[1] for s in surfaces], axis=0)
    return float(1.5 * 0.5 * np.max(hi - lo))


class DynamicField:
    """Surface sequence + encoder + MLP: the full map ``(x, t) -> (sigma, rgb)``.

    Holds no learnable state; parameters are passed in on every call.
    """

    def __init__(self, surfaces: list[SurfaceFrame], canonical: CanonicalSurface, encoder,
                 config: FieldConfig = FieldConfig(), k: int = 4, d_max: float | None = None,
                 box: NormalizationBox | None = None):
        if not surfaces:
            raise ConfigError("need at least one surface frame")
        m = len(canonical)
        for t, s in enumerate(surfaces):
            if len(s) != m:
                raise ConfigError(f"vertex-count mismatch at frame {t}")
        if not 1 <= k <= m:
            raise ConfigError(f"k={k} must be in [1, {m}]")
        self.surfaces = surfaces
        self.canonical = canonical
        self.encoder = encoder
        self.config = config
        self.k = k
        self.d_max = float(d_max) if d_max is not None else default_d_max(surfaces)
        self.box = box if box is not None else NormalizationBox.from_canonical(canonical, self.d_max)
        self._indices: dict[int, KnnIndex] = {}

    @property
    def n_frames(self):
        return len(self.surfaces)

    def index(self, t: int) -> KnnIndex:
        if t not in self._indices:
            self._indices[t] = KnnIndex(self.surfaces[t].points)
        return self._indices[t]

    def init_params(self, seed: int) -> Params:
        params = init_params(self.config, self.n_frames, seed, self.encoder.output_dim)
        params.update(self.encoder.init(seed + 1))
        return params

    def _check_frames(self, frame_ids):
        if len(frame_ids) and (frame_ids.min() < 0 or frame_ids.max() >= self.n_frames):
            bad = frame_ids[(frame_ids < 0) | (frame_ids >= self.n_frames)][0]
            raise IndexError(f"unknown frame index {bad}")

    def relative(self, points, frame_ids) -> RelBatch:
        n = len(points)
        idx = np.empty((n, self.k), dtype=np.int64)
        dist = np.empty((n, self.k))
        wts = np.empty((n, self.k))
        for t in np.unique(frame_ids):
            sel = np.flatnonzero(frame_ids == t)
            surf = self.surfaces[t]
            _, nn = self.index(int(t)).query(points[sel], self.k)
            p, nrm = surf.points[nn], surf.normals[nn]
            xb = points[sel][:, None, :]
            idx[sel] = nn
            dist[sel] = signed_distance(xb, p, nrm)
            wts[sel] = blend_weight(xb, p, nrm)
        z = normalize_rep(self.canonical.points[idx], dist, self.box)
        return RelBatch(idx, z, dist, normalized_weights(wts))

    def forward(self, points, frame_ids, params: Params, dirs=None):
        """Density and radiance for a batch of points, plus the nearest signed distance.

        ``points`` is ``(n, 3)``, ``frame_ids`` ``(n,)``. Returns
        ``(sigma, rgb, d1, cache)``.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        frame_ids = np.asarray(frame_ids, dtype=np.int64).reshape(-1)
        self._check_frames(frame_ids)
        rel = self.relative(points, frame_ids)
        feat = self.encoder.forward(rel, params)
        parts = [feat, params["latents"][frame_ids]]
        if self.config.use_viewdirs:
            if dirs is None:
                raise ValueError("this field needs view directions")
            parts.append(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
        sigma, rgb, mlp_cache = mlp_forward(np.concatenate(parts, axis=1), params)
        return sigma, rgb, rel.distances[:, 0], (rel, frame_ids, mlp_cache)

    def backward(self, cache, g_sigma, g_rgb, params: Params, grads: Params | None = None) -> Params:
        """Gradients of ``<g_sigma, sigma> + <g_rgb, rgb>`` for every parameter."""
        if grads is None:
            grads = {key: np.zeros_like(value) for key, value in params.items()}
        rel, frame_ids, mlp_cache = cache
        g_in = mlp_backward(mlp_cache, g_sigma, g_rgb, params, grads)
        feat_dim = self.encoder.output_dim
        g_lat = g_in[:, feat_dim:feat_dim + self.config.latent_dim]
        lat = grads["latents"]
        for j in range(lat.shape[1]):
            lat[:, j] += np.bincount(frame_ids, weights=g_lat[:, j], minlength=lat.shape[0])
        self.encoder.backward(rel, g_in[:, :feat_dim], params, grads)
        return grads

    def query(self, x, t: int, params: Params, direction=None):
        """Single-point convenience: ``(sigma, rgb)`` at ``x`` in frame ``t``."""
        dirs = None if direction is None else np.asarray(direction, dtype=np.float64).reshape(1, 3)
        sigma, rgb, _, _ = self.forward(np.reshape(x, (1, 3)), np.array([t]), params, dirs)
        return float(sigma[0]), rgb[0]


def field_query(x, t: int, params: Params, field: DynamicField, direction=None):
    return field.query(x, t, params, direction)


def field_backward(field: DynamicField, cache, g_sigma, g_rgb, params: Params) -> Params:
    return field.backward(cache, g_sigma, g_rgb, params)
