"""Pinhole rays with annealed stratified sampling, composited into pixels.

Rays are only marched through the current frame's surface box (inflated by
10%); rays that miss it are background and never touch the field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from selfnerf.errors import CameraError

ORTHO_TOL = 1e-6


@dataclass
class Camera:
    """Pinhole camera; ``x_cam = R @ x_world + t`` with +z forward, +y down."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(self.K)) < 1e-12:
            raise CameraError("intrinsics are not invertible")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > ORTHO_TOL or np.linalg.det(self.R) < 0:
            raise CameraError("rotation is not orthonormal")

    @property
    def center(self):
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, K, width, height):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(K, R, -R @ eye, width, height)

    def project(self, x):
        xc = np.asarray(x, dtype=np.float64) @ self.R.T + self.t
        uvw = xc @ self.K.T
        return uvw[..., :2] / uvw[..., 2:3]

    def to_dict(self):
        return {"K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
                "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 64
    anneal_start: float = 0.1
    anneal_iters: int = 256
    box_margin: float = 0.1
    white_background: bool = False


def generate_rays(camera: Camera, pixels):
    """Origins and unit directions through pixel centers; ``pixels`` is ``(n, 2)`` of (px, py)."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    px, py = pixels[:, 0], pixels[:, 1]
    if np.any((px < 0) | (px >= camera.width) | (py < 0) | (py >= camera.height)):
        raise IndexError("pixel outside the image")
    uv1 = np.stack([px + 0.5, py + 0.5, np.ones(len(pixels))], axis=1)
    dirs_cam = np.linalg.solve(camera.K, uv1.T).T
    dirs = dirs_cam @ camera.R
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.broadcast_to(camera.center, dirs.shape).copy(), dirs


def generate_ray(camera: Camera, pixel):
    o, v = generate_rays(camera, np.asarray(pixel).reshape(1, 2))
    return o[0], v[0]


def pixel_grid(width: int, height: int):
    """All ``(px, py)`` pairs in row-major order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def anneal_factor(iteration: int, start: float = 0.1, n_iters: int = 256) -> float:
    """Fraction of the ray interval sampled at ``iteration``; linear ramp to 1."""
    if n_iters <= 0:
        return 1.0
    return float(min(1.0, start + (1.0 - start) * iteration / n_iters))


def annealed_interval(near, far, eta):
    mid = 0.5 * (near + far)
    return mid - eta * (mid - near), mid + eta * (far - mid)


def sample_depths(near, far, n: int, eta: float = 1.0, rng: np.random.Generator | None = None):
    """One depth per stratum of the annealed interval, increasing along each ray.

    ``near``/``far`` are scalars or ``(r,)`` arrays; the result is ``(r, n)``
    (or ``(n,)`` for scalars). Without ``rng`` each depth sits at its stratum
    midpoint.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    scalar = near.ndim == 0
    near, far = np.atleast_1d(near), np.atleast_1d(far)
    if np.any(far <= near):
        raise ValueError("need near < far")
    if n < 2:
        raise ValueError("need at least two samples per ray")
    lo, hi = annealed_interval(near, far, eta)
    offsets = 0.5 if rng is None else rng.random((len(near), n))
    u = lo[:, None] + (hi - lo)[:, None] * (np.arange(n) + offsets) / n
    return u[0] if scalar else u


def sample_deltas(depths, far):
    """Spacing to the next sample; the last sample runs to ``far``."""
    depths = np.asarray(depths, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    return np.diff(depths, axis=-1, append=far[..., None])


def composite(sigma, rgb, delta):
    """Front-to-back alpha compositing over the last sample axis.

    Returns ``(color, weight_sum, cache)`` with ``cache = (weights, trans)``,
    ``trans[i]`` being the transmittance in front of sample ``i``.
    """
    tau = np.asarray(sigma, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    alpha = -np.expm1(-tau)
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-(acc - tau))
    weights = alpha * trans
    color = np.sum(weights[..., None] * rgb, axis=-2)
    return color, weights.sum(axis=-1), (weights, trans, tau)


def composite_backward(g_color, g_wsum, sigma, rgb, delta, cache):
    """Cotangents of ``composite`` for ``sigma`` and ``rgb``."""
    weights, trans, tau = cache
    e = np.sum(g_color[..., None, :] * rgb, axis=-1) + np.asarray(g_wsum)[..., None]
    we = weights * e
    later = np.cumsum(we[..., ::-1], axis=-1)[..., ::-1] - we  # sum over samples behind
    trans_after = trans * np.exp(-tau)
    g_sigma = delta * (trans_after * e - later)
    g_rgb = weights[..., None] * g_color[..., None, :]
    return g_sigma, g_rgb


def ray_box(origins, dirs, lo, hi):
    """Slab test; returns ``(near, far, hit)`` with ``near >= 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(tmin, 0.0)
    hit = tmax > near
    return near, tmax, hit


@dataclass
class RayBatch:
    """Rendered rays. ``color``/``wsum`` cover every ray; the rest only hit rays."""

    color: np.ndarray  # (r, 3)
    wsum: np.ndarray  # (r,)
    hit: np.ndarray  # (r,) bool
    sigma: np.ndarray  # (h, n)
    rgb: np.ndarray  # (h, n, 3)
    depths: np.ndarray  # (h, n)
    delta: np.ndarray  # (h, n)
    nearest: np.ndarray  # (h, n) signed distance to the closest vertex
    cache: tuple = ()


def frame_boxes(field, margin: float):
    return [s.bounds(margin) for s in field.surfaces]


def render_rays(field, params, origins, dirs, frame_ids, config: RenderConfig, eta: float = 1.0,
                rng: np.random.Generator | None = None, boxes=None) -> RayBatch:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    frame_ids = np.asarray(frame_ids, dtype=np.int64).reshape(-1)
    r = len(origins)
    if boxes is None:
        boxes = frame_boxes(field, config.box_margin)
    lo = np.stack([boxes[t][0] for t in frame_ids]) if r else np.zeros((0, 3))
    hi = np.stack([boxes[t][1] for t in frame_ids]) if r else np.zeros((0, 3))
    near, far, hit = ray_box(origins, dirs, lo, hi)
    color = np.zeros((r, 3))
    wsum = np.zeros(r)
    h = np.flatnonzero(hit)
    n = config.n_samples
    if len(h) == 0:
        empty = np.zeros((0, n))
        return RayBatch(color, wsum, hit, empty, np.zeros((0, n, 3)), empty, empty, empty)
    depths = sample_depths(near[h], far[h], n, eta, rng)
    _, upper = annealed_interval(near[h], far[h], eta)
    delta = sample_deltas(depths, upper)
    pts = origins[h, None, :] + depths[..., None] * dirs[h, None, :]
    sample_frames = np.repeat(frame_ids[h], n)
    sample_dirs = np.repeat(dirs[h], n, axis=0)
    sigma, rgb, d1, fcache = field.forward(pts.reshape(-1, 3), sample_frames, params, sample_dirs)
    sigma = sigma.reshape(len(h), n)
    rgb = rgb.reshape(len(h), n, 3)
    c, w, ccache = composite(sigma, rgb, delta)
    color[h], wsum[h] = c, w
    if config.white_background:
        color = color + (1.0 - wsum)[:, None]
    return RayBatch(color, wsum, hit, sigma, rgb, depths, delta, d1.reshape(len(h), n), (h, fcache, ccache))


def render_rays_backward(field, params, batch: RayBatch, g_color, g_wsum, g_sigma_direct=None, grads=None):
    """Backpropagate ray-level cotangents (and an optional per-sample density term)."""
    if not batch.cache:
        if grads is None:
            grads = {key: np.zeros_like(value) for key, value in params.items()}
        return grads
    h, fcache, ccache = batch.cache
    g_sigma, g_rgb = composite_backward(np.asarray(g_color)[h], np.asarray(g_wsum)[h], batch.sigma,
                                        batch.rgb, batch.delta, ccache)
    if g_sigma_direct is not None:
        g_sigma = g_sigma + g_sigma_direct
    return field.backward(fcache, g_sigma.ravel(), g_rgb.reshape(-1, 3), params, grads)


def render_pixel(camera: Camera, pixel, t: int, field, params, iteration: int = 0,
                 config: RenderConfig = RenderConfig(), seed: int = 0):
    """Color and weight sum of one pixel; jittered by a stream keyed on (seed, iteration, pixel)."""
    o, v = generate_ray(camera, pixel)
    rng = np.random.default_rng([seed, iteration, int(pixel[0]), int(pixel[1])])
    eta = anneal_factor(iteration, config.anneal_start, config.anneal_iters)
    batch = render_rays(field, params, o[None], v[None], np.array([t]), config, eta, rng)
    return batch.color[0], float(batch.wsum[0])


def render_image(field, params, camera: Camera, t: int, config: RenderConfig = RenderConfig(),
                 chunk: int = 4096):
    """Full image at stratum midpoints with the full sampling interval.

    Returns ``(rgb (H, W, 3), wsum (H, W))``.
    """
    pix = pixel_grid(camera.width, camera.height)
    origins, dirs = generate_rays(camera, pix)
    frames = np.full(len(pix), t, dtype=np.int64)
    boxes = frame_boxes(field, config.box_margin)
    color = np.zeros((len(pix), 3))
    wsum = np.zeros(len(pix))
    for s in range(0, len(pix), chunk):
        b = render_rays(field, params, origins[s:s + chunk], dirs[s:s + chunk], frames[s:s + chunk],
                        config, 1.0, None, boxes)
        color[s:s + chunk], wsum[s:s + chunk] = b.color, b.wsum
    return color.reshape(camera.height, camera.width, 3), wsum.reshape(camera.height, camera.width)
