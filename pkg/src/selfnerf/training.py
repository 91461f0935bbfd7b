"""Losses, schedules, Adam, the training loop and the checkpoint format."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from selfnerf.config import (
    ExperimentConfig,
    ModelConfig,
    TrainConfig,
    frequency_config,
    from_dict,
    to_dict,
    vertex_bank_config,
)
from selfnerf.errors import CheckpointError, NumericalError
from selfnerf.radiance_field import DynamicField, FrequencyEncoder, HashEncoder, Params, VertexEncoder
from selfnerf.scene_io import Dataset
from selfnerf.volume_renderer import RenderConfig, anneal_factor, frame_boxes, generate_rays, pixel_grid, \
    ray_box, render_rays, render_rays_backward

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# losses


def loss_rgb(rendered, target) -> float:
    """Sum over rays of the (unsquared) L2 norm of the color residual."""
    res = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sum(np.linalg.norm(res.reshape(-1, 3), axis=1)))


def loss_mask(wsum, mask) -> float:
    w = np.asarray(wsum, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    return float(np.sum(w * (1.0 - m) + (1.0 - w) * m))


def dist_penalty(nearest, beta: float, clamp: float = 20.0, inside_free: bool = False):
    """Per-sample factor multiplying density: ``exp(min(relu(d) * beta, clamp))``."""
    d = np.asarray(nearest, dtype=np.float64)
    factor = np.exp(np.minimum(np.maximum(d, 0.0) * beta, clamp))
    if inside_free:
        factor = np.where(d > 0.0, factor, 0.0)
    return factor


def loss_dist(sigma, nearest, beta: float, clamp: float = 20.0, inside_free: bool = False) -> float:
    """Density weighted by an exponential of the outside distance, summed over samples."""
    return float(np.sum(np.asarray(sigma, dtype=np.float64) * dist_penalty(nearest, beta, clamp, inside_free)))


def lambda_at(iteration: int, config: TrainConfig) -> float:
    return config.lambda_early if iteration < config.lambda_switch else config.lambda_late


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Exponential decay from ``lr_start`` at 0 to ``lr_end`` at ``iterations``."""
    if config.iterations <= 0:
        return config.lr_start
    if iteration >= config.iterations:
        return config.lr_end
    frac = iteration / config.iterations
    return float(config.lr_start * (config.lr_end / config.lr_start) ** frac)


@dataclass
class LossReport:
    """Per-ray normalized loss components of one step."""

    rgb: float
    mask: float
    dist: float
    geo: float
    total: float
    lam: float

    @classmethod
    def combine(cls, rgb, mask, dist, lam, config: TrainConfig):
        geo = config.lambda_mask * mask + config.lambda_dist * dist
        return cls(rgb, mask, dist, geo, rgb + lam * geo, lam)

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.rgb, self.mask, self.dist, self.geo, self.total))


def loss_total(report: LossReport, iteration: int, config: TrainConfig) -> float:
    """Total objective from the components of ``report`` and the scheduled lambda."""
    geo = config.lambda_mask * report.mask + config.lambda_dist * report.dist
    return report.rgb + lambda_at(iteration, config) * geo


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros(cls, params: Params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float, config: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter group {key!r}")
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            new_params[key], new_m[key], new_v[key] = p, state.m[key], state.v[key]
            continue
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        new_params[key] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(new_m, new_v, step)


# --------------------------------------------------------------------------
# model assembly


def build_field(dataset: Dataset, model: ModelConfig) -> DynamicField:
    w, h = dataset.image_size
    grid = model.grid.resolve(max(w, h))
    probe = DynamicField(dataset.surfaces, dataset.canonical, None, model.field, model.k, model.d_max)
    if model.encoder == "hash":
        encoder = HashEncoder(grid)
    elif model.encoder == "vertex":
        encoder = VertexEncoder(vertex_bank_config(model, grid, len(dataset.canonical)), probe.d_max)
    else:
        encoder = FrequencyEncoder(frequency_config(model))
    probe.encoder = encoder
    return probe


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"SNRFCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, config: ExperimentConfig, params: Params, adam: AdamState | None, iteration: int):
    """Write a checkpoint; returns its hex checksum.

    Layout (little-endian): magic, uint32 version, uint32 config length, config
    JSON, uint32 blob count, then per blob: uint16 name length, name, uint8
    ndim, uint32 dims, float32 data; finally the SHA-256 of all prior bytes.
    """
    block = {"config": to_dict(config), "iteration": int(iteration),
             "adam_step": int(adam.step) if adam is not None else 0}
    text = json.dumps(block, sort_keys=True).encode("utf-8")
    blobs = [(f"param/{k}", v) for k, v in params.items()]
    if adam is not None:
        blobs += [(f"adam.m/{k}", v) for k, v in adam.m.items()]
        blobs += [(f"adam.v/{k}", v) for k, v in adam.v.items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)
    return digest.hex()


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: Params
    adam: AdamState | None
    iteration: int
    checksum: str


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 40 or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = len(MAGIC)
    version, n = struct.unpack_from("<II", payload, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos += 8
    block = json.loads(payload[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    groups = {"param": {}, "adam.m": {}, "adam.v": {}}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
        group, key = name.split("/", 1)
        groups[group][key] = arr
    adam = None
    if groups["adam.m"]:
        adam = AdamState(groups["adam.m"], groups["adam.v"], block["adam_step"])
    return Checkpoint(from_dict(block["config"]), groups["param"], adam, block["iteration"], digest.hex())


# --------------------------------------------------------------------------
# training loop


class RaySampler:
    """Draws (frame, pixel) pairs among pixels whose rays reach the frame's box.

    A fixed fraction of each batch is drawn from inside the subject mask.
    """

    def __init__(self, dataset: Dataset, boxes, in_mask_fraction: float, rng: np.random.Generator):
        self.rng = rng
        self.in_mask_fraction = in_mask_fraction
        self.frames = []
        for t, fr in enumerate(dataset.frames):
            pix = pixel_grid(fr.camera.width, fr.camera.height)
            o, d = generate_rays(fr.camera, pix)
            _, _, hit = ray_box(o, d, np.broadcast_to(boxes[t][0], o.shape), np.broadcast_to(boxes[t][1], o.shape))
            mask = fr.mask.ravel()
            colors = fr.image.reshape(-1, 3)
            self.frames.append({
                "origins": o, "dirs": d, "colors": colors, "mask": mask,
                "box": np.flatnonzero(hit), "inside": np.flatnonzero(mask),
            })

    def sample(self, n: int):
        frames = self.rng.integers(len(self.frames), size=n)
        forced = self.rng.random(n) < self.in_mask_fraction
        u = self.rng.random(n)
        pick = np.empty(n, dtype=np.int64)
        for t in np.unique(frames):
            sel = frames == t
            fr = self.frames[t]
            for flag, pool in ((True, fr["inside"]), (False, fr["box"])):
                s = np.flatnonzero(sel & (forced == flag))
                pick[s] = pool[np.minimum((u[s] * len(pool)).astype(np.int64), len(pool) - 1)]
        out = {key: np.empty((n, 3)) for key in ("origins", "dirs", "colors")}
        out["mask"] = np.empty(n)
        for t in np.unique(frames):
            s = np.flatnonzero(frames == t)
            fr = self.frames[t]
            for key in ("origins", "dirs", "colors", "mask"):
                out[key][s] = fr[key][pick[s]]
        out["frames"] = frames
        return out


class Trainer:
    def __init__(self, dataset: Dataset, config: ExperimentConfig, params: Params | None = None):
        self.dataset = dataset
        self.config = config
        self.field = build_field(dataset, config.model)
        seed = config.train.seed
        self.params = params if params is not None else self.field.init_params(seed)
        self.adam = AdamState.zeros(self.params)
        self.iteration = 0
        self.boxes = frame_boxes(self.field, config.render.box_margin)
        self.sampler = RaySampler(dataset, self.boxes, config.train.in_mask_fraction,
                                  np.random.default_rng([seed, 1]))
        self.depth_rng = np.random.default_rng([seed, 2])

    def loss_and_grads(self, batch, iteration: int, eta: float, rng=None, need_grads: bool = True):
        """Loss report and parameter gradients of one ray batch (gradients ``None`` if not needed)."""
        tc = self.config.train
        rays = render_rays(self.field, self.params, batch["origins"], batch["dirs"], batch["frames"],
                           self.config.render, eta, rng, self.boxes)
        n = len(batch["mask"])
        lam = lambda_at(iteration, tc)
        res = rays.color - batch["colors"]
        norms = np.linalg.norm(res, axis=1)
        d_hat = rays.nearest / self.field.d_max
        penalty = dist_penalty(d_hat, tc.beta, tc.dist_exp_clamp, tc.dist_inside_free)
        rgb = float(norms.sum())
        msk = loss_mask(rays.wsum, batch["mask"])
        dst = float(np.sum(rays.sigma * penalty))
        report = LossReport.combine(rgb / n, msk / n, dst / n, lam, tc)
        if not report.finite():
            raise NumericalError(f"non-finite loss at step {iteration}: {asdict(report)}")
        if not need_grads:
            return report, None
        g_color = np.where(norms[:, None] > 0.0, res / np.where(norms > 0.0, norms, 1.0)[:, None], 0.0) / n
        g_wsum = lam * tc.lambda_mask * (1.0 - 2.0 * batch["mask"]) / n
        g_sigma = lam * tc.lambda_dist * penalty / n
        grads = render_rays_backward(self.field, self.params, rays, g_color, g_wsum, g_sigma)
        return report, grads

    def step(self) -> tuple[LossReport, float]:
        tc, rc = self.config.train, self.config.render
        it = self.iteration
        lr = lr_at(it, tc)
        eta = anneal_factor(it, rc.anneal_start, rc.anneal_iters)
        batch = self.sampler.sample(tc.rays_per_batch)
        report, grads = self.loss_and_grads(batch, it, eta, self.depth_rng)
        self.params, self.adam = adam_step(self.params, grads, self.adam, lr, tc)
        self.iteration += 1
        return report, lr

    def save(self, path) -> str:
        return save_checkpoint(path, self.config, self.params, self.adam, self.iteration)

    def run(self, out_dir=None, iterations: int | None = None, callback=None):
        """Train for ``iterations`` steps (default: the configured count).

        With ``out_dir``, writes ``loss_log.jsonl``, periodic
        ``ckpt_XXXXXX.bin`` checkpoints and ``final.bin``. ``callback(trainer,
        record)`` runs after every step. Returns the list of log records.
        """
        tc = self.config.train
        total = tc.iterations if iterations is None else iterations
        out = Path(out_dir) if out_dir is not None else None
        log_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_fh = open(out / "loss_log.jsonl", "w")
        records = []
        try:
            for _ in range(total):
                start = time.perf_counter()
                report, lr = self.step()
                record = {"step": self.iteration - 1, "lr": lr, "lambda": report.lam,
                          "loss_rgb": report.rgb, "loss_mask": report.mask, "loss_dist": report.dist,
                          "loss_geo": report.geo, "loss_total": report.total,
                          "wall_ms": round(1000.0 * (time.perf_counter() - start), 3)}
                records.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if out is not None and tc.checkpoint_every > 0 and self.iteration % tc.checkpoint_every == 0:
                    self.save(out / f"ckpt_{self.iteration:06d}.bin")
                if callback is not None:
                    callback(self, record)
            if out is not None:
                self.save(out / "final.bin")
        finally:
            if log_fh is not None:
                log_fh.close()
        return records


def train(dataset: Dataset, config: ExperimentConfig, out_dir=None, callback=None) -> Trainer:
    trainer = Trainer(dataset, config)
    trainer.run(out_dir, callback=callback)
    return trainer


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
