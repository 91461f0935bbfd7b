"""Evaluation, novel-view rendering and the encoder ablation harness."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from selfnerf.config import ExperimentConfig
from selfnerf.errors import ConfigError
from selfnerf.metrics import psnr, ssim
from selfnerf.scene_io import BBox, Dataset, mask_bbox, oracle_from_dataset, write_png, write_raw_float
from selfnerf.training import Trainer, build_field, load_checkpoint
from selfnerf.volume_renderer import Camera, RenderConfig, frame_boxes, generate_rays, render_image, render_rays

VARIANTS = {"hash": "hash", "vertex-baseline": "vertex", "frequency-encoding": "frequency"}
CURVE_FIELDS = ("variant", "iteration", "loss_total", "train_psnr")


def render_bbox(field, params, camera: Camera, t: int, bbox: BBox, config: RenderConfig, chunk: int = 4096):
    """Render only the pixels of ``bbox``; returns the ``(h, w, 3)`` crop."""
    ys, xs = np.mgrid[bbox.y0:bbox.y1 + 1, bbox.x0:bbox.x1 + 1]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    o, d = generate_rays(camera, pix)
    frames = np.full(len(pix), t, dtype=np.int64)
    boxes = frame_boxes(field, config.box_margin)
    color = np.zeros((len(pix), 3))
    for s in range(0, len(pix), chunk):
        b = render_rays(field, params, o[s:s + chunk], d[s:s + chunk], frames[s:s + chunk], config, 1.0, None, boxes)
        color[s:s + chunk] = b.color
    return color.reshape(bbox.height, bbox.width, 3)


@dataclass
class EvalReport:
    view: str
    frames: list[int]
    psnr: list[float]
    ssim: list[float]
    bboxes: list[tuple[int, int, int, int]]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_dict(self) -> dict:
        def enc(v):
            return "inf" if math.isinf(v) else v

        return {"view": self.view, "mean_psnr": enc(self.mean_psnr), "mean_ssim": self.mean_ssim,
                "frames": [{"frame": t, "psnr": enc(p), "ssim": s, "bbox": list(b)}
                           for t, p, s, b in zip(self.frames, self.psnr, self.ssim, self.bboxes)]}

    def format(self) -> str:
        lines = [f"view: {self.view}"]
        for t, p, s, b in zip(self.frames, self.psnr, self.ssim, self.bboxes):
            lines.append(f"frame {t:4d}  psnr {p:7.3f} dB  ssim {s:.4f}  bbox {tuple(b)}")
        lines.append(f"mean        psnr {self.mean_psnr:7.3f} dB  ssim {self.mean_ssim:.4f}")
        return "\n".join(lines)


def evaluate_images(view: str, frames, images, references, masks) -> EvalReport:
    report = EvalReport(view, [], [], [], [])
    for t, img, ref, m in zip(frames, images, references, masks):
        box = mask_bbox(m)
        report.frames.append(int(t))
        report.psnr.append(psnr(img, ref, box))
        report.ssim.append(ssim(img, ref, box))
        report.bboxes.append(tuple(box))
    return report


def evaluate_field(field, params, dataset: Dataset, config: RenderConfig, frames=None, view: str = "train") -> EvalReport:
    """PSNR/SSIM inside the mask bbox of each frame.

    ``view="train"`` compares against the stored training images;
    ``view="heldout"`` re-renders the synthetic scene from the orbit pose half
    a step past each frame's camera.
    """
    frames = range(len(dataset)) if frames is None else frames
    images, refs, masks = [], [], []
    oracle = oracle_from_dataset(dataset) if view == "heldout" else None
    for t in frames:
        if view == "train":
            cam, ref, m = dataset.frames[t].camera, dataset.frames[t].image, dataset.frames[t].mask
        elif view == "heldout":
            cam = oracle.heldout_camera(t)
            ref, m = oracle.render(cam, t)
        else:
            raise ConfigError(f"unknown view {view!r}")
        box = mask_bbox(m)
        img = np.zeros_like(ref)
        img[box.y0:box.y1 + 1, box.x0:box.x1 + 1] = render_bbox(field, params, cam, t, box, config)
        images.append(img)
        refs.append(ref)
        masks.append(m)
    return evaluate_images(view, list(frames), images, refs, masks)


def field_from_checkpoint(path, dataset: Dataset, latent_from: int | None = None):
    ckpt = load_checkpoint(path)
    field = build_field(dataset, ckpt.config.model)
    params = dict(ckpt.params)
    n_trained = params["latents"].shape[0]
    if latent_from is not None:
        # novel frames (surfaces past the trained range) borrow one trained latent
        if not 0 <= latent_from < n_trained:
            raise ConfigError(f"latent source frame {latent_from} was not trained")
        extra = np.repeat(params["latents"][latent_from:latent_from + 1], max(len(dataset) - n_trained, 0), axis=0)
        params["latents"] = np.concatenate([params["latents"], extra])
    return ckpt, field, params


# --------------------------------------------------------------------------
# rendering sequences


def parse_camera_spec(spec: str, dataset: Dataset):
    """Camera list for ``spec``.

    * ``train``: each frame keeps its own training camera (one pose per frame)
    * ``orbit:N``: ``N`` poses on a horizontal circle through frame 0's camera
    * anything else: a JSON file shaped like ``cameras.json``
    """
    if spec == "train":
        return None
    m = re.fullmatch(r"orbit:(\d+)", spec)
    if m:
        n = int(m.group(1))
        ref = dataset.frames[0].camera
        eye = ref.center
        radius = float(np.hypot(eye[0], eye[2]))
        height = float(eye[1])
        base = math.atan2(eye[0], eye[2])
        cams = []
        for i in range(n):
            a = base + 2.0 * math.pi * i / max(n, 1)
            pos = np.array([radius * math.sin(a), height, radius * math.cos(a)])
            cams.append(Camera.look_at(pos, np.zeros(3), np.array([0.0, 1.0, 0.0]), ref.K, ref.width, ref.height))
        return cams
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"camera spec {spec!r} is neither 'train', 'orbit:N' nor a file")
    return [Camera.from_dict(c) for c in json.loads(path.read_text())["frames"]]


def parse_frame_range(text: str) -> range:
    """``a:b`` (half-open) or a single index."""
    if ":" in text:
        a, b = text.split(":", 1)
        return range(int(a), int(b))
    return range(int(text), int(text) + 1)


def render_sequence(checkpoint, dataset: Dataset, camera_spec: str, frames: range, out_dir,
                    hdr: bool = False, latent_from: int | None = None) -> list[Path]:
    """Write one image per (frame, pose) to ``out_dir`` as ``fFFFF_vVVV.png`` (or ``.f32``)."""
    ckpt, field, params = field_from_checkpoint(checkpoint, dataset, latent_from)
    n_latent = params["latents"].shape[0]
    for t in frames:
        if not 0 <= t < len(dataset):
            raise IndexError(f"frame {t} has no surface in the dataset")
        if t >= n_latent:
            raise IndexError(f"frame {t} is outside the trained latent range; pass a latent source frame")
    cams = parse_camera_spec(camera_spec, dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in frames:
        poses = [dataset.frames[t].camera] if cams is None else cams
        for v, cam in enumerate(poses):
            img, _ = render_image(field, params, cam, t, ckpt.config.render)
            path = out / f"f{t:04d}_v{v:03d}{'.f32' if hdr else '.png'}"
            if hdr:
                write_raw_float(path, img)
            else:
                write_png(path, img)
            written.append(path)
    return written


# --------------------------------------------------------------------------
# ablation


def ablation_run(dataset: Dataset, variant: str, budget: int, config: ExperimentConfig,
                 eval_every: int = 50, eval_frames=(0,), out_csv=None) -> list[dict]:
    """Train one encoder variant for ``budget`` steps and record its curve.

    Every ``eval_every`` steps (and at the end) logs the mean training loss
    since the previous record and the training-view PSNR over
    ``eval_frames``. Ray batches depend only on the seed, so runs of
    different variants see the same data.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {sorted(VARIANTS)}")
    cfg = replace(config, model=replace(config.model, encoder=VARIANTS[variant]),
                  train=replace(config.train, iterations=budget))
    trainer = Trainer(dataset, cfg)
    curve = []
    window = []

    def record():
        rep = evaluate_field(trainer.field, trainer.params, dataset, cfg.render, eval_frames)
        curve.append({"variant": variant, "iteration": trainer.iteration,
                      "loss_total": float(np.mean(window)) if window else math.nan,
                      "train_psnr": rep.mean_psnr})
        window.clear()

    def on_step(tr, rec):
        window.append(rec["loss_total"])
        if tr.iteration % eval_every == 0 and tr.iteration < budget:
            record()

    trainer.run(callback=on_step)
    record()
    if out_csv is not None:
        write_curves(out_csv, curve)
    return curve


def write_curves(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CURVE_FIELDS})


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"variant": r["variant"], "iteration": int(r["iteration"]),
                 "loss_total": float(r["loss_total"]), "train_psnr": float(r["train_psnr"])}
                for r in csv.DictReader(fh)]


def iterations_to_reach(curve, target_psnr: float):
    """First recorded iteration whose PSNR is at least ``target_psnr`` (None if never)."""
    for row in curve:
        if row["train_psnr"] >= target_psnr:
            return row["iteration"]
    return None


def plot_curves(path, curves: dict):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rows in curves.items():
        ax.plot([r["iteration"] for r in rows], [r["train_psnr"] for r in rows], label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("training PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
