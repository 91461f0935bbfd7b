"""The scaled end-to-end experiments behind the acceptance checks.

Shared by the threshold calibration script and the acceptance tests so both
measure exactly the same thing.
"""

from __future__ import annotations

import dataclasses
import time
from pathlib import Path

import numpy as np

from selfnerf.config import ExperimentConfig
from selfnerf.evaluate import ablation_run, evaluate_field, iterations_to_reach
from selfnerf.scene_io import SyntheticSceneConfig, load_dataset, synthesize_scene
from selfnerf.training import Trainer

HELDOUT_FRAME = 4
E2E_SEEDS = (0, 1, 2)
TREND_BLOCKS = 4


def acceptance_scene(root) -> Path:
    """The 10-frame 96x96 deforming sphere, generated once under ``root``."""
    path = Path(root) / "synthetic_96"
    if not (path / "cameras.json").exists():
        synthesize_scene(SyntheticSceneConfig(), path)
    return path


def block_means(values, blocks: int = TREND_BLOCKS):
    return [float(np.mean(chunk)) for chunk in np.array_split(np.asarray(values, dtype=np.float64), blocks)]


def strictly_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def e2e_run(data, config: ExperimentConfig, seed: int) -> dict:
    """Train one seed and score it on the training views and one held-out orbit view."""
    dataset = load_dataset(data)
    cfg = dataclasses.replace(config, data=str(data), train=dataclasses.replace(config.train, seed=seed))
    trainer = Trainer(dataset, cfg)
    start = time.perf_counter()
    log = trainer.run()
    wall = time.perf_counter() - start
    train_view = evaluate_field(trainer.field, trainer.params, dataset, cfg.render)
    heldout = evaluate_field(trainer.field, trainer.params, dataset, cfg.render, [HELDOUT_FRAME], view="heldout")
    return {
        "seed": seed,
        "wall_s": wall,
        "train_psnr": train_view.mean_psnr,
        "train_ssim": train_view.mean_ssim,
        "heldout_psnr": heldout.mean_psnr,
        "heldout_ssim": heldout.mean_ssim,
        "loss_blocks": block_means([r["loss_total"] for r in log]),
    }


def median_trend(runs) -> list[float]:
    """Per-block median over seeds of the block-mean total loss."""
    return [float(v) for v in np.median(np.array([r["loss_blocks"] for r in runs]), axis=0)]


def ablation_speedup(data, config: ExperimentConfig, budget: int, eval_every: int, out_dir=None) -> dict:
    """Hash vs vertex-baseline curves and the iteration at which hash reaches the baseline's final PSNR."""
    dataset = load_dataset(data)
    curves, wall = {}, {}
    for variant in ("hash", "vertex-baseline"):
        csv = None if out_dir is None else Path(out_dir) / f"curve_{variant}.csv"
        start = time.perf_counter()
        curves[variant] = ablation_run(dataset, variant, budget, config, eval_every, (0,), csv)
        wall[variant] = time.perf_counter() - start
    target = curves["vertex-baseline"][-1]["train_psnr"]
    return {"curves": curves, "wall_s": wall, "target_psnr": target, "budget": budget,
            "hash_iterations": iterations_to_reach(curves["hash"], target)}
