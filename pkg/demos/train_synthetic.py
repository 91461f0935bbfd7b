"""Fit a dynamic field to the synthetic deforming sphere and look at the result.

A small end-to-end tour: generate the scene, train with a reduced budget,
score the training views and one held-out orbit view, then render a short
orbit around frame 0.

    python demos/train_synthetic.py [out_dir] [iterations]
"""

import sys
from pathlib import Path

from selfnerf import ExperimentConfig, SyntheticSceneConfig, Trainer, load_dataset, synthesize_scene
from selfnerf.config import apply_overrides
from selfnerf.evaluate import evaluate_field, render_sequence

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 600

# 64x64 keeps this to a few minutes on one core; the acceptance scene is 96x96
data = out / "scene"
synthesize_scene(SyntheticSceneConfig(width=64, height=64, n_frames=6, subdivisions=3), data)
dataset = load_dataset(data)
print(f"{len(dataset)} frames, {len(dataset.frames[0].surface.points)} surface vertices")

config = apply_overrides(ExperimentConfig(data=str(data)), [
    f"train.iterations={iterations}",
    "train.rays_per_batch=512",
    "render.n_samples=32",
    "model.grid.levels=8",
])

trainer = Trainer(dataset, config)


def progress(tr, rec):
    if rec["step"] % 100 == 0:
        print(f"step {rec['step']:5d}  loss {rec['loss_total']:.4f}  lambda {rec['lambda']}")


trainer.run(out / "run", callback=progress)

# the training views measure fit; the held-out view, half a step further
# along the camera orbit, measures whether the geometry generalizes
for view, frames in (("train", None), ("heldout", [len(dataset) // 2])):
    report = evaluate_field(trainer.field, trainer.params, dataset, config.render, frames, view=view)
    print(report.format())

paths = render_sequence(out / "run" / "final.bin", dataset, "orbit:8", range(0, 1), out / "orbit")
print(f"orbit images in {paths[0].parent}")
