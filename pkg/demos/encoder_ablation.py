"""Hash grid versus a per-vertex feature bank, same seed and same ray batches.

Both variants see identical data; only the encoder changes. The script prints
how many iterations the hash grid needs to match the bank's final PSNR and
writes the curves (and a plot, when matplotlib is installed).

    python demos/encoder_ablation.py [out_dir] [budget]
"""

import sys
from pathlib import Path

from selfnerf import ExperimentConfig, SyntheticSceneConfig, load_dataset, synthesize_scene
from selfnerf.config import apply_overrides
from selfnerf.evaluate import ablation_run, iterations_to_reach, plot_curves, write_curves

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_ablation")
budget = int(sys.argv[2]) if len(sys.argv) > 2 else 500

data = out / "scene"
synthesize_scene(SyntheticSceneConfig(width=64, height=64, n_frames=4, subdivisions=3), data)
dataset = load_dataset(data)
config = apply_overrides(ExperimentConfig(data=str(data)),
                         ["train.rays_per_batch=512", "render.n_samples=32", "model.grid.levels=8"])

curves = {}
for variant in ("hash", "vertex-baseline"):
    curves[variant] = ablation_run(dataset, variant, budget, config, eval_every=50)
    print(f"{variant:16s} final PSNR {curves[variant][-1]['train_psnr']:.2f} dB")

target = curves["vertex-baseline"][-1]["train_psnr"]
print("hash grid reaches it at iteration", iterations_to_reach(curves["hash"], target))

write_curves(out / "curves.csv", curves["hash"] + curves["vertex-baseline"])
try:
    plot_curves(out / "curves.png", curves)
except ImportError:
    print("matplotlib not installed, skipping the plot")
