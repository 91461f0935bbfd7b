"""Dynamic radiance fields over a surface-relative hash-grid encoding.

Points are described relative to the nearest vertices of a tracked surface,
looked up in a multi-resolution hash grid anchored on the canonical surface,
and decoded by a small MLP into density and color for volume rendering.
"""

import os

import numba

# the portable pool; avoids probing for a possibly outdated TBB
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


def set_threads(n: int | None = None) -> int:
    """Cap numba's worker pool; ``None`` reads ``SELFNERF_THREADS`` (unset: all cores)."""
    if n is None:
        value = os.environ.get("SELFNERF_THREADS")
        n = int(value) if value else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


set_threads()

from selfnerf.config import ExperimentConfig, ModelConfig, TrainConfig, load_config  # noqa: E402
from selfnerf.errors import ConfigError, DatasetError, NumericalError, SelfNeRFError  # noqa: E402
from selfnerf.evaluate import EvalReport, ablation_run, evaluate_field, render_sequence  # noqa: E402
from selfnerf.grid_encoding import HashGridConfig, HashGridTables, encode, spatial_hash  # noqa: E402
from selfnerf.metrics import psnr, ssim  # noqa: E402
from selfnerf.radiance_field import DynamicField, FieldConfig  # noqa: E402
from selfnerf.scene_io import SyntheticSceneConfig, load_dataset, synthesize_scene  # noqa: E402
from selfnerf.surface_relative import rel_feature, relative_set  # noqa: E402
from selfnerf.training import Trainer, load_checkpoint, train  # noqa: E402
from selfnerf.volume_renderer import Camera, RenderConfig, composite, render_image  # noqa: E402

__all__ = [
    "Camera", "ConfigError", "DatasetError", "DynamicField", "EvalReport", "ExperimentConfig",
    "FieldConfig", "HashGridConfig", "HashGridTables", "ModelConfig", "NumericalError",
    "RenderConfig", "SelfNeRFError", "SyntheticSceneConfig", "TrainConfig", "Trainer",
    "ablation_run", "composite", "encode", "evaluate_field", "load_checkpoint", "load_config",
    "load_dataset", "psnr", "rel_feature", "relative_set", "render_image", "render_sequence",
    "set_threads", "spatial_hash", "ssim", "synthesize_scene", "train",
]
