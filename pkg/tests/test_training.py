import dataclasses

import numpy as np
import pytest

from conftest import full_pipeline_gradcheck, tiny_experiment
from selfnerf.config import TrainConfig
from selfnerf.errors import CheckpointError, ConfigError, NumericalError
from selfnerf.scene_io import SyntheticSceneConfig, load_dataset, synthesize_scene
from selfnerf.training import (
    AdamState,
    LossReport,
    Trainer,
    adam_step,
    lambda_at,
    load_checkpoint,
    loss_dist,
    loss_mask,
    loss_rgb,
    loss_total,
    lr_at,
    read_loss_log,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def tiny_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synthesize_scene(SyntheticSceneConfig(width=16, height=16, n_frames=2, subdivisions=1), root)
    return load_dataset(root)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    synthesize_scene(SyntheticSceneConfig(width=24, height=24, n_frames=2, subdivisions=2), root)
    return load_dataset(root)


def test_loss_rgb_examples():
    assert loss_rgb(np.full((4, 3), 0.2), np.full((4, 3), 0.2)) == 0.0
    assert loss_rgb([[0.3, 0.0, 0.4]], [[0.0, 0.0, 0.0]]) == pytest.approx(0.5, abs=1e-15)
    assert loss_rgb([[0.3, 0.0, 0.4], [0.0, 1.0, 0.0]], np.zeros((2, 3))) == pytest.approx(1.5, abs=1e-15)


def test_loss_mask_examples():
    m = np.array([0.0, 1.0, 1.0, 0.0])
    assert loss_mask(m, m) == 0.0
    assert loss_mask([0.3], [1.0]) == pytest.approx(0.7)
    assert loss_mask([0.3], [0.0]) == pytest.approx(0.3)


def test_loss_dist_examples():
    assert loss_dist(np.zeros(10), np.linspace(-1, 1, 10), 10.0) == 0.0
    assert loss_dist([2.0], [-0.5], 10.0) == 2.0
    assert loss_dist([1.0], [0.2], 10.0) == pytest.approx(np.e**2, rel=1e-14)
    # the exponent is clamped at 20
    assert loss_dist([1.0], [100.0], 10.0) == pytest.approx(np.exp(20.0))
    assert loss_dist([3.0], [-0.5], 10.0, inside_free=True) == 0.0


def test_lambda_schedule():
    cfg = TrainConfig()
    assert lambda_at(0, cfg) == 1.0 and lambda_at(399, cfg) == 1.0
    assert lambda_at(400, cfg) == 0.1 and lambda_at(cfg.iterations, cfg) == 0.1


def test_lr_schedule():
    cfg = TrainConfig(iterations=2000)
    assert lr_at(0, cfg) == 2e-3
    assert lr_at(2000, cfg) == 2e-5
    assert lr_at(1000, cfg) == pytest.approx(2e-4, rel=1e-12)
    vals = [lr_at(i, cfg) for i in (0, 399, 400, 1999, 2000)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert lr_at(399, cfg) == pytest.approx(2e-3 * 0.01 ** (399 / 2000), rel=1e-12)


def test_loss_total_decomposition():
    cfg = TrainConfig(lambda_mask=0.7, lambda_dist=0.2)
    r = LossReport.combine(1.5, 0.0, 0.0, lambda_at(0, cfg), cfg)
    assert r.total == 1.5 and loss_total(r, 0, cfg) == 1.5
    r = LossReport.combine(1.5, 0.4, 2.0, lambda_at(500, cfg), cfg)
    assert r.geo == pytest.approx(0.7 * 0.4 + 0.2 * 2.0)
    assert r.total == loss_total(r, 500, cfg) == pytest.approx(1.5 + 0.1 * r.geo)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_start=1e-5, lr_end=1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(lr_end=0.0)


def test_adam_zero_gradient_is_noop():
    params = {"a": np.array([1.0, -2.0])}
    new, state = adam_step(params, {"a": np.zeros(2)}, AdamState.zeros(params), 1e-2, TrainConfig())
    assert np.array_equal(new["a"], params["a"]) and state.step == 1


def test_adam_first_step():
    cfg = TrainConfig()
    params = {"w": np.array([0.5])}
    new, _ = adam_step(params, {"w": np.array([1.0])}, AdamState.zeros(params), 1e-3, cfg)
    # m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
    assert new["w"][0] == pytest.approx(0.5 - 1e-3 / (1.0 + 1e-15), abs=1e-16)


def test_adam_rejects_non_finite_gradient():
    params = {"mlp.w0": np.zeros(2), "latents": np.zeros(2)}
    with pytest.raises(NumericalError, match="latents"):
        adam_step(params, {"mlp.w0": np.zeros(2), "latents": np.array([0.0, np.nan])},
                  AdamState.zeros(params), 1e-3, TrainConfig())


def test_full_pipeline_gradients(tiny_ds):
    assert full_pipeline_gradcheck(tiny_ds, n_batches=2, seed=1) < 1e-3


def test_zero_iterations_checkpoint_equals_init(tiny_ds, tmp_path):
    cfg = tiny_experiment(iterations=0)
    tr = Trainer(tiny_ds, cfg)
    init = {k: v.copy() for k, v in tr.params.items()}
    tr.run(tmp_path)
    ck = load_checkpoint(tmp_path / "final.bin")
    assert ck.iteration == 0 and ck.config == cfg
    for k, v in init.items():
        assert np.array_equal(ck.params[k], v.astype(np.float32).astype(np.float64))
    assert read_loss_log(tmp_path / "loss_log.jsonl") == []


def test_checkpoint_round_trip_and_corruption(tiny_ds, tmp_path):
    tr = Trainer(tiny_ds, tiny_experiment(iterations=3))
    tr.run()
    digest = tr.save(tmp_path / "c.bin")
    ck = load_checkpoint(tmp_path / "c.bin")
    assert ck.checksum == digest and ck.iteration == 3 and ck.adam.step == 3
    for k in tr.params:
        np.testing.assert_array_equal(ck.params[k], tr.params[k].astype(np.float32))
        np.testing.assert_array_equal(ck.adam.m[k], tr.adam.m[k].astype(np.float32))
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.bin")


def test_checkpoint_layout(tmp_path):
    cfg = tiny_experiment()
    save_checkpoint(tmp_path / "x.bin", cfg, {"latents": np.ones((2, 3))}, None, 0)
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == b"SNRFCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert np.frombuffer(raw[-32 - 24:-32], "<f4").tolist() == [1.0] * 6


def test_loss_log_records_and_cadence(tiny_ds, tmp_path):
    cfg = tiny_experiment(iterations=6, checkpoint_every=2)
    Trainer(tiny_ds, cfg).run(tmp_path)
    log = read_loss_log(tmp_path / "loss_log.jsonl")
    assert [r["step"] for r in log] == list(range(6))
    keys = {"step", "lr", "lambda", "loss_rgb", "loss_mask", "loss_dist", "loss_geo", "loss_total", "wall_ms"}
    assert all(set(r) == keys for r in log)
    tc = cfg.train
    for r in log:
        assert r["loss_geo"] == pytest.approx(tc.lambda_mask * r["loss_mask"] + tc.lambda_dist * r["loss_dist"])
        assert r["loss_total"] == pytest.approx(r["loss_rgb"] + r["lambda"] * r["loss_geo"])
        assert r["lr"] == lr_at(r["step"], tc)
    assert sorted(p.name for p in tmp_path.glob("*.bin")) == [
        "ckpt_000002.bin", "ckpt_000004.bin", "ckpt_000006.bin", "final.bin"]


def test_same_seed_identical_runs(tiny_ds):
    cfg = tiny_experiment(iterations=5)
    a, b = Trainer(tiny_ds, cfg), Trainer(tiny_ds, cfg)
    la = [{k: v for k, v in r.items() if k != "wall_ms"} for r in a.run()]
    lb = [{k: v for k, v in r.items() if k != "wall_ms"} for r in b.run()]
    assert la == lb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_step(tiny_ds):
    tr = Trainer(tiny_ds, tiny_experiment(iterations=3))
    tr.params["mlp.b2"][:] = np.nan
    with pytest.raises(NumericalError, match="step 0"):
        tr.run()


def test_ray_sampler_forces_in_mask_fraction(small_ds):
    cfg = tiny_experiment(in_mask_fraction=1.0)
    batch = Trainer(small_ds, cfg).sampler.sample(500)
    assert batch["mask"].all()
    cfg = tiny_experiment(in_mask_fraction=0.0)
    batch = Trainer(small_ds, cfg).sampler.sample(2000)
    assert 0 < batch["mask"].mean() < 1


def test_short_training_reduces_loss(small_ds):
    finals = []
    for seed in range(3):
        cfg = tiny_experiment(iterations=200, seed=seed, rays_per_batch=64)
        cfg = dataclasses.replace(cfg, render=dataclasses.replace(cfg.render, n_samples=16))
        log = Trainer(small_ds, cfg).run()
        finals.append(log[-1]["loss_total"] < log[0]["loss_total"])
    assert sum(finals) >= 2
