"""Command-line entry point: ``selfnerf {synth,train,render,eval,ablate}``.

Exit codes: 0 on success, 2 for invalid input (config, dataset, checkpoint,
frame range), 3 when training aborts on a non-finite loss or gradient.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from selfnerf import set_threads
from selfnerf.config import ExperimentConfig, apply_overrides, load_config, save_config
from selfnerf.errors import ConfigError, NumericalError
from selfnerf.evaluate import (VARIANTS, ablation_run, evaluate_field, field_from_checkpoint, iterations_to_reach,
                               parse_frame_range, plot_curves, render_sequence, write_curves)
from selfnerf.scene_io import SyntheticSceneConfig, load_dataset, synthesize_scene
from selfnerf.training import Trainer

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, data=str(args.data))
    if not cfg.data:
        raise ConfigError("no dataset given (--data or 'data' in the config)")
    return cfg


def _synth_config(args) -> SyntheticSceneConfig:
    values = dataclasses.asdict(SyntheticSceneConfig())
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in values:
            raise ConfigError(f"unknown synthetic scene setting {key!r}")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    if args.seed is not None:
        values["seed"] = args.seed
    values["checker_cells"] = tuple(values["checker_cells"])
    return SyntheticSceneConfig(**values)


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    synthesize_scene(cfg, args.out)
    print(f"wrote {cfg.n_frames} frames ({cfg.width}x{cfg.height}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, iterations=args.iterations))
    dataset = load_dataset(cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    every = max(1, args.log_every)

    def progress(trainer, rec):
        if rec["step"] % every == 0 or trainer.iteration == cfg.train.iterations:
            print(f"step {rec['step']:6d}  loss {rec['loss_total']:.5f}  rgb {rec['loss_rgb']:.5f}  "
                  f"mask {rec['loss_mask']:.5f}  lr {rec['lr']:.2e}", flush=True)

    trainer = Trainer(dataset, cfg)
    trainer.run(out, callback=None if args.quiet else progress)
    print(f"checkpoint: {out / 'final.bin'}")
    return EXIT_OK


def _latent_source(text):
    if text is None:
        return None
    if not text.startswith("from:"):
        raise ConfigError("--latent expects from:FRAME")
    return int(text[5:])


def cmd_render(args) -> int:
    dataset = load_dataset(args.data)
    paths = render_sequence(args.checkpoint, dataset, args.cameras, parse_frame_range(args.frames), args.out,
                            hdr=args.hdr, latent_from=_latent_source(args.latent))
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    ckpt, field, params = field_from_checkpoint(args.checkpoint, dataset)
    frames = parse_frame_range(args.frames) if args.frames else range(len(dataset))
    report = evaluate_field(field, params, dataset, ckpt.config.render, frames, args.view)
    print(report.format())
    out = Path(args.json) if args.json else Path(args.checkpoint).with_name(f"eval_{args.view}.json")
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"report: {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    dataset = load_dataset(cfg.data)
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = tuple(parse_frame_range(args.eval_frames))
    curves = {}
    for v in variants:
        curves[v] = ablation_run(dataset, v, args.budget, cfg, args.eval_every, frames, out / f"curve_{v}.csv")
        last = curves[v][-1]
        print(f"{v:20s} final psnr {last['train_psnr']:.3f} dB at iteration {last['iteration']}", flush=True)
    write_curves(out / "curves.csv", [row for v in variants for row in curves[v]])
    if "hash" in curves and "vertex-baseline" in curves:
        target = curves["vertex-baseline"][-1]["train_psnr"]
        hit = iterations_to_reach(curves["hash"], target)
        print(f"hash reaches the vertex-baseline final psnr ({target:.3f} dB) at iteration {hit}")
    if args.plot:
        plot_curves(out / "curves.png", curves)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfnerf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.iterations=500 (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true", help="single worker thread")
        if data:
            p.add_argument("--data", help="dataset directory")

    p = sub.add_parser("synth", help="generate the synthetic deforming-sphere dataset")
    p.add_argument("out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="synthetic scene setting, e.g. n_frames=4")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a field to a dataset")
    common(p)
    p.add_argument("--out", required=True, help="run directory (loss log, checkpoints)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cameras", default="train", help="train | orbit:N | cameras JSON file")
    p.add_argument("--frames", default="0:1", help="frame range a:b (half-open) or a single index")
    p.add_argument("--latent", help="from:FRAME, reuse a trained latent for frames past the trained range")
    p.add_argument("--hdr", action="store_true", help="write raw float32 images instead of PNG")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM inside the mask bounding box")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--view", choices=("train", "heldout"), default="train")
    p.add_argument("--frames", help="frame range a:b (default: all)")
    p.add_argument("--json", help="report path (default: next to the checkpoint)")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare encoders under identical seeds and batches")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--variants", default="hash,vertex-baseline")
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--eval-frames", default="0:1")
    p.add_argument("--plot", action="store_true", help="also write curves.png")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "deterministic", False):
        set_threads(1)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
