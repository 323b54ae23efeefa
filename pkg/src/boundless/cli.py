"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import torch

from . import datapipe
from .conditioning import EmbeddingCache, EmbeddingStats, fit_stats, make_provider, precompute_cache
from .config import PRESETS, RunConfig, flatten
from .errors import BoundlessError, ConfigError, DataError
from .evaluation import EvalReport, complete, evaluate_model, evaluate_predictions
from .masking import build_mask
from .panorama import PanoramaConfig, extend_left, generate_panorama
from .trainer import TrainingData, load_generator, train

log = logging.getLogger("boundless")


def _config_epilog() -> str:
    lines = ["config keys (defaults reproduce the reference setup):"]
    lines += [f"  {key} = {value!r}" for key, value in flatten(RunConfig())]
    return "\n".join(lines)


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else PRESETS[args.preset]()
    return cfg.with_overrides(args.set)


def _provider(cfg: RunConfig):
    e = cfg.embedding
    return make_provider(e.provider, e.embed_dim, e.seed, e.weights_path)


# ---------------------------------------------------------------- commands

def cmd_prepare_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    root = args.root or d.root
    if d.synthetic:
        root = datapipe.write_synthetic_dataset(out / "images", d.synthetic_per_class, d.image_size, d.seed)
    if root is None:
        raise ConfigError("no dataset root given (use --root, data.root, or data.synthetic=true)")
    train_m, eval_m = datapipe.build_manifest(root, d.classes, d.top_k, d.holdout_per_class, d.seed,
                                              cfg.image_size)
    train_m.save(out / "train.tsv")
    eval_m.save(out / "eval.tsv")
    print(f"train: {len(train_m)} images, eval: {len(eval_m)} images -> {out}")
    return 0


def cmd_precompute(args, cfg: RunConfig) -> int:
    manifest = datapipe.DatasetManifest.load(args.manifest)
    provider = _provider(cfg)
    ids, images = datapipe.load_manifest_images(manifest, cfg.data.on_error)
    stats = fit_stats(provider, images)
    out = Path(args.out)
    stats.save(out / "stats.bin")
    cache = precompute_cache(provider, stats, zip(ids, images), out / "embeddings.bin")
    print(f"cached {len(cache)} conditioning vectors (dim {cache.embed_dim}) -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    spec = cfg.model_spec()
    manifest = datapipe.DatasetManifest.load(args.manifest)
    if manifest.target_size != cfg.image_size:
        raise DataError(f"manifest target size {manifest.target_size} differs from data.image_size")
    ids, images = datapipe.load_manifest_images(manifest, cfg.data.on_error)
    cache = None
    if spec.resolved().discriminator.use_conditioning:
        if not args.cache:
            raise DataError("conditioning is enabled: pass --cache (see `boundless precompute`)")
        stats = EmbeddingStats.load(args.stats) if args.stats else None
        cache = EmbeddingCache.load(args.cache, stats)
    provider = _provider(cfg) if spec.losses.perc_weight > 0 else None
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        run_dir = Path(args.runs_root) / f"{cfg.digest()}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    ckpt = train(spec, TrainingData(ids, images), cache, run_dir, resume_from=args.resume,
                 provider=provider, meta={"run_config": cfg.to_dict()})
    print(f"trained to step {ckpt.step}; run directory {run_dir}")
    return 0


def _model_size(generator) -> tuple[int, int]:
    return tuple(generator.input_size)


def _extend_image(generator, image: torch.Tensor, cfg: RunConfig, side: str) -> torch.Tensor:
    size = _model_size(generator)
    if tuple(image.shape[-2:]) != size:
        raise DataError(f"input is {tuple(image.shape[-2:])}, the model was trained on {size}")
    if side == "left":
        image = torch.flip(image, dims=(-1,))
    mask = build_mask(cfg.eval_mask_spec(), *size)
    out = complete(generator, image[None], mask)[0]
    return torch.flip(out, dims=(-1,)) if side == "left" else out


def cmd_extend(args, cfg: RunConfig) -> int:
    generator = load_generator(args.checkpoint)
    if args.frames:
        frames = sorted(p for p in Path(args.frames).iterdir() if p.suffix.lower() in datapipe.IMAGE_SUFFIXES)
        if not frames:
            raise DataError(f"no image files in {args.frames}")
        out_dir = Path(args.output)
        for frame in frames:
            result = _extend_image(generator, datapipe.read_image(frame), cfg, args.side)
            datapipe.save_image(out_dir / (frame.stem + ".png"), result)
        print(f"extended {len(frames)} frames -> {out_dir}")
        return 0
    if not args.input:
        raise ConfigError("extend needs --input or --frames")
    result = _extend_image(generator, datapipe.read_image(args.input), cfg, args.side)
    datapipe.save_image(args.output, result)
    print(f"wrote {args.output}")
    return 0


def cmd_panorama(args, cfg: RunConfig) -> int:
    generator = load_generator(args.checkpoint)
    pcfg = cfg.panorama_config()
    if (pcfg.window_height, pcfg.window_width) != _model_size(generator):
        raise ConfigError(
            f"panorama window {pcfg.window_height}x{pcfg.window_width} must equal the model input "
            f"{_model_size(generator)}"
        )
    seed = datapipe.read_image(args.input)
    dump = Path(args.dump_steps) if args.dump_steps else None

    def on_step(step, pano):
        if dump is not None:
            datapipe.save_image(dump / f"step_{step:02d}.png", pano)

    pano = generate_panorama(generator, seed, pcfg, on_step)
    datapipe.save_image(args.output, pano)
    print(f"panorama {pano.shape[-2]}x{pano.shape[-1]} -> {args.output}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = datapipe.DatasetManifest.load(args.manifest)
    ids, truth = datapipe.load_manifest_images(manifest, cfg.data.on_error)
    provider = _provider(cfg)
    spec = cfg.eval_mask_spec()
    if args.predictions:
        pred_root = Path(args.predictions)
        preds = torch.stack([datapipe.load_image(pred_root / rec.path, manifest.target_size)
                             for rec in manifest.records])
        mask = build_mask(spec, *manifest.target_size)
        report = evaluate_predictions(ids, truth, preds, mask, provider, cfg.evaluation.batch_size)
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint or --predictions")
        generator = load_generator(args.checkpoint)
        report = evaluate_model(generator, ids, truth, spec, provider, cfg.evaluation.batch_size)
    report.write(args.output)
    print(f"fid_full_image={report.fid_full_image:.6g} mean_masked_psnr={report.mean_masked_psnr:.4f}")
    return 0


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "precompute": cmd_precompute,
    "train": cmd_train,
    "extend": cmd_extend,
    "panorama": cmd_panorama,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), default="full",
                        help="base configuration when --config is not given")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable), e.g. training.batch_size=64")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="boundless", description="Image-extension GAN toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(parents=[common], epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)

    p = sub.add_parser("prepare-data", help="build train/eval manifests", **kw)
    p.add_argument("--root", help="directory of class-named image folders")
    p.add_argument("--out", required=True, help="output directory for manifests")

    p = sub.add_parser("precompute", help="fit embedding stats and cache conditioning vectors", **kw)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train generator and discriminator", **kw)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", help="embedding cache from `precompute`")
    p.add_argument("--stats", help="stats file the cache must match")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--run-dir", help="explicit run directory (default: <runs-root>/<config hash>-<time>)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("extend", help="extend an image (or each frame of a directory)", **kw)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input")
    p.add_argument("--frames", help="directory of frames, each extended independently")
    p.add_argument("--output", required=True, help="output image (or directory with --frames)")
    p.add_argument("--side", choices=("right", "left"), default="right")

    p = sub.add_parser("panorama", help="recursively extend a seed image", **kw)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--dump-steps", help="directory for step-indexed intermediate panoramas")

    p = sub.add_parser("evaluate", help="diagonal FID and masked PSNR on an eval manifest", **kw)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of finished outputs laid out like the dataset root")
    p.add_argument("--output", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](args, cfg)
    except BoundlessError as exc:
        print(f"boundless {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
