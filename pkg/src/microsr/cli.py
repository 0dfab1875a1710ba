"""Command-line interface: ``prepare``, ``train``, ``infer`` and ``evaluate``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .checkpoint import CheckpointError, load_checkpoint
from .config import PRESETS, ConfigError, RunConfig, build_config, format_config, read_config_file
from .inference import bicubic_upsample, montage, timed_upscale
from .metrics import evaluate_pair
from .models import ConfigMismatchError
from .trainer import NumericalError, restore_generator, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("microsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append ``(default: ...)`` unless the help text already names its default."""

    def _get_help_string(self, action):
        if "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


# -- prepare -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = Path(args.out)
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs a positive count")
        pairs = data_mod.generate_synthetic_dataset(args.synthetic, args.size, args.noise, args.seed)
        entries = []
        for pair in pairs:
            lr_path, hr_path = out / "lr" / f"{pair.id}.png", out / "hr" / f"{pair.id}.png"
            data_mod.write_image(lr_path, pair.lr, 16)
            data_mod.write_image(hr_path, pair.hr, 16)
            entries.append((lr_path, hr_path))
    elif args.data_dir is not None:
        entries = data_mod.discover_pairs(args.data_dir)
    else:
        raise UsageError("give either --data-dir or --synthetic N")

    valid, problems = [], []
    for lr_path, hr_path in entries:
        try:
            pair = data_mod.load_image_pair(lr_path, hr_path)
        except (data_mod.DataError, OSError) as exc:
            problems.append(f"{lr_path.name}: {exc}")
            continue
        valid.append((lr_path, hr_path, pair.lr.shape))
    for line in problems:
        print(f"invalid pair: {line}", file=sys.stderr)
    if not valid:
        raise data_mod.DataError("no valid image pairs found")
    manifest = out / "manifest.tsv"
    data_mod.write_manifest(manifest, [(lr, hr) for lr, hr, _ in valid])
    shapes = {shape for _, _, shape in valid}
    forecast = sum(data_mod.patches_per_image(shape, args.patch_size, args.overlap) for _, _, shape in valid)
    print(f"pairs: {len(valid)} (invalid: {len(problems)})")
    for shape in sorted(shapes):
        print(f"LR {shape[0]}x{shape[1]}: {data_mod.patches_per_image(shape, args.patch_size, args.overlap)} "
              f"patches/image (patch {args.patch_size}, overlap {args.overlap})")
    print(f"patch forecast: {forecast} total")
    print(f"manifest: {manifest}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

_TRAIN_OVERRIDES = ("manifest", "out_dir", "seed", "phase1_epochs", "phase2_epochs", "lr_initial",
                    "batch_size", "num_rrdb", "base_channels", "growth_channels", "patch_size",
                    "extractor_weights")


def run_config_from_args(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _TRAIN_OVERRIDES}
    if args.epochs is not None:
        for key in ("phase1_epochs", "phase2_epochs"):
            if overrides[key] is None:
                overrides[key] = args.epochs
    if args.phase1_only:
        overrides["phase1_only"] = True
    return build_config(args.preset, file_values, overrides)


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    if not cfg.manifest:
        raise UsageError("--manifest is required (flag or config file)")
    if not Path(cfg.manifest).exists():
        raise data_mod.DataError(f"manifest {cfg.manifest} does not exist")
    dataset = data_mod.load_dataset(cfg.manifest)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(format_config(cfg))
    result = train(cfg.bundle(), dataset, cfg.schedule(), out_dir=out, resume=args.resume,
                   phase1_only=cfg.phase1_only)
    for phase, epoch, vp, vs in result.val_history:
        print(f"phase {phase} epoch {epoch}: val PSNR {vp:.3f} dB, SSIM {vs:.4f}")
    print(f"bicubic baseline: PSNR {result.bicubic[0]:.3f} dB, SSIM {result.bicubic[1]:.4f}")
    if result.collapse_warning:
        print("warning: discriminator collapse detected", file=sys.stderr)
    print(f"checkpoints and metrics.csv written to {out}")
    return EXIT_OK


# -- infer ---------------------------------------------------------------------

def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params, gcfg = restore_generator(ckpt)
    inputs = [Path(p) for p in args.input]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        image, depth = data_mod.read_image(path)
        result, seconds = timed_upscale(params, gcfg, image, tile=args.tile, overlap=args.tile_overlap,
                                        halo=args.halo)
        target = out_dir / f"{path.stem}_x2{path.suffix or '.png'}"
        data_mod.write_image(target, result, depth)
        print(f"{path} {image.shape[1]}x{image.shape[0]} -> {target} "
              f"{result.shape[1]}x{result.shape[0]} in {seconds:.2f} s")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params, gcfg = restore_generator(ckpt)
    extra = []
    for path in args.intermediate or ():
        extra.append(restore_generator(load_checkpoint(path)))
    if extra and len(extra) != 2:
        raise UsageError("--intermediate takes exactly two checkpoints (5-panel montage)")
    pairs = data_mod.load_dataset(args.manifest)
    out_dir = Path(args.out) if args.out else None
    rows = []
    print(f"{'image':<24}{'bicubic PSNR':>14}{'SSIM':>8}{'model PSNR':>12}{'SSIM':>8}")
    for pair in pairs:
        bicubic = np.clip(bicubic_upsample(pair.lr), 0.0, 1.0)
        output, _ = timed_upscale(params, gcfg, pair.lr, tile=args.tile, overlap=args.tile_overlap)
        b, m = evaluate_pair(bicubic, pair.hr, pair.id), evaluate_pair(output, pair.hr, pair.id)
        rows.append((b, m))
        print(f"{pair.id:<24}{b.psnr_db:>14.3f}{b.ssim:>8.4f}{m.psnr_db:>12.3f}{m.ssim:>8.4f}")
        if out_dir is not None and args.montage:
            panels = [bicubic]
            panels += [timed_upscale(p, c, pair.lr, tile=args.tile, overlap=args.tile_overlap)[0]
                       for p, c in extra]
            panels += [output, pair.hr]
            data_mod.write_image(out_dir / f"{pair.id}_montage.png", montage(panels), 8)
    mean = lambda values: float(np.mean(values))
    print(f"{'mean':<24}{mean([b.psnr_db for b, _ in rows]):>14.3f}{mean([b.ssim for b, _ in rows]):>8.4f}"
          f"{mean([m.psnr_db for _, m in rows]):>12.3f}{mean([m.ssim for _, m in rows]):>8.4f}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "metrics.tsv").open("w") as fh:
            fh.write("image\tbicubic_psnr\tbicubic_ssim\tmodel_psnr\tmodel_ssim\n")
            for b, m in rows:
                fh.write(f"{b.image_id}\t{b.psnr_db}\t{b.ssim}\t{m.psnr_db}\t{m.ssim}\n")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig()
    parser = _Parser(prog="microsr", description="Joint denoising and 2x super-resolution for "
                     "grayscale microscopy images.",
                     formatter_class=_DefaultsFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = _DefaultsFormatter

    p = sub.add_parser("prepare", help="validate or synthesize a dataset and write a manifest",
                       formatter_class=fmt)
    p.add_argument("--data-dir", help="directory with lr/ and hr/ subdirectories of matching names")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic pairs instead")
    p.add_argument("--size", type=int, default=128, help="synthetic LR side length")
    p.add_argument("--noise", type=float, default=0.05, help="synthetic noise sigma")
    p.add_argument("--seed", type=int, default=0, help="synthetic data seed")
    p.add_argument("--patch-size", type=int, default=defaults.patch_size, help="LR patch size for the forecast")
    p.add_argument("--overlap", type=float, default=defaults.overlap, help="patch overlap fraction")
    p.add_argument("--out", default="data", help="output directory for manifest (and synthetic images)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="two-phase training", formatter_class=fmt)
    p.add_argument("--manifest", help="dataset manifest written by 'prepare'")
    p.add_argument("--out", dest="out_dir", help=f"run directory (default {defaults.out_dir})")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--preset", choices=sorted(PRESETS), default="final", help="loss configuration")
    p.add_argument("--phase1-only", action="store_true", help="stop after pixel-loss pre-training")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="epochs for each phase")
    p.add_argument("--phase1-epochs", type=int, help=f"pre-training epochs (default {defaults.phase1_epochs})")
    p.add_argument("--phase2-epochs", type=int, help=f"GAN epochs (default {defaults.phase2_epochs})")
    p.add_argument("--lr", dest="lr_initial", type=float, help=f"initial learning rate (default {defaults.lr_initial})")
    p.add_argument("--batch-size", type=int, help=f"batch size (default {defaults.batch_size})")
    p.add_argument("--num-rrdb", type=int, help=f"RRDB blocks (default {defaults.num_rrdb})")
    p.add_argument("--base-channels", type=int, help=f"trunk channels (default {defaults.base_channels})")
    p.add_argument("--growth-channels", type=int, help=f"dense growth channels (default {defaults.growth_channels})")
    p.add_argument("--patch-size", type=int, help=f"LR patch size (default {defaults.patch_size})")
    p.add_argument("--extractor-weights", help="checkpoint container with feature extractor weights")
    p.add_argument("--seed", type=int, help=f"training seed (default {defaults.seed})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve images with a trained generator", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--input", required=True, nargs="+", help="grayscale PNG/TIFF images")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--tile", type=int, default=defaults.tile, help="tile size in LR pixels")
    p.add_argument("--tile-overlap", type=int, default=defaults.tile_overlap, help="tile overlap in LR pixels")
    p.add_argument("--halo", type=int, help="context margin per tile (default: receptive radius, capped)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="PSNR/SSIM against bicubic, optional montages", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--manifest", required=True, help="manifest with HR ground truth")
    p.add_argument("--out", help="directory for metrics.tsv and montages")
    p.add_argument("--montage", action="store_true", help="write bicubic | output | HR montages")
    p.add_argument("--intermediate", nargs="+", metavar="CKPT",
                   help="two extra checkpoints shown between bicubic and output")
    p.add_argument("--tile", type=int, default=defaults.tile, help="tile size in LR pixels")
    p.add_argument("--tile-overlap", type=int, default=defaults.tile_overlap, help="tile overlap in LR pixels")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data_mod.DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
