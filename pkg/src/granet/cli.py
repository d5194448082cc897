"""Command-line entry point: synth, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as kv
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    IMAGE_SUFFIXES,
    ImageError,
    load_image,
    make_scene,
    resize_long_side,
    save_image,
    scan_dataset,
    synth_rain,
)
from .metrics import psnr, rgb_to_luminance, ssim, summarize
from .model import granet_forward
from .tensor import no_grad
from .train import RunConfig, TrainingError, from_tensor, to_tensor, train, weights_from_checkpoint

log = logging.getLogger("granet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _load_run(args) -> RunConfig:
    values = kv.read_file(args.config) if args.config else {}
    if getattr(args, "no_ra", False):
        values["model.use_ra"] = "false"
    if getattr(args, "no_fine", False):
        values["model.use_fine"] = "false"
    if getattr(args, "no_merge", False):
        values["model.use_merge"] = "false"
    for flag, key in (("max_epochs", "train.max_epochs"), ("max_steps", "train.max_steps"), ("lr", "train.lr")):
        if getattr(args, flag, None) is not None:
            values[key] = str(getattr(args, flag))
    if args.seed is not None:
        values["train.seed"] = str(args.seed)
        values["rain.seed"] = str(args.seed)
    return RunConfig.from_values(values)


def _announce(run: RunConfig, seed: int) -> None:
    print("# resolved configuration")
    print(run.to_text(), end="")
    print(f"# seed = {seed}", flush=True)


def _dataset(root: Path, max_side: int, suffix_pattern: Optional[str]):
    root = Path(root)
    rainy, clean = root / "rainy", root / "clean"
    if not rainy.is_dir() or not clean.is_dir():
        raise UsageError(f"{root} must contain 'rainy' and 'clean' subdirectories")
    pairs = scan_dataset(rainy, clean, suffix_pattern)
    if not pairs:
        raise UsageError(f"no rainy/clean pairs found under {root}")
    out = []
    for p in pairs:
        r, c = p.load(max_side)
        out.append((p.name, r, c))
    return out


def _images_in(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if path.is_file():
        return [path]
    raise UsageError(f"input {path} does not exist")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    run = _load_run(args)
    seed = run.rain.seed
    _announce(run, seed)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    if args.clean_dir is not None:
        clean_dir = Path(args.clean_dir)
        if not clean_dir.is_dir():
            raise UsageError(f"clean directory {clean_dir} does not exist")
        sources = _images_in(clean_dir)
        if not sources and args.count > 0:
            raise UsageError(f"no images in {clean_dir}")
    else:
        sources = []
    h, w = args.size
    out = Path(args.out_dir)
    for sub in ("rainy", "clean", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = ["name,source,streak_pixels,mean_mask"]
    for i in range(args.count):
        if sources:
            src = sources[i % len(sources)]
            clean = resize_long_side(load_image(src), run.train.max_side)
            source = src.name
        else:
            clean = make_scene(h, w, rng)
            source = "procedural"
        rainy, mask = synth_rain(clean, run.rain, rng)
        name = f"{i:05d}.png"
        save_image(out / "rainy" / name, rainy)
        save_image(out / "clean" / name, clean)
        save_image(out / "mask" / name, np.clip(mask, 0, 1))
        lines.append(f"{name},{source},{int((mask[..., 0] > 0).sum())},{float(mask.mean()):.6f}")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {args.count} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run(args)
    _announce(run, run.train.seed)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, run.model.fingerprint())
    train_set = _dataset(args.train_dir, run.train.max_side, args.suffix_pattern)
    val_set = _dataset(args.val_dir, run.train.max_side, args.suffix_pattern)
    print(f"training on {len(train_set)} pairs, validating on {len(val_set)}", flush=True)
    csv_path = args.csv or str(args.out) + ".csv"

    def show(row):
        print(
            f"epoch {row['epoch']:4d}  lr {row['lr']:.3g}  loss {row['train_loss']:.5f}  "
            f"psnr final {row['val_psnr_final']:.3f}  coarse {row['val_psnr_coarse']:.3f}  "
            f"mask {row['val_psnr_mask']:.3f}  ssim {row['val_ssim_final']:.4f}",
            flush=True,
        )

    best = train(run, train_set, val_set, out_path=args.out, csv_path=csv_path, resume=resume, on_epoch=show)
    print(f"best validation PSNR {best.meta.get('best_psnr', math.nan):.3f} dB at epoch {best.epoch}; "
          f"checkpoint {args.out}, metrics {csv_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = RunConfig.from_text(ckpt.config_text)
    if args.config or args.no_ra or args.no_fine or args.no_merge:
        wanted = _load_run(args).model
        if wanted.fingerprint() != ckpt.fingerprint:
            raise CheckpointError(
                f"{args.checkpoint} was trained with model config {ckpt.fingerprint}, "
                f"but the requested config is {wanted.fingerprint()}"
            )
    seed = args.seed if args.seed is not None else run.train.seed
    _announce(run, seed)
    weights = weights_from_checkpoint(ckpt, run.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _images_in(Path(args.input))
    with no_grad():
        for path in inputs:
            img = load_image(path)
            if args.max_side:
                img = resize_long_side(img, args.max_side)
            res = granet_forward(to_tensor(img), run.model, weights)
            save_image(out / f"{path.stem}_final.png", from_tensor(res.final))
            if args.dump_intermediates:
                save_image(out / f"{path.stem}_coarse.png", from_tensor(res.coarse_result))
                # signed mask in [-1, 1] shown as (m + 1) / 2, so mid-gray means zero
                save_image(out / f"{path.stem}_mask.png", (from_tensor(res.mask) + 1.0) / 2.0)
            print(f"{path.name} -> {path.stem}_final.png", flush=True)
    return EXIT_OK


def _pred_key(stem: str, suffix: str) -> str:
    return stem[: -len(suffix)] if suffix and stem.endswith(suffix) else stem


def cmd_eval(args) -> int:
    print(f"# seed = {args.seed if args.seed is not None else 0} (evaluation is deterministic)")
    for d in (args.pred_dir, args.gt_dir):
        if not Path(d).is_dir():
            raise UsageError(f"directory {d} does not exist")
    preds = {_pred_key(p.stem, args.pred_suffix): p for p in _images_in(Path(args.pred_dir))}
    gts = {p.stem: p for p in _images_in(Path(args.gt_dir))}
    common = sorted(set(preds) & set(gts))
    if not common:
        raise UsageError(f"no filenames in common between {args.pred_dir} and {args.gt_dir}")
    for k in sorted(set(preds) ^ set(gts)):
        log.warning("unmatched file %s", (preds.get(k) or gts.get(k)).name)
    psnrs, ssims = [], []
    print(f"{'image':<24} {'PSNR':>9} {'SSIM':>8}")
    for k in common:
        a, b = load_image(preds[k]), load_image(gts[k])
        if a.shape != b.shape:
            log.warning("skipping %s: prediction %s vs ground truth %s", k, a.shape[:2], b.shape[:2])
            continue
        ya, yb = rgb_to_luminance(a), rgb_to_luminance(b)
        p = psnr(ya, yb)
        s = ssim(ya, yb) if min(ya.shape) >= 11 else math.nan
        psnrs.append(p)
        ssims.append(s)
        print(f"{k:<24} {p:>9.3f} {s:>8.4f}")
    if not psnrs:
        raise UsageError("no comparable image pairs")
    ps, ss = summarize(psnrs), summarize([s for s in ssims if not math.isnan(s)])
    print(f"{'mean':<24} {ps['mean']:>9.3f} {ss['mean']:>8.4f}")
    if ps["infinite"]:
        print(f"note: {ps['infinite']} identical pair(s) have infinite PSNR and are excluded from the PSNR mean")
    for label, s in (("PSNR", ps), ("SSIM", ss)):
        print(f"{label} summary: n={s['count']} min={s['min']:.4f} q1={s['q1']:.4f} median={s['median']:.4f} "
              f"q3={s['q3']:.4f} max={s['max']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .tensor import broken_backward
    from .verify import MIN_SIZE, TOLERANCE, run_suite

    if args.size < MIN_SIZE:
        raise UsageError(f"--size must be at least {MIN_SIZE} (three 2x2 pooling stages), got {args.size}")
    run = _load_run(args)
    seed = run.train.seed
    _announce(run, seed)
    groups = tuple(args.only) if args.only else ("primitives", "blocks", "model")

    def report(r):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.group:<11} {r.unit:<22} max rel err {r.max_error:.3e}  "
              f"({r.checked} checked, {r.skipped} kinks skipped, {r.seconds:.1f}s)  {status}", flush=True)

    broken = tuple(args.break_backward or ())
    with broken_backward(*broken):
        results = run_suite(run.model, size=args.size, seed=seed, groups=groups,
                            input_coords=args.input_coords, param_coords=args.param_coords, report=report)
    failed = [r for r in results if not r.passed]
    worst = max(r.max_error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} units below {TOLERANCE:g}; worst {worst:.3e}")
    return EXIT_OK if not failed else EXIT_FAIL


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _size(text: str) -> tuple[int, int]:
    h, sep, w = text.lower().partition("x")
    try:
        hw = (int(h), int(w)) if sep else (int(h), int(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW or N, got {text!r}")
    if min(hw) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return hw


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="granet", description="Coarse-to-fine single-image rain removal.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, ablations=False):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="overrides train.seed and rain.seed")
        if ablations:
            p.add_argument("--no-ra", action="store_true", help="drop the region-aware blocks")
            p.add_argument("--no-fine", action="store_true", help="coarse stage only")
            p.add_argument("--no-merge", action="store_true", help="replace the merging block by a 1x1 conv")

    p = subs.add_parser("synth", help="generate synthetic rainy/clean/mask pairs")
    common(p)
    p.add_argument("--clean-dir", help="clean images to rain on; procedural scenes when omitted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=_size, default=(96, 96), help="procedural scene size, HxW")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train on <dir>/rainy + <dir>/clean pairs")
    common(p, ablations=True)
    p.add_argument("--train-dir", required=True)
    p.add_argument("--val-dir", required=True)
    p.add_argument("--out", required=True, help="best checkpoint; latest state goes to <out>.last")
    p.add_argument("--csv", help="per-epoch metrics (default <out>.csv)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--suffix-pattern", help="regex stripped from rainy stems before pairing")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("infer", help="de-rain an image or a directory")
    common(p, ablations=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-intermediates", action="store_true", help="also write _mask and _coarse images")
    p.add_argument("--max-side", type=int, default=0, help="shrink inputs so the long side is at most this")
    p.set_defaults(func=cmd_infer)

    p = subs.add_parser("eval", help="luminance PSNR/SSIM of predictions against ground truth")
    p.add_argument("--seed", type=int)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--pred-suffix", default="_final", help="stripped from prediction stems before matching")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="finite-difference check of every gradient")
    common(p, ablations=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--only", action="append", choices=("primitives", "blocks", "model"))
    p.add_argument("--input-coords", type=int, help="sample this many input pixels (default all)")
    p.add_argument("--param-coords", type=int, default=3, help="entries checked per parameter tensor")
    p.add_argument("--break-backward", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, kv.ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ImageError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
