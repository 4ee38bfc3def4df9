"""Command-line entry points: dataset generation, training, evaluation,
and the variant-comparison matrix.

Every run writes a ``config.echo.tsv`` of all effective settings into
its output directory, so any result can be reproduced from the echo
plus the data directory.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import traceback
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import report as report_mod
from .losses import LossWeights
from .models import TIED_VARIANTS, VARIANTS, ModelConfig, build
from .nn import ParamRegistry
from .train import TrainConfig, checkpoint_load, train, validate_variant_weights


class CliError(Exception):
    """User-facing failure; message printed without a traceback."""


def _parse_range(text: str, flag: str) -> tuple:
    try:
        lo, hi = text.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise CliError(f"{flag} expects lo:hi integers, got {text!r}") from None
    if lo > hi:
        raise CliError(f"{flag}: lo {lo} exceeds hi {hi}")
    return lo, hi


def _parse_floats(text: str, flag: str, count: int = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"{flag} expects comma-separated numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise CliError(f"{flag} expects exactly {count} values, got {len(vals)}")
    return vals


def _parse_ints(text: str, flag: str) -> list:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise CliError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _echo_config(out_dir: Path, settings: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}\t{settings[k]}" for k in sorted(settings)]
    (out_dir / "config.echo.tsv").write_text("".join(l + "\n" for l in lines))


def _read_echo(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"no config.echo.tsv at {path}; is this a training output dir?")
    settings = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("\t")
            settings[k] = v
    return settings


def _resolve_beta(beta, variant):
    """Default the reconstruction weight per variant: on for tied, off otherwise."""
    if beta is not None:
        return beta
    return 1.0 if variant in TIED_VARIANTS else 0.0


# -- gen ---------------------------------------------------------------


def _add_gen_parser(sub):
    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--small-objects", default="1:3", metavar="LO:HI")
    p.add_argument("--small-radius", default="2:4", metavar="LO:HI")
    p.add_argument("--large-prob", type=float, default=0.5)
    p.add_argument("--large-radius", default="8:12", metavar="LO:HI")
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--fg", type=float, default=0.8)
    p.add_argument("--bg", type=float, default=0.2)
    p.add_argument("--force", action="store_true",
                   help="write into an existing non-empty directory")


def _cmd_gen(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output dir {out} is not empty; pass --force to overwrite")
    spec = data_mod.SynthSpec(
        count=args.count,
        height=args.height,
        width=args.width,
        small_objects_per_image=_parse_range(args.small_objects, "--small-objects"),
        small_radius_px=_parse_range(args.small_radius, "--small-radius"),
        large_object_prob=args.large_prob,
        large_radius_px=_parse_range(args.large_radius, "--large-radius"),
        noise_std=args.noise_std,
        intensity_fg=args.fg,
        intensity_bg=args.bg,
    )
    try:
        spec.validate()
    except ValueError as e:
        raise CliError(str(e)) from None
    samples = data_mod.generate(spec, args.seed)
    data_mod.save_dataset(samples, out)
    _echo_config(out, {
        "command": "gen", "out": out, "count": spec.count, "seed": args.seed,
        "height": spec.height, "width": spec.width,
        "small_objects": args.small_objects, "small_radius": args.small_radius,
        "large_prob": spec.large_object_prob, "large_radius": args.large_radius,
        "noise_std": spec.noise_std, "fg": spec.intensity_fg, "bg": spec.intensity_bg,
    })
    print(f"wrote {len(samples)} samples to {out}")
    return 0


# -- train -------------------------------------------------------------


def _add_train_flags(p, epochs_default):
    p.add_argument("--epochs", type=int, default=epochs_default)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr0", type=float, default=3e-4)
    p.add_argument("--decay-factor", type=float, default=0.9)
    p.add_argument("--decay-every", type=int, default=3)
    p.add_argument("--decay-mode", choices=["compound", "single"], default="compound")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--min-delta", type=float, default=1e-5)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--omega", default="1,1,1,1,1", metavar="W0,W1,W2,W3,W4")
    p.add_argument("--beta", type=float, default=None,
                   help="reconstruction weight; defaults to 1 for twi/twae, 0 otherwise")
    p.add_argument("--bce-weight", type=float, default=1.0)
    p.add_argument("--dice-weight", type=float, default=1.0)
    p.add_argument("--detach-mask-branch", action="store_true")
    p.add_argument("--no-share-heads", action="store_true",
                   help="sae/twae: give the mask branch its own heads")
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1.5)
    p.add_argument("--threshold-mode", choices=["floor-ratio", "absolute"],
                   default="floor-ratio")


def _add_train_parser(sub):
    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--model", required=True, choices=VARIANTS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p, epochs_default=200)


def _configs_from_args(args, variant, seed):
    weights = LossWeights(
        alpha=args.alpha, gamma=args.gamma, lam=args.lam,
        omega=_parse_floats(args.omega, "--omega", 5),
        beta=_resolve_beta(args.beta, variant),
        bce_weight=args.bce_weight, dice_weight=args.dice_weight,
    )
    mcfg = ModelConfig(
        variant=variant, depth=args.depth, base_channels=args.base_channels,
        detach_mask_branch=args.detach_mask_branch,
        share_heads=not args.no_share_heads,
    )
    tcfg = TrainConfig(
        lr0=args.lr0, decay_factor=args.decay_factor, decay_every=args.decay_every,
        decay_mode=args.decay_mode, max_epochs=args.epochs,
        early_stop_patience=args.patience, early_stop_min_delta=args.min_delta,
        batch_size=args.batch_size, seed=seed, loss_weights=weights,
        threshold=args.threshold, threshold_mode=args.threshold_mode,
    )
    return mcfg, tcfg


def _echo_train_settings(args, variant, seed, mcfg, tcfg, n):
    return {
        "command": "train", "variant": variant, "data": args.data,
        "seed": seed, "split_seed": args.split_seed, "dataset_size": n,
        "epochs": tcfg.max_epochs, "batch_size": tcfg.batch_size,
        "lr0": tcfg.lr0, "decay_factor": tcfg.decay_factor,
        "decay_every": tcfg.decay_every, "decay_mode": tcfg.decay_mode,
        "patience": tcfg.early_stop_patience, "min_delta": tcfg.early_stop_min_delta,
        "alpha": tcfg.loss_weights.alpha, "gamma": tcfg.loss_weights.gamma,
        "lambda": tcfg.loss_weights.lam,
        "omega": ",".join(str(w) for w in tcfg.loss_weights.omega),
        "beta": tcfg.loss_weights.beta,
        "bce_weight": tcfg.loss_weights.bce_weight,
        "dice_weight": tcfg.loss_weights.dice_weight,
        "detach_mask_branch": mcfg.detach_mask_branch,
        "share_heads": mcfg.share_heads,
        "depth": mcfg.depth, "base_channels": mcfg.base_channels,
        "threshold": tcfg.threshold, "threshold_mode": tcfg.threshold_mode,
    }


def _train_one(args, variant, seed, out_dir) -> tuple:
    """Shared by the train and compare commands; returns (model, report, samples, split)."""
    samples = data_mod.load_dataset(args.data)
    dsplit = data_mod.split(len(samples), args.split_seed)
    mcfg, tcfg = _configs_from_args(args, variant, seed)
    try:
        mcfg.validate()
        tcfg.validate()
        validate_variant_weights(variant, tcfg.loss_weights)
    except ValueError as e:
        raise CliError(str(e)) from None
    model = build(mcfg, ParamRegistry(seed))
    _echo_config(Path(out_dir),
                 _echo_train_settings(args, variant, seed, mcfg, tcfg, len(samples)))
    try:
        rpt = train(model, samples, dsplit, tcfg, out_dir=out_dir)
    except ValueError as e:
        raise CliError(str(e)) from None
    return model, rpt, samples, dsplit


def _cmd_train(args) -> int:
    out = Path(args.out)
    _, rpt, _, _ = _train_one(args, args.model, args.seed, out)
    best = "none" if rpt.best_epoch is None else str(rpt.best_epoch)
    print(f"trained {args.model} for {rpt.epochs_run} epochs "
          f"(best val epoch {best}); outputs in {out}")
    return 0


# -- eval --------------------------------------------------------------


def _add_eval_parser(sub):
    p = sub.add_parser("eval", help="score a trained model on one split")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", default=None)
    p.add_argument("--threshold-px", type=int, default=report_mod.DEFAULT_SMALL_AREA)


def _model_from_dir(model_dir: Path, seed=0):
    echo = _read_echo(model_dir / "config.echo.tsv")
    ckpt = model_dir / "checkpoint"
    if not (ckpt / "manifest.tsv").exists():
        raise CliError(f"no checkpoint under {model_dir}")
    mcfg = ModelConfig(
        variant=echo["variant"],
        depth=int(echo.get("depth", 5)),
        base_channels=int(echo.get("base_channels", 16)),
        detach_mask_branch=echo.get("detach_mask_branch") == "True",
        share_heads=echo.get("share_heads", "True") == "True",
    )
    model = build(mcfg, ParamRegistry(seed))
    checkpoint_load(model, ckpt, strict=True)
    return model, echo


def _cmd_eval(args) -> int:
    model_dir = Path(args.model_dir)
    model, echo = _model_from_dir(model_dir)
    samples = data_mod.load_dataset(args.data)
    n_expected = int(echo.get("dataset_size", len(samples)))
    if len(samples) != n_expected:
        raise CliError(
            f"dataset has {len(samples)} samples but the model was trained with a "
            f"{n_expected}-sample split; indices would leak across splits"
        )
    dsplit = data_mod.split(len(samples), int(echo.get("split_seed", 0)))
    parts = {"train": dsplit.train, "val": dsplit.val, "test": dsplit.test}
    for a in parts:
        for b in parts:
            if a < b and set(parts[a]) & set(parts[b]):
                raise CliError(f"split leakage: {a} and {b} share indices")
    indices = parts[args.split]
    result = report_mod.evaluate(model, samples, indices,
                                 threshold_px=args.threshold_px)
    out = Path(args.out) if args.out else model_dir / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    report_mod.emit_eval(result, out / "eval.csv")
    _echo_config(out, {
        "command": "eval", "model_dir": model_dir, "data": args.data,
        "split": args.split, "threshold_px": args.threshold_px,
        "n_samples": result.n_samples,
    })
    ds = "n/a" if result.dice_small is None else f"{result.dice_small:.4f}"
    print(f"{args.split}: dice {result.dice:.4f}  iou {result.iou:.4f}  "
          f"dice_small {ds}  ({result.n_samples} samples) -> {out / 'eval.csv'}")
    return 0


# -- compare -----------------------------------------------------------


def _add_compare_parser(sub):
    p = sub.add_parser("compare", help="train a variants-by-seeds matrix")
    p.add_argument("--variants", required=True, metavar="V1,V2,...")
    p.add_argument("--seeds", required=True, metavar="S1,S2,...")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--threshold-px", type=int, default=report_mod.DEFAULT_SMALL_AREA)
    _add_train_flags(p, epochs_default=60)


def _run_cell(args, variant, seed, cell_dir):
    model, rpt, samples, dsplit = _train_one(args, variant, seed, cell_dir)
    test_eval = report_mod.evaluate(model, samples, dsplit.test,
                                    threshold_px=args.threshold_px)
    report_mod.emit_eval(test_eval, Path(cell_dir) / "eval.csv")
    val_eval = report_mod.evaluate(model, samples, dsplit.val,
                                   threshold_px=args.threshold_px)
    row = report_mod.ConvergenceRow(
        variant=variant, seed=seed,
        epochs_to_threshold=rpt.epochs_to_threshold(args.threshold,
                                                    args.threshold_mode),
        wall_time_s=rpt.wall_time_s,
        final_val_dice=val_eval.dice,
    )
    return row, test_eval.dice_small


def _mean_std(values):
    if not values:
        return None, None
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else None
    return mean, std


def _cmd_compare(args) -> int:
    variants = args.variants.split(",")
    seeds = _parse_ints(args.seeds, "--seeds")
    for v in variants:
        if v not in VARIANTS:
            raise CliError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    if len(variants) < 2:
        raise CliError(f"compare needs at least 2 variants, got {len(variants)}")
    if len(seeds) < 3:
        raise CliError(f"compare needs at least 3 seeds, got {len(seeds)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cells = [(v, s) for v in variants for s in seeds]
    rows = []
    small_by_cell = {}
    if args.workers > 1:
        import concurrent.futures as cf
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=args.workers, mp_context=ctx) as ex:
            futs = {ex.submit(_run_cell, args, v, s, out / f"{v}_s{s}"): (v, s)
                    for v, s in cells}
            for fut in cf.as_completed(futs):
                v, s = futs[fut]
                try:
                    row, dice_small = fut.result()
                except Exception:
                    print(f"cell {v} seed {s} failed:\n{traceback.format_exc()}",
                          file=sys.stderr)
                    row, dice_small = report_mod.ConvergenceRow(v, s, failed=True), None
                rows.append(row)
                small_by_cell[(v, s)] = dice_small
    else:
        for v, s in cells:
            try:
                row, dice_small = _run_cell(args, v, s, out / f"{v}_s{s}")
            except Exception:
                print(f"cell {v} seed {s} failed:\n{traceback.format_exc()}",
                      file=sys.stderr)
                row, dice_small = report_mod.ConvergenceRow(v, s, failed=True), None
            rows.append(row)
            small_by_cell[(v, s)] = dice_small
            e = row.epochs_to_threshold
            print(f"cell {v} seed {s}: epochs_to_threshold="
                  f"{'not-reached' if e is None else e}, "
                  f"dice_small={'n/a' if dice_small is None else f'{dice_small:.4f}'}")

    rows.sort(key=lambda r: (variants.index(r.variant), seeds.index(r.seed)))
    report_mod.emit_convergence(rows, out / "convergence.csv")

    summary = []
    for v in variants:
        vrows = [r for r in rows if r.variant == v]
        ok = [r for r in vrows if not r.failed]
        smalls = [small_by_cell[(v, r.seed)] for r in ok
                  if small_by_cell.get((v, r.seed)) is not None]
        reached = [r.epochs_to_threshold for r in ok
                   if r.epochs_to_threshold is not None]
        ds_mean, ds_std = _mean_std(smalls)
        ep_mean, ep_std = _mean_std([float(e) for e in reached])
        summary.append([
            v, len(vrows), len(vrows) - len(ok),
            report_mod._fmt(ds_mean), report_mod._fmt(ds_std),
            report_mod._fmt(ep_mean), report_mod._fmt(ep_std), len(reached),
        ])
    report_mod._write_csv(
        out / "summary.csv",
        ["variant", "n_runs", "n_failed", "dice_small_mean", "dice_small_std",
         "epochs_to_threshold_mean", "epochs_to_threshold_std", "n_reached"],
        summary,
    )
    _echo_config(out, {
        "command": "compare", "variants": args.variants, "seeds": args.seeds,
        "data": args.data, "epochs": args.epochs, "batch_size": args.batch_size,
        "split_seed": args.split_seed, "threshold": args.threshold,
        "threshold_mode": args.threshold_mode, "threshold_px": args.threshold_px,
        "workers": args.workers, "lr0": args.lr0,
        "decay_factor": args.decay_factor, "decay_every": args.decay_every,
        "decay_mode": args.decay_mode, "patience": args.patience,
    })
    if any(r.failed for r in rows):
        failed = [(r.variant, r.seed) for r in rows if r.failed]
        print(f"matrix finished with failed cells: {failed}", file=sys.stderr)
        return 1
    print(f"matrix complete: {len(rows)} cells -> {out / 'convergence.csv'}")
    return 0


# -- entry -------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="interseg",
        description="Intermediate-supervision U-Net variants on synthetic "
                    "small-object data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_parser(sub)
    _add_train_parser(sub)
    _add_eval_parser(sub)
    _add_compare_parser(sub)
    args = parser.parse_args(argv)
    handlers = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
                "compare": _cmd_compare}
    try:
        return handlers[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, data_mod.NtsrError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
