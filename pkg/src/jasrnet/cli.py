"""``jasrnet`` command line: prepare, train, eval, infer, ablate.

Exit codes: 0 success, 1 user error (bad input, config, or data), 2 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, datasets, plots, trainer
from .config import ConfigError, load_grid_config, load_run_config, parse_flat

log = logging.getLogger("jasrnet")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ValueError, FileNotFoundError, IsADirectoryError, PermissionError, ConfigError,
               data.ConfigurationError, data.LandmarkParseError)


class UserError(Exception):
    pass


def _resolve(path, base=None):
    p = Path(path)
    if p.is_absolute() or base is None:
        return p
    return Path(base) / p


def _data_path(path):
    """Relative data paths resolve against $JASRNET_DATA_ROOT when it is set."""
    root = os.environ.get(datasets.DATA_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute() and not p.exists():
        return Path(root) / p
    return p


# --------------------------------------------------------------------------

def cmd_prepare(args) -> list:
    profile = data.get_profile(args.profile)
    records = datasets.read_manifest(_data_path(args.manifest))
    if not records:
        raise UserError(f"manifest {args.manifest} lists no records")
    params = None
    if args.split == "train" and args.copies > 0:
        flip = args.flip_probability if profile.mirror is not None else 0.0
        params = data.AugmentationParams(copies=args.copies, flip_probability=flip)
    ds, errors = datasets.prepare(records, profile, args.seed, params, args.sigma)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    if errors:
        err_log = out / f"{args.split}_errors.log"
        err_log.write_text("".join(f"line {r.line_no}: {r.image} / {r.annotation}: {msg}\n" for r, msg in errors))
        artifacts.append(err_log)
    if ds is not None:
        archive = out / f"{args.split}.jasrdata"
        ds.save(archive)
        artifacts.append(archive)
        split_file = out / "splits.json"
        splits = json.loads(split_file.read_text()) if split_file.exists() else {}
        splits[args.split] = {"archive": archive.name, "count": len(ds), "profile": profile.name,
                              "copies": args.copies if params else 0, "seed": args.seed}
        split_file.write_text(json.dumps(splits, indent=2, sort_keys=True) + "\n")
        artifacts.append(split_file)
        print(f"{args.split}: {len(ds)} samples -> {archive}")
    if errors:
        for r, msg in errors:
            print(f"error: manifest line {r.line_no}: {msg}", file=sys.stderr)
        raise UserError(f"{len(errors)} record(s) failed; see {out / f'{args.split}_errors.log'}")
    return artifacts


def _load_dataset(path) -> datasets.FaceDataset:
    return datasets.FaceDataset.load(_data_path(path))


def cmd_train(args) -> list:
    cfg_path = Path(args.config)
    mc, tc, run = load_run_config(cfg_path)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if "train_data" not in run:
        raise ConfigError("config needs a train_data key")
    train_set = _load_dataset(_resolve(run["train_data"], cfg_path.parent))
    val_set = _load_dataset(_resolve(run["val_data"], cfg_path.parent)) if "val_data" in run else None
    if mc.num_landmarks != train_set.num_landmarks:
        if "num_landmarks" in parse_flat(cfg_path.read_text()):
            raise ConfigError(f"num_landmarks = {mc.num_landmarks} but {run['train_data']} "
                              f"has {train_set.num_landmarks} landmarks")
        mc = replace(mc, num_landmarks=train_set.num_landmarks)
    out = Path(args.out or _resolve(run.get("out", "runs/train"), cfg_path.parent))
    res = trainer.train(mc, tc, train_set, out, val_dataset=val_set, resume=args.resume)
    plots.plot_loss_curve(res.history, out / "loss.png", tc.variant)
    print(f"checkpoint: {res.checkpoint}")
    if res.best_checkpoint:
        print(f"best checkpoint: {res.best_checkpoint}")
    return [res.checkpoint, out / "history.csv", out / "loss.png"]


def cmd_eval(args) -> list:
    ds = _load_dataset(args.data)
    report = trainer.evaluate(args.checkpoint, ds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    s = report.summary()
    print("PSNR {} dB  SSIM {}  NME(x100) {}".format(
        *("-" if s[k] is None else f"{s[k]:.4f}" for k in ("psnr_db", "ssim", "nme_x100"))))
    return [out]


def cmd_infer(args) -> list:
    model = trainer.load_checkpoint(args.checkpoint)[0]
    cfg = model.config
    try:
        image = datasets.load_image(args.image)
    except (OSError, ValueError) as exc:
        raise UserError(f"cannot decode image {args.image}: {exc}") from None
    lr_side = cfg.heatmap_size
    h, w = image.shape[:2]
    if (h, w) != (lr_side, lr_side):
        image, _ = data.crop_and_resize(image, (0, 0, w, h), lr_side)
    lr = np.clip(data.bicubic_resample(image, data.SCALE), 0, 1)
    sr, lms = trainer.predict(model, lr[None])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    artifacts = []
    base = sr[0] if sr is not None else lr
    if sr is not None:
        datasets.save_image(out / f"{stem}_sr.png", sr[0])
        artifacts.append(out / f"{stem}_sr.png")
    if lms is not None:
        plots.draw_landmarks(base, lms[0]).save(out / f"{stem}_landmarks.png")
        (out / f"{stem}.pts").write_text(data.format_landmark_file(lms[0]))
        artifacts += [out / f"{stem}_landmarks.png", out / f"{stem}.pts"]
    for a in artifacts:
        print(a)
    return artifacts


def cmd_ablate(args) -> list:
    grid, extra = load_grid_config(args.config)
    if args.seed is not None:
        grid = replace(grid, train=replace(grid.train, seed=args.seed))
    ds = _load_dataset(args.data)
    grid = replace(grid, model=replace(grid.model, num_landmarks=ds.num_landmarks))
    test = _load_dataset(args.test_data) if args.test_data else None
    out_csv = Path(args.out)
    work = out_csv.parent / (out_csv.stem + "_runs")
    rows, histories = trainer.run_ablation_grid(grid, ds, work, test)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    trainer.write_grid_csv(out_csv, rows)
    artifacts = [out_csv]
    plot_dir = out_csv.parent / (out_csv.stem + "_plots")
    plot_dir.mkdir(exist_ok=True)
    for name, hist in histories.items():
        p = plot_dir / (name.replace(":", "_") + ".png")
        plots.plot_loss_curve(hist, p, name)
        artifacts.append(p)
    print(f"grid: {len(rows)} rows -> {out_csv}")
    return artifacts


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="jasrnet",
        description="Joint face super-resolution (16x16 -> 128x128) and landmark heatmap regression.",
        epilog=f"Relative data paths fall back to ${datasets.DATA_ROOT_ENV} when set.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="crop, resize, degrade and augment a manifest into an archive")
    sp.add_argument("--manifest", required=True, help="tab-separated manifest: image, annotation[, x0, y0, x1, y1]")
    sp.add_argument("--profile", default="300w", help="300w, aflw, helen or custom:K (default 300w)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--split", default="train", help="split name; only 'train' is augmented (default train)")
    sp.add_argument("--copies", type=int, default=15, help="augmented copies per record (default 15)")
    sp.add_argument("--flip-probability", type=float, default=0.5)
    sp.add_argument("--sigma", type=float, default=data.DEFAULT_SIGMA, help="heatmap Gaussian width in cells")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train one variant from a key/value config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None, help="override the config's seed")
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--out", default=None, help="run directory (overrides the config's out)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on a prepared archive")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="metrics CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="super-resolve one image and localize its landmarks")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("ablate", help="train and score the ablation grid")
    sp.add_argument("--config", required=True, help="grid key/value config")
    sp.add_argument("--data", required=True, help="prepared training archive")
    sp.add_argument("--test-data", default=None, help="prepared evaluation archive (default: 10%% holdout)")
    sp.add_argument("--out", required=True, help="grid CSV path")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UserError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except trainer.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
