"""``reaps`` command line: train, eval, cam, gradcheck.

Text results go to stdout as ``key=value`` lines (or tab-separated rows),
figures are written as PNG files next to them, and every error goes to
stderr with a non-zero exit code.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_model, save_checkpoint
from .config import ABLATIONS, RunConfig
from .imageio import ImageFormatError, read_ppm, scale_to_gray, write_pgm
from .model import build_model
from .ran import BBox, attend, threshold_mask
from .synthdata import Dataset, generate_dataset, load_directory_dataset
from .tensor_core import SGD, Tensor, bilinear_resize
from .train import TrainingAborted, evaluate, format_metrics, train

log = logging.getLogger("reaps")

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.tsv"


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reaps", description="Region attention + part sequence classifier")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=False):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--checkpoint", type=Path, required=checkpoint_required)

    p = sub.add_parser("train", help="train a model and evaluate it on the test split")
    common(p)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--stages", type=int, help="number of part-sequence stages (2+ gives REAPS+)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint_required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("cam", help="export class maps, masks and boxes")
    common(p, checkpoint_required=True)
    p.add_argument("--image", type=Path, action="append", default=[], help="PPM image (repeatable)")
    p.add_argument("--count", type=int, default=8, help="test samples to export when no --image is given")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--class-choice", choices=("predicted", "label"), default="predicted")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and a tiny model")
    p.add_argument("--out", type=Path, help="write a PNG summary here")
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_text(args.config.read_text(), base=cfg)
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key, value)
    if getattr(args, "ablation", None):
        cfg.model.ablation = args.ablation
    if getattr(args, "stages", None) is not None:
        cfg.model.stages = args.stages
    if getattr(args, "out", None):
        cfg.out = str(args.out)
    cfg.validate()
    return cfg


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Synthetic splits, or ``data_dir/train`` and ``data_dir/test`` image folders."""
    if not cfg.data_dir:
        return generate_dataset(cfg.synth)
    root = Path(cfg.data_dir)
    splits = [root / "train", root / "test"]
    for s in splits:
        if not s.is_dir():
            raise UsageError(f"{root}: expected train/ and test/ subdirectories of class folders")
    train_ds, test_ds = (load_directory_dataset(s, cfg.synth.image_size) for s in splits)
    if train_ds.class_names != test_ds.class_names:
        raise UsageError(f"{root}: train and test class folders differ")
    return train_ds, test_ds


def _echo_config(cfg: RunConfig) -> None:
    for line in cfg.to_text().splitlines():
        print(f"# {line}")


def cmd_train(args) -> int:
    from .plotting import plot_branch_accuracy, plot_training_curves

    base = None
    if args.checkpoint:
        model, ck = load_model(args.checkpoint)
        base = ck.config
    cfg = resolve_config(args, base)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    _echo_config(cfg)

    train_ds, test_ds = load_splits(cfg)
    log.info("train: %d images, test: %d images, %d classes", len(train_ds), len(test_ds), train_ds.num_classes)

    start = 0
    if args.checkpoint:
        optimizer = SGD(model.trainable_parameters(), lr=cfg.train.lr0, momentum=cfg.train.momentum)
        optimizer.state.velocity.update(ck.velocities)
        start = ck.epoch
        log.info("resuming %s at epoch %d", args.checkpoint, start)
    else:
        model = build_model(cfg.model, train_ds.num_classes, cfg.synth.image_size, seed=cfg.train.seed)
        optimizer = None
        (out / LOG_NAME).unlink(missing_ok=True)

    def keep(m, opt, epoch):
        save_checkpoint(out / CHECKPOINT_NAME, m, cfg, epoch, opt.state, train_ds.class_names)

    history = train(
        model, train_ds, cfg.train, log_path=out / LOG_NAME, checkpoint=keep, optimizer=optimizer, start_epoch=start
    )
    if history.records:
        plot_training_curves(history.records, out / "curves.png")
    if cfg.train.epochs == start:
        keep(model, optimizer or SGD(model.trainable_parameters(), cfg.train.lr0), start)
    metrics = evaluate(model, test_ds, tau=cfg.train.tau)
    text = format_metrics(metrics)
    (out / "metrics.txt").write_text(text + "\n")
    plot_branch_accuracy(metrics, out / "accuracy.png", title=f"{cfg.model.ablation}, {cfg.model.stages} stage(s)")
    print(text)
    return 0


def cmd_eval(args) -> int:
    model, ck = load_model(args.checkpoint)
    cfg = resolve_config(args, ck.config)
    train_ds, test_ds = load_splits(cfg)
    ds = test_ds if args.split == "test" else train_ds
    if ds.num_classes != model.num_classes:
        raise UsageError(f"{args.checkpoint}: model has {model.num_classes} classes, data has {ds.num_classes}")
    metrics = evaluate(model, ds, tau=cfg.train.tau)
    text = format_metrics(metrics)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.txt").write_text(text + "\n")
    print(text)
    return 0


def _load_image(path: Path, size: int) -> np.ndarray:
    try:
        rgb = read_ppm(path)
    except (OSError, ImageFormatError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    img = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    if img.shape[1:] != (size, size):
        img = bilinear_resize(Tensor(img), size, size).data
    return img


def cmd_cam(args) -> int:
    from .plotting import plot_attention

    model, ck = load_model(args.checkpoint)
    cfg = resolve_config(args, ck.config)
    out = Path(args.out or Path(cfg.out) / "cam")
    out.mkdir(parents=True, exist_ok=True)
    items = []  # (name, image, label or None, truth box or None)
    if args.image:
        for p in args.image:
            items.append((p.stem, _load_image(p, model.image_size), None, None))
    else:
        _, test_ds = load_splits(cfg)
        stop = min(len(test_ds), args.start + args.count)
        for i in range(args.start, stop):
            s = test_ds[i]
            items.append((f"test_{i:05d}", s.image, s.label, s.object_box))
    if args.class_choice == "label" and any(it[2] is None for it in items):
        raise UsageError("--class-choice label needs dataset samples, not --image files")

    crop = (cfg.model.crop_size, cfg.model.crop_size)
    print("#name\tclass\tx0\ty0\tx1\ty1\tiou")
    for name, img, label, truth in items:
        att = attend(img, model.ran, args.class_choice, label, cfg.train.tau, out=crop)
        write_pgm(out / f"{name}.pgm", scale_to_gray(att.cam.values))
        mask = threshold_mask(att.cam, cfg.train.tau).bits
        write_pgm(out / f"{name}_mask.pgm", mask.astype(np.uint8) * 255)
        (out / f"{name}.bbox").write_text(" ".join(str(v) for v in att.box.as_tuple()) + "\n")
        cam_up = bilinear_resize(Tensor(att.cam.values[None].astype(np.float32)), *img.shape[1:]).data[0]
        cls = ck.class_names[att.cam.class_index] if ck.class_names else str(att.cam.class_index)
        plot_attention(img, cam_up, att.box, att.region.data, out / f"{name}.png", truth=truth, title=cls)
        iou = f"{att.box.iou(truth):.4f}" if isinstance(truth, BBox) else "nan"
        print("\t".join([name, cls, *(str(v) for v in att.box.as_tuple()), iou]))
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import GRAPH_TOL, PRIMITIVE_TOL, run_checks

    results = run_checks(seed=args.seed)
    print("#op\tmax_rel_error\ttol\tstatus")
    for r in results:
        print(f"{r.name}\t{r.worst:.3e}\t{r.report.tol:g}\t{'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"passed={len(results) - len(failed)}")
    print(f"failed={len(failed)}")
    if args.out:
        from .plotting import plot_gradcheck

        args.out.mkdir(parents=True, exist_ok=True)
        plot_gradcheck([(r.name, r.worst, r.report.tol) for r in results], args.out / "gradcheck.png", PRIMITIVE_TOL)
    if failed:
        print(f"reaps gradcheck: {len(failed)} check(s) failed: {', '.join(failed)} (graph tol {GRAPH_TOL:g})", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "cam": cmd_cam, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (CheckpointError, UsageError, TrainingAborted) as exc:
        print(f"reaps {args.command}: error: {exc}", file=sys.stderr)
    except (KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"reaps {args.command}: error: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
