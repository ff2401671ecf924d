"""Training loop, learning-rate schedule and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .ran import BBox
from .model import NonFiniteLossError, ReapsModel, branch_predictions, forward_train, run_stages
from .synthdata import Dataset, iterate_batches
from .tensor_core import SGD, Tensor, linear, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "L_A", "L_g", "L_p", "L_final", "acc_final", "mean_iou")


class TrainingAborted(RuntimeError):
    pass


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr0 * decay_factor ** floor(epoch / decay_every)``."""
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    L_A: float
    L_g: float
    L_p: float
    L_final: float
    acc_final: float
    mean_iou: float

    def as_row(self) -> str:
        vals = [str(self.epoch)] + [f"{getattr(self, c):.9g}" for c in LOG_COLUMNS[1:]]
        return "\t".join(vals)


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    path: Path | None = None

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            new = not self.path.exists()
            with open(self.path, "a") as fh:
                if new:
                    fh.write("#" + "\t".join(LOG_COLUMNS) + "\n")
                fh.write(rec.as_row() + "\n")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def mean_iou(boxes: list, truth: np.ndarray | None) -> float:
    if truth is None or not boxes:
        return float("nan")
    return float(np.mean([b.iou(BBox(*(int(v) for v in t))) for b, t in zip(boxes, truth)]))


def train(
    model: ReapsModel,
    dataset: Dataset,
    cfg: TrainConfig,
    log_path=None,
    checkpoint: Callable[[ReapsModel, SGD, int], None] | None = None,
    optimizer: SGD | None = None,
    start_epoch: int = 0,
    max_steps: int | None = None,
) -> TrainingLog:
    """Minibatch SGD with momentum over ``cfg.epochs`` epochs.

    Each epoch draws a seeded permutation, runs ``forward_train`` and updates
    every trainable parameter at ``lr_schedule(epoch)``. ``checkpoint`` is
    called after every completed epoch; on a non-finite loss training stops
    with :class:`TrainingAborted` and the last checkpoint is left alone.
    """
    cfg.validate()
    optimizer = optimizer or SGD(model.trainable_parameters(), lr=cfg.lr0, momentum=cfg.momentum)
    history = TrainingLog(path=Path(log_path) if log_path else None)
    steps = 0
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        sums = {"L_A": 0.0, "L_g": 0.0, "L_p": 0.0, "L_final": 0.0}
        n_seen, n_correct, ious = 0, 0, []
        for idx in iterate_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            optimizer.zero_grad()
            try:
                step = forward_train(dataset.images[idx], dataset.labels[idx], model, cfg)
            except NonFiniteLossError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}; last good checkpoint kept") from exc
            step.loss.backward()
            optimizer.step(lr)
            b = len(idx)
            for k in sums:
                sums[k] += step.losses[k] * b
            n_seen += b
            n_correct += int(step.correct["final"].sum())
            if dataset.boxes is not None:
                ious.append(mean_iou(step.result.stages[0].boxes, dataset.boxes[idx]) * b)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            L_A=sums["L_A"] / n_seen,
            L_g=sums["L_g"] / n_seen,
            L_p=sums["L_p"] / n_seen,
            L_final=sums["L_final"] / n_seen,
            acc_final=n_correct / n_seen,
            mean_iou=sum(ious) / n_seen if ious else float("nan"),
        )
        history.append(rec)
        log.info("%s", rec.as_row())
        if checkpoint is not None:
            checkpoint(model, optimizer, epoch + 1)
        if max_steps is not None and steps >= max_steps:
            break
    if cfg.final_head_mode == "post":
        fit_final_head(model, dataset, cfg)
    return history


def extract_joint(model: ReapsModel, images: np.ndarray, tau: float, labels=None, batch_size: int = 64) -> np.ndarray:
    with no_grad():
        chunks = [
            run_stages(images[i : i + batch_size], model, tau, None if labels is None else labels[i : i + batch_size])
            .joint.data
            for i in range(0, len(images), batch_size)
        ]
    return np.concatenate(chunks)


def fit_final_head(model: ReapsModel, dataset: Dataset, cfg: TrainConfig) -> None:
    """Fit only the joint head on frozen descriptors (``final_head_mode = post``)."""
    feats = extract_joint(model, dataset.images, cfg.tau, dataset.labels)
    opt = SGD(model.joint_parameters(), lr=cfg.lr0, momentum=cfg.momentum)
    for epoch in range(cfg.post_epochs):
        for idx in iterate_batches(len(dataset), cfg.batch_size, cfg.seed + 1, epoch):
            opt.zero_grad()
            logits = linear(Tensor(feats[idx], dtype=feats.dtype), model.joint_weight, model.joint_bias)
            softmax_cross_entropy(logits, dataset.labels[idx]).backward()
            opt.step()


def evaluate(model: ReapsModel, dataset: Dataset, tau: float = 0.1, batch_size: int = 64) -> dict:
    """Accuracy of every head plus mean attention IoU, using predicted classes."""
    hits: dict = {}
    boxes = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            res = run_stages(dataset.images[sl], model, tau=tau)
            for k, pred in branch_predictions(res).items():
                hits.setdefault(k, []).append(pred == dataset.labels[sl])
            boxes.extend(res.stages[0].boxes)
    metrics = {f"{k}_acc": float(np.concatenate(v).mean()) for k, v in hits.items()}
    metrics.setdefault("psn_part_acc", float("nan"))
    metrics["mean_iou"] = mean_iou(boxes, dataset.boxes)
    order = ["final_acc", "ran_acc", "psn_global_acc", "psn_part_acc", "mean_iou"]
    return {k: metrics[k] for k in order} | {k: v for k, v in metrics.items() if k not in order}


def format_metrics(metrics: dict) -> str:
    return "\n".join(f"{k}={v:.6f}" if not math.isnan(v) else f"{k}=nan" for k, v in metrics.items())
