"""SGD-with-momentum training loop, LR schedules, and evaluation passes.

One optimizer step per batch: augment, voxelize, forward, combined loss,
backward, update.  Everything is seeded, so a (seed, config, data) triple
reproduces the full loss trajectory.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data import AugmentationConfig, LabeledPointCloud, augment
from .errors import ConfigurationError, NonFiniteGradientError
from .losses import IGNORE_LABEL, LossWeights, combined_loss
from .metrics import ConfusionMatrix, MetricReport, build_report, miou_by_distance
from .network import MssNet
from .sparse import SparseTensor, devoxelize, voxelize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.24
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 1
    batch_size: int = 1
    schedule: str = "cosine"   # cosine-to-zero | step
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if self.schedule not in ("cosine", "step"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


class SgdMomentum:
    """v <- momentum * v + g + weight_decay * w;  w <- w - lr * v."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params: list[Parameter] = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocities):
            if not np.isfinite(p.grad).all():
                raise NonFiniteGradientError(
                    f"non-finite gradient in parameter {p.name!r} "
                    f"(|g|_max={np.abs(p.grad[np.isfinite(p.grad)]).max(initial=0.0):.3e})"
                )
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def schedule_lr(config: TrainConfig, step: int, total_steps: int) -> float:
    t = min(step, total_steps) / max(total_steps, 1)
    if config.schedule == "cosine":
        return config.lr * 0.5 * (1.0 + np.cos(np.pi * t))
    if t < 0.6:
        return config.lr
    if t < 0.85:
        return config.lr * 0.1
    return config.lr * 0.01


def assemble_batch(
    scenes: list[LabeledPointCloud],
    feature_fn,
    voxel_size: float,
):
    """Voxelize several scenes into one batched sparse tensor."""
    positions = np.vstack([s.positions for s in scenes])
    features = np.vstack([feature_fn(s) for s in scenes])
    labels = np.concatenate([s.labels for s in scenes])
    batch = np.concatenate([
        np.full(len(s), b, dtype=np.int64) for b, s in enumerate(scenes)
    ])
    return voxelize(positions, features, labels, voxel_size, batch_index=batch)


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    steps: int


@dataclass
class Trainer:
    net: MssNet
    scenes: list[LabeledPointCloud]
    feature_fn: callable
    config: TrainConfig
    voxel_size: float
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augmentation: AugmentationConfig | None = None
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        self.optimizer = SgdMomentum(
            self.net.parameters(), self.config.momentum, self.config.weight_decay
        )
        self.global_step = 0
        self.history: list[dict] = []

    def total_steps(self) -> int:
        batches = -(-len(self.scenes) // self.config.batch_size)
        return self.config.epochs * batches

    def _epoch_batches(self, epoch: int):
        order = np.random.default_rng(self.config.seed + 7919 * epoch).permutation(
            len(self.scenes)
        )
        bs = self.config.batch_size
        for i in range(0, len(order), bs):
            yield [int(j) for j in order[i:i + bs]]

    def _augmented(self, scene_idx: int, epoch: int) -> LabeledPointCloud:
        scene = self.scenes[scene_idx]
        if self.augmentation is None:
            return scene
        seed = (self.config.seed * 1_000_003 + epoch * 10_007 + scene_idx) & 0x7FFFFFFF
        return augment(scene, self.augmentation, seed)

    def train_step(self, scenes: list[LabeledPointCloud], lr: float) -> dict:
        self.net.train()
        vox = assemble_batch(scenes, self.feature_fn, self.voxel_size)
        self.optimizer.zero_grad()
        with ad.Tape() as tape:
            logits = self.net.forward(vox.tensor)
            loss, parts = combined_loss(
                logits.features, vox.voxel_labels, self.loss_weights,
                self.ignore_label,
            )
            tape.backward(loss)
        self.optimizer.step(lr)
        return {"loss": float(loss.data), **parts}

    def train_epoch(self, epoch: int, max_steps: int | None = None) -> EpochSummary:
        total = self.total_steps()
        losses = []
        for batch_idxs in self._epoch_batches(epoch):
            if max_steps is not None and self.global_step >= max_steps:
                break
            lr = schedule_lr(self.config, self.global_step, total)
            scenes = [self._augmented(i, epoch) for i in batch_idxs]
            record = self.train_step(scenes, lr)
            record.update(step=self.global_step, epoch=epoch, lr=lr)
            self.history.append(record)
            losses.append(record["loss"])
            self.global_step += 1
        return EpochSummary(epoch, float(np.mean(losses)) if losses else np.nan, len(losses))

    def run(self, max_steps: int | None = None, progress=None) -> list[EpochSummary]:
        summaries = []
        for epoch in range(self.config.epochs):
            summary = self.train_epoch(epoch, max_steps)
            if summary.steps:
                summaries.append(summary)
                if progress is not None:
                    progress(summary)
            if max_steps is not None and self.global_step >= max_steps:
                break
        return summaries

    def write_log(self, path):
        """One CSV row per optimizer step: step, epoch, lr, loss terms."""
        fields = ["step", "epoch", "lr", "loss", "ce", "lovasz"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: row.get(k, "") for k in fields})


def voxel_accuracy(net: MssNet, tensor: SparseTensor, voxel_labels, ignore_label=IGNORE_LABEL) -> float:
    """Fraction of non-ignored voxels whose argmax logit is the label."""
    net.eval()
    logits = net.forward(tensor).features.data
    preds = logits.argmax(axis=1)
    labels = np.asarray(voxel_labels)
    scored = labels != ignore_label
    net.train()
    if not scored.any():
        return np.nan
    return float((preds[scored] == labels[scored]).mean())


def evaluate(
    net: MssNet,
    scenes: list[LabeledPointCloud],
    feature_fn,
    voxel_size: float,
    class_names,
    ignore_label: int = IGNORE_LABEL,
    distance_bin_edges=None,
) -> MetricReport:
    """Deterministic eval pass: per-point confusion matrix over the split."""
    net.eval()
    num_classes = len(class_names)
    cm = ConfusionMatrix(num_classes, ignore_label)
    all_points, all_preds, all_labels = [], [], []
    for scene in scenes:
        vox = voxelize(
            scene.positions, feature_fn(scene), scene.labels, voxel_size
        )
        logits = net.forward(vox.tensor).features.data
        voxel_preds = logits.argmax(axis=1)
        point_preds = devoxelize(voxel_preds, vox.point_to_voxel)
        cm.add(point_preds, scene.labels)
        if distance_bin_edges is not None:
            all_points.append(scene.positions)
            all_preds.append(point_preds)
            all_labels.append(scene.labels)
    report = build_report(cm, class_names)
    if distance_bin_edges is not None:
        report.extras["distance_bins"] = miou_by_distance(
            np.vstack(all_points),
            np.concatenate(all_preds),
            np.concatenate(all_labels),
            distance_bin_edges,
            num_classes,
            ignore_label,
        )
    return report
