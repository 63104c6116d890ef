"""Training loops for the original classifier and the retrain baseline."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import tinynet
from .errors import ConfigError, DataError
from .featurize import DatasetSplit, stack
from .tinynet import ArchSpec, ModelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.01
    seed: int = 123
    shuffle: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_acc: float


def train(
    dataset: DatasetSplit, arch: ArchSpec, cfg: TrainConfig
) -> tuple[ModelParams, list[EpochStats]]:
    """Mini-batch SGD on cross-entropy; deterministic given cfg.seed."""
    cfg.validate()
    if not dataset.train:
        raise DataError("training set is empty")
    x, y = stack(dataset.train)
    xt, yt = stack(dataset.test)
    return _fit(x, y, xt, yt, arch, cfg)


def _fit(x, y, xt, yt, arch: ArchSpec, cfg: TrainConfig):
    params = tinynet.init_params(arch, cfg.seed)
    stats: list[EpochStats] = []
    m = len(y)
    for epoch in range(cfg.epochs):
        if cfg.shuffle:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(m)
        else:
            order = np.arange(m)
        losses = []
        for start in range(0, m, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = tinynet.backward(params, x[idx], y[idx], "ce")
            params = tinynet.sgd_step(params, grads.param_grads, cfg.lr)
            losses.append(grads.loss)
        acc = tinynet.accuracy(params, xt, yt) if len(yt) else float("nan")
        stats.append(EpochStats(epoch=epoch, train_loss=float(np.mean(losses)), test_acc=acc))
        log.info("epoch %d: train_loss=%.4f test_acc=%.4f", epoch, stats[-1].train_loss, acc)
    return params, stats


def retrain_excluding(
    dataset: DatasetSplit, forget_labels, arch: ArchSpec, cfg: TrainConfig
) -> tuple[ModelParams, list[EpochStats]]:
    """Train a fresh model on the retain set only.

    The output head keeps every logit; excluded classes simply receive no
    training signal.  An empty forget set degrades to plain train().
    """
    cfg.validate()
    forget = frozenset(int(v) for v in forget_labels)
    if not forget:
        return train(dataset, arch, cfg)
    present = {s.label for s in dataset.train}
    unknown = forget - present
    if unknown:
        raise DataError(f"cannot exclude labels missing from the dataset: {sorted(unknown)}")
    if forget >= present:
        raise DataError("cannot exclude every label in the dataset")

    kept = [s for s in dataset.train if s.label not in forget]
    assert all(s.label not in forget for s in kept)
    x, y = stack(kept)
    test_kept = [s for s in dataset.test if s.label not in forget]
    xt, yt = stack(test_kept)
    return _fit(x, y, xt, yt, arch, cfg)


def write_accuracy_log(stats: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "test_acc"])
        for row in stats:
            writer.writerow([row.epoch, f"{row.train_loss:.6f}", f"{row.test_acc:.6f}"])
