"""Minibatch Adam training with per-epoch loss schedules and best-checkpoint selection."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .dataset import Dataset
from .errors import ConfigError, DimensionError, NumericError
from .losses import LossSpec, loss_and_gradient, schedule_select, target_transform, weighted_loss
from .network import NetConfig, SurrogateNet
from .optim import Adam

log = logging.getLogger(__name__)

_INIT_TAG = 0x1A17
_SHUFFLE_TAG = 0x5F1E
_NOISE_TAG = 0x9015E


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    net: NetConfig = field(default_factory=NetConfig)
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    noise_std: float = 0.0
    dataset: str | None = None
    subset_fraction: float = 1.0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise std must be >= 0")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError("subset fraction must lie in (0, 1]")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    prefactor: str


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[EpochRecord]
    final: Checkpoint

    def write_history(self, path: str | os.PathLike) -> None:
        write_history_csv(path, self.history)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_loss", "prefactor"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.test_loss), r.prefactor])


def init_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, _INIT_TAG]).generate_state(1)[0])


def add_target_noise(target: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, std^2) noise and clamp to [0, 1]; ``std == 0`` returns the input."""
    if std == 0:
        return target
    noisy = target + rng.normal(0.0, std, size=target.shape).astype(target.dtype)
    return np.clip(noisy, 0.0, 1.0)


def scheduled_loss(net: SurrogateNet, spec: LossSpec, inputs: np.ndarray, targets: np.ndarray,
                   prefactor: str, batch_size: int = 32) -> float:
    """Loss over a whole set in inference mode; ``targets`` already transformed."""
    total, count = 0.0, 0
    for i in range(0, len(inputs), batch_size):
        pred = net.forward(inputs[i:i + batch_size])[:, 0]
        y = targets[i:i + batch_size]
        total += weighted_loss(spec, pred, y, prefactor) * y.size
        count += y.size
    return total / count if count else float("nan")


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    L = config.net.size
    for ds, what in ((train_set, "train"), (test_set, "test")):
        if ds.spec.size != L:
            raise DimensionError(f"{what} set lattice {ds.spec.size} != network input {L}")
    if len(train_set) == 0 or len(test_set) == 0:
        raise ConfigError("train and test sets must be non-empty")

    dt = config.net.np_dtype
    spec = config.loss
    net = SurrogateNet(config.net, seed=init_seed(config.seed))
    opt = Adam(net.named_parameters(), config.lr)
    x_train = train_set.inputs.astype(dt)
    y_train = train_set.targets.astype(dt)
    x_test = test_set.inputs.astype(dt)
    y_test = target_transform(spec.transform, test_set.targets.astype(dt))

    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    n = len(train_set)
    bs = config.batch_size
    for epoch in range(config.epochs):
        prefactor = schedule_select(spec, epoch, config.seed)
        shuffle = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, _SHUFFLE_TAG]))
        order = shuffle.permutation(n)
        noise_rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, _NOISE_TAG]))
        y_epoch = target_transform(spec.transform, add_target_noise(y_train, config.noise_std, noise_rng))

        total = 0.0
        for bi, start in enumerate(range(0, n, bs)):
            rows = order[start:start + bs]
            pred = net.forward(x_train[rows], train=True)
            loss, grad = loss_and_gradient(spec, pred[:, 0], y_epoch[rows], prefactor)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step(net.named_parameters(), net.backward(grad[:, None]))
            total += loss * len(rows)
        train_loss = total / n

        test_loss = float("nan")
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            test_loss = scheduled_loss(net, spec, x_test, y_test, prefactor)
            if not np.isfinite(test_loss):
                raise NumericError(f"non-finite test loss at epoch {epoch}")
            if best is None or test_loss < best.test_loss:
                best = Checkpoint.capture(net, opt, epoch, test_loss, prefactor=prefactor,
                                          transform=spec.transform)
        rec = EpochRecord(epoch, float(train_loss), float(test_loss), prefactor)
        history.append(rec)
        log.info("epoch %d  train %.6g  test %.6g  (%s)", epoch, train_loss, test_loss, prefactor)
        if on_epoch is not None:
            on_epoch(rec)

    final = Checkpoint.capture(net, opt, config.epochs - 1, history[-1].test_loss,
                               transform=spec.transform)
    return TrainResult(best, history, final)
