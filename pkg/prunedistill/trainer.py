"""Nesterov SGD with a step schedule: plain training, distillation, evaluation."""
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from prunedistill.checkpoint import MaskedCheckpoint
from prunedistill.data import LabeledDataset, augment_batch
from prunedistill.errors import ConfigError, DataError, NumericError
from prunedistill.layers import ArchitectureSpec, is_trainable
from prunedistill.losses import DistillConfig, ce_loss_and_grad, kd_loss_and_grad
from prunedistill.network import Network, predict_logits

log = logging.getLogger(__name__)

# VGG-family training schedule
EPOCHS = 200
BATCH_SIZE = 128
LR = 0.1
LR_DROPS = (60, 120, 160)
DROP_FACTOR = 0.2
WEIGHT_DECAY = 5e-4
MOMENTUM = 0.9

REPORT_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    lr: float = LR
    lr_drops: tuple = LR_DROPS
    drop_factor: float = DROP_FACTOR
    weight_decay: float = WEIGHT_DECAY
    momentum: float = MOMENTUM
    seed: int = 0
    # weight decay on BN scale/shift too
    decay_bn: bool = True
    augment: bool = False

    def check_valid(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.drop_factor <= 0:
            raise ConfigError("weight_decay must be non-negative and drop_factor positive")
        drops = list(self.lr_drops)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError(f"lr_drops must be strictly increasing, got {drops}")
        # a zero-epoch run never reaches a drop
        if drops and self.epochs and (drops[0] < 0 or drops[-1] >= self.epochs):
            raise ConfigError(f"lr_drops {drops} must lie in [0, {self.epochs})")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if "lr_drops" in d:
            d["lr_drops"] = tuple(int(e) for e in d["lr_drops"])
        cfg = cls(**d)
        cfg.check_valid()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        return d


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float


@dataclass
class RunReport:
    history: list = field(default_factory=list)
    best_val_epoch: int | None = None
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def rows(self) -> list[dict]:
        return [asdict(row) for row in self.history]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows())
        return path


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for d in cfg.lr_drops if d <= epoch)
    return cfg.lr * cfg.drop_factor**drops


def sgd_nesterov_step(
    params: dict,
    grads: dict,
    velocity: dict,
    lr: float,
    momentum: float,
    weight_decay: float,
    masks: dict | None = None,
    decay_names=None,
) -> tuple[dict, dict]:
    """One Nesterov step on every tensor in ``grads``; returns new params and velocity.

    g = grad + wd * w; v = m * v + g; w = w - lr * (g + m * v); masked
    coordinates of w and v are then reset to exactly zero.
    """
    masks = masks or {}
    new_params, new_velocity = dict(params), dict(velocity)
    for name, grad in grads.items():
        w = params[name]
        g = grad + weight_decay * w if decay_names is None or name in decay_names else grad
        v = momentum * velocity.get(name, 0.0) + g
        w = w - lr * (g + momentum * v)
        mask = masks.get(name)
        if mask is not None:
            w = np.where(mask, w, 0).astype(params[name].dtype, copy=False)
            v = np.where(mask, v, 0).astype(params[name].dtype, copy=False)
        if not np.isfinite(w).all():
            log.error("non-finite update for %s (lr %g)", name, lr)
            raise NumericError(f"non-finite parameter update for {name}")
        new_params[name] = w
        new_velocity[name] = v
    return new_params, new_velocity


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    # argmax returns the lowest index among ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _split_or_fail(data: LabeledDataset, split: str):
    images, labels = data.split(split)
    if len(labels) == 0:
        raise DataError(f"{data.name}: split {split!r} is empty")
    return images, labels


def evaluate(ckpt: MaskedCheckpoint, data: LabeledDataset, split: str = "test") -> float:
    images, labels = _split_or_fail(data, split)
    return _accuracy(predict_logits(ckpt.arch, ckpt.masked_params(), images), labels)


def agreement(student: MaskedCheckpoint, teacher: MaskedCheckpoint, data: LabeledDataset, split: str = "test") -> float:
    """Fraction of samples on which the two argmax predictions coincide."""
    if student.arch.num_classes != teacher.arch.num_classes:
        raise ConfigError(f"class counts differ: {student.arch.num_classes} vs {teacher.arch.num_classes}")
    images, _ = _split_or_fail(data, split)
    a = predict_logits(student.arch, student.masked_params(), images).argmax(axis=1)
    b = predict_logits(teacher.arch, teacher.masked_params(), images).argmax(axis=1)
    return float(np.mean(a == b))


def _start(arch: ArchitectureSpec, cfg: TrainConfig, init: MaskedCheckpoint | None) -> MaskedCheckpoint:
    if init is None:
        return MaskedCheckpoint.fresh(arch, cfg.seed)
    if init.arch.to_dict() != arch.to_dict():
        raise ConfigError(f"initial checkpoint is a {init.arch.name}, not a {arch.name}")
    return init


def train(
    arch: ArchitectureSpec,
    data: LabeledDataset,
    cfg: TrainConfig,
    init: MaskedCheckpoint | None = None,
    quiet: bool = False,
) -> tuple[MaskedCheckpoint, RunReport]:
    """Mini-batch cross-entropy training; returns the best-validation snapshot."""
    cfg.check_valid()
    ckpt = _start(arch, cfg, init)
    return _fit(ckpt, data, cfg, lambda logits, images, labels: ce_loss_and_grad(logits, labels), quiet)


def distill(
    student_arch: ArchitectureSpec,
    teacher: MaskedCheckpoint,
    data: LabeledDataset,
    dcfg: DistillConfig,
    tcfg: TrainConfig,
    init: MaskedCheckpoint | None = None,
    quiet: bool = False,
) -> tuple[MaskedCheckpoint, RunReport]:
    """Train ``student_arch`` against the masked teacher's logits, computed per batch."""
    dcfg.check_valid()
    tcfg.check_valid()
    if student_arch.num_classes != teacher.arch.num_classes:
        raise ConfigError(
            f"student has {student_arch.num_classes} classes, teacher {teacher.arch.num_classes}"
        )
    if tuple(student_arch.input_shape) != tuple(teacher.arch.input_shape):
        raise ConfigError(f"student input {student_arch.input_shape} differs from teacher {teacher.arch.input_shape}")
    ckpt = _start(student_arch, tcfg, init)
    teacher_net = Network(teacher.arch)
    teacher_params = teacher.masked_params()

    def loss_fn(logits, images, labels):
        teacher_logits = teacher_net.forward(teacher_params, images, "eval")
        return kd_loss_and_grad(logits, teacher_logits, labels, dcfg)

    student, report = _fit(ckpt, data, tcfg, loss_fn, quiet)
    if data.size("test"):
        report.final["agreement"] = agreement(student, teacher, data, "test")
        student.metrics["agreement"] = report.final["agreement"]
    return student, report


def _fit(ckpt: MaskedCheckpoint, data: LabeledDataset, cfg: TrainConfig, loss_fn, quiet: bool):
    start = time.perf_counter()
    arch = ckpt.arch
    report = RunReport()
    net = Network(arch)
    x_train, y_train = _split_or_fail(data, "train")
    x_val, y_val = data.split("val")
    has_val = len(y_val) > 0

    params = ckpt.masked_params()
    masks = ckpt.masks
    velocity = {name: np.zeros_like(v) for name, v in params.items() if is_trainable(name)}
    decay_names = None
    if not cfg.decay_bn:
        decay_names = {n for n in velocity if not n.endswith((".gamma", ".beta"))}
    best = ckpt
    best_val = -1.0
    n = len(y_train)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        loss_sum, correct = 0.0, 0
        starts = range(0, n, cfg.batch_size)
        for b in tqdm(starts, desc=f"epoch {epoch}", leave=False, disable=True if quiet else None):
            idx = order[b : b + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if cfg.augment:
                xb = augment_batch(xb, aug_rng)
            logits = net.forward(params, xb, "train")
            loss, dlogits = loss_fn(logits, xb, yb)
            if not np.isfinite(loss):
                log.error("non-finite loss at epoch %d, batch %d", epoch, b // cfg.batch_size)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b // cfg.batch_size}")
            grads = net.backward(params, dlogits)
            net.commit_running_stats(params)
            params, velocity = sgd_nesterov_step(
                params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, masks, decay_names
            )
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))

        val_acc = _accuracy(predict_logits(arch, params, x_val), y_val) if has_val else float("nan")
        row = EpochRow(epoch, loss_sum / n, correct / n, val_acc, lr)
        report.history.append(row)
        log.info(
            "%s epoch %d/%d: lr %.4g, loss %.4f, train acc %.4f, val acc %.4f",
            arch.name,
            epoch + 1,
            cfg.epochs,
            lr,
            row.train_loss,
            row.train_acc,
            val_acc,
        )
        # earliest epoch wins ties; without a val split the last epoch is kept
        if not has_val or val_acc > best_val:
            best_val = val_acc
            report.best_val_epoch = epoch
            best = MaskedCheckpoint(
                arch, dict(params), {k: m.copy() for k, m in masks.items()}, ckpt.seed, ckpt.epoch + epoch + 1
            )

    if best is ckpt:
        best = ckpt.copy()
    if has_val:
        best.metrics["val_acc"] = _accuracy(predict_logits(arch, best.masked_params(), x_val), y_val)
    if data.size("test"):
        best.metrics["test_acc"] = evaluate(best, data, "test")
    best.metrics["sparsity"] = best.sparsity
    report.final = dict(best.metrics)
    report.wall_time = time.perf_counter() - start
    log.debug("%s finished in %.1fs (best epoch %s)", arch.name, report.wall_time, report.best_val_epoch)
    return best, report
