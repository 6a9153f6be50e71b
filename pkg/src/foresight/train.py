"""Masked SGD training with a step learning-rate schedule."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError
from .nn import ModelSpec, ParamSet, forward, softmax_cross_entropy


class TrainingDiverged(NumericalError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.5, 0.75)
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing fractions in (0, 1)")

    def milestone_epochs(self) -> list[int]:
        """First epoch of each decayed stage: ``ceil(m * epochs)`` on the decimal value of ``m``."""
        return [math.ceil(Fraction(str(m)) * self.epochs) for m in self.milestones]

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for start in self.milestone_epochs() if epoch >= start)
        return self.lr * self.gamma**passed


@dataclass
class TrainRecord:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    COLUMNS = (
        ("epoch", "1"),
        ("lr", "1"),
        ("train_loss", "nats"),
        ("test_loss", "nats"),
        ("test_acc", "fraction"),
        ("grad_norm", "l2"),
    )

    def write_csv(self, path) -> Path:
        """One row per epoch. Wall time is left out so reruns are byte-identical."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"{name}[{unit}]" for name, unit in self.COLUMNS])
            for e in range(len(self.train_loss)):
                w.writerow([e, repr(self.lr[e]), repr(self.train_loss[e]), repr(self.test_loss[e]),
                            repr(self.test_acc[e]), repr(self.grad_norm[e])])
        return path

    def summary(self) -> dict:
        return {
            "epochs": len(self.train_loss),
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "final_test_loss": self.test_loss[-1] if self.test_loss else None,
            "final_test_acc": self.test_acc[-1] if self.test_acc else None,
        }


class MaskedSGD:
    """SGD with heavy-ball momentum that keeps masked weights and buffers at zero.

    ``buf = momentum * buf + (grad + wd * w)``; ``w -= lr * buf``. Weight decay
    applies to prunable tensors only.
    """

    def __init__(self, tensors: Sequence[np.ndarray], masks: Sequence[np.ndarray] | None,
                 prunable: Sequence[bool], momentum: float = 0.9, weight_decay: float = 0.0):
        self.masks = list(masks) if masks is not None else [None] * len(tensors)
        self.prunable = list(prunable)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(t) for t in tensors]

    def step(self, tensors: list[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        for i, (w, g) in enumerate(zip(tensors, grads)):
            m = self.masks[i]
            g = g if m is None else g * m
            if self.weight_decay and self.prunable[i]:
                g = g + self.weight_decay * w
            buf = self.buffers[i]
            buf *= self.momentum
            buf += g
            if m is not None:
                buf *= m
            w -= lr * buf
            if m is not None:
                w *= m


def _loss_and_grads(spec, tensors, mask, x, y, temperature=1.0):
    tape = ad.Tape()
    leaves = [tape.leaf(t) for t in tensors]
    loss = softmax_cross_entropy(forward(spec, leaves, x, mask), y, temperature)
    return float(loss.value), ad.gradient(loss, leaves)


def evaluate(spec: ModelSpec, params, mask, dataset, batch_size: int = 1000) -> tuple[float, float]:
    """Mean cross-entropy (T=1) and top-1 accuracy over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    with ad.no_record():
        for b in dataset.batches(batch_size):
            logits = forward(spec, params, b.x, mask)
            total_loss += float(softmax_cross_entropy(logits, b.y).value) * len(b)
            correct += int(np.count_nonzero(logits.value.argmax(axis=1) == b.y))
    return total_loss / len(dataset), correct / len(dataset)


def train(spec: ModelSpec, params: ParamSet, mask, dataset, config: TrainConfig,
          test_set=None, monitor_batch=None) -> tuple[ParamSet, TrainRecord]:
    """Train ``mask * params`` with masked momentum SGD for ``config.epochs`` epochs.

    ``monitor_batch`` (a fixed batch) is used for the per-epoch gradient-norm
    sample; without it the first training batch of the epoch is used.
    """
    params = params.copy()
    tensors = params.tensors
    masks = None
    if mask is not None:
        masks = [np.asarray(m, dtype=np.float64) for m in mask.tensors]
        if [m.shape for m in masks] != [t.shape for t in tensors]:
            raise ValueError("mask is not aligned with the parameter set")
        for t, m in zip(tensors, masks):
            t *= m
    opt = MaskedSGD(tensors, masks, params.prunable, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    record = TrainRecord()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = config.lr_at(epoch)
        seen = 0
        running = 0.0
        first = None
        for step, b in enumerate(dataset.batches(config.batch_size, rng)):
            if first is None:
                first = b
            loss, grads = _loss_and_grads(spec, tensors, mask, b.x, b.y)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, step {step}")
            opt.step(tensors, grads, lr)
            running += loss * len(b)
            seen += len(b)
        probe = monitor_batch or first
        _, pg = _loss_and_grads(spec, tensors, mask, probe.x, probe.y)
        record.grad_norm.append(float(np.sqrt(sum(np.vdot(g, g) for g in pg))))
        record.train_loss.append(running / max(seen, 1))
        if test_set is not None:
            tl, ta = evaluate(spec, tensors, mask, test_set)
        else:
            tl, ta = float("nan"), float("nan")
        record.test_loss.append(tl)
        record.test_acc.append(ta)
        record.lr.append(lr)
        record.wall_time.append(time.perf_counter() - start)
    return params, record
