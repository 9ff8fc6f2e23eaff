"""Training loops for the capsule defense model and the baseline CNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .datasets import BatchIterator, Dataset
from .errors import TrainingError, UsageError
from .model import BaselineCNN, CapsNet, ModelConfig


@dataclass(frozen=True)
class TrainSchedule:
    batch_size: int = 32
    learning_rate: float = 1e-3
    steps: int = 1000
    seed: int = 0
    log_every: int = 100


def toy_schedule(**kw) -> TrainSchedule:
    return TrainSchedule(batch_size=32, learning_rate=1e-3, **kw)


def svhn_schedule(**kw) -> TrainSchedule:
    return TrainSchedule(batch_size=64, learning_rate=1e-4, **kw)


def cifar10_schedule(**kw) -> TrainSchedule:
    return TrainSchedule(batch_size=128, learning_rate=2e-4, **kw)


SCHEDULE_PRESETS = {"toy": toy_schedule, "svhn": svhn_schedule, "cifar10": cifar10_schedule}


def train_step(model: CapsNet, images: np.ndarray, labels: np.ndarray, opt: Adam) -> dict:
    """One optimizer update; returns the loss components.

    The reconstruction target during training is conditioned on the true
    label's capsule (teacher forcing); the cycle term conditions on the
    model's own prediction.
    """
    if images.shape[0] == 0:
        raise UsageError("empty batch")
    c = model.config
    x = Tensor(images.astype(np.float32, copy=False))
    out = model.forward(x)
    margin = model.margin_loss(out.lengths, labels)

    recon = model.reconstruct(model.mask_for_reconstruction(out.poses, labels))
    diff = recon - x
    recon_sse = (diff * diff).sum() * (1.0 / images.shape[0])

    total = margin + recon_sse * c.recon_weight
    cyc_value = 0.0
    if c.cycle_weight > 0:
        recon_pred = model.reconstruct(model.mask_for_reconstruction(out.poses, out.predictions))
        out2 = model.forward(recon_pred)
        cyc = ad.softmax_cross_entropy(out2.lengths, out.predictions).mean()
        total = total + cyc * c.cycle_weight
        cyc_value = float(cyc.data)

    values = {
        "margin": float(margin.data),
        "recon": float(recon_sse.data),
        "cycle": cyc_value,
        "total": float(total.data),
    }
    if not all(np.isfinite(v) for v in values.values()):
        raise TrainingError(f"non-finite loss at step {model.trained_steps}: {values}")
    opt.zero_grad()
    total.backward()
    opt.step()
    model.trained_steps += 1
    return values


def train_baseline_step(model: BaselineCNN, images, labels, opt: Adam) -> dict:
    if images.shape[0] == 0:
        raise UsageError("empty batch")
    x = Tensor(images.astype(np.float32, copy=False))
    loss = ad.softmax_cross_entropy(model.logits(x), labels).mean()
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite loss at step {model.trained_steps}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    model.trained_steps += 1
    return {"total": float(loss.data)}


def train(
    dataset: Dataset,
    config: ModelConfig,
    schedule: TrainSchedule,
    log=None,
    arch: str | None = None,
):
    """Train a model from scratch; deterministic given (config, schedule.seed)."""
    if dataset.num_classes != config.num_classes:
        raise UsageError(
            f"dataset has {dataset.num_classes} classes, config expects {config.num_classes}"
        )
    arch = arch or config.arch
    if arch == "capsule":
        model = CapsNet(config, seed=schedule.seed, trainable=True)
        step_fn = train_step
    elif arch == "cnn":
        model = BaselineCNN(config, seed=schedule.seed, trainable=True)
        step_fn = train_baseline_step
    else:
        raise UsageError(f"unknown architecture {arch!r}")
    opt = Adam(model.parameters(), lr=schedule.learning_rate)
    it = BatchIterator(dataset, schedule.batch_size, seed=schedule.seed)
    step = 0
    while step < schedule.steps:
        for images, labels in it:
            if step >= schedule.steps:
                break
            values = step_fn(model, images, labels, opt)
            step += 1
            every = schedule.log_every
            if log is not None and every > 0 and (step % every == 0 or step == schedule.steps):
                log(step, values)
    return model


def evaluate_accuracy(model, dataset: Dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise UsageError("empty dataset")
    correct = 0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            imgs = dataset.images[start : start + batch_size]
            out = model.classify(imgs)
            correct += int((out.predictions == dataset.labels[start : start + batch_size]).sum())
    return correct / len(dataset)
