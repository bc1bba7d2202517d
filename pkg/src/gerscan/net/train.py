"""SGD training loop, per-epoch evaluation, and a numeric gradient check."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..metrics import evaluate_masks, f1, miou, pixel_accuracy
from .losses import LossConfig, loss_and_grad
from .model import SegModel


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    shuffle_seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    divergence_threshold: float = 1e6


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    eval_f1_ger: float
    eval_miou_ger: float
    eval_pixel_acc: float


Sample = tuple[np.ndarray, np.ndarray]  # (image, {0,1} mask)


def loss_and_param_grad(
    model: SegModel, image: np.ndarray, mask: np.ndarray, loss_config: LossConfig
) -> tuple[float, dict[str, np.ndarray]]:
    logits, cache = model.forward(image, return_cache=True)
    loss, dlogits = loss_and_grad(logits, mask.astype(np.int64), loss_config)
    grads = model.backward(dlogits, cache)
    return loss, grads


def _evaluate(model: SegModel, samples: Sequence[Sample]) -> tuple[float, float, float]:
    preds = [model.predict(img) for img, _ in samples]
    truths = [mask for _, mask in samples]
    pooled = evaluate_masks(preds, truths)
    # for binary masks the positive-class confusion already covers every pixel
    return f1(pooled[1]), miou(pooled), pixel_accuracy(pooled[1])


def train(
    model: SegModel,
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample],
    config: TrainConfig | None = None,
    progress: Callable[[EpochStats], None] | None = None,
) -> list[EpochStats]:
    """Train in place; returns one stats row per epoch.

    Raises TrainingDiverged as soon as any sample loss is non-finite or
    exceeds the configured threshold.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.shuffle_seed)
    velocity = {n: np.zeros_like(p) for n, p in model.params.items()}
    history: list[EpochStats] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_samples))
        total = 0.0
        for idx in order:
            image, mask = train_samples[idx]
            loss, grads = loss_and_param_grad(model, image, mask, config.loss)
            if not np.isfinite(loss) or loss > config.divergence_threshold:
                raise TrainingDiverged(f"loss {loss!r} at epoch {epoch}")
            total += loss
            for name, g in grads.items():
                v = velocity[name]
                v *= config.momentum
                v -= config.learning_rate * g
                model.params[name] += v
        f1, miou, acc = _evaluate(model, eval_samples)
        stats = EpochStats(
            epoch=epoch,
            train_loss=total / max(len(train_samples), 1),
            eval_f1_ger=f1,
            eval_miou_ger=miou,
            eval_pixel_acc=acc,
        )
        history.append(stats)
        if progress is not None:
            progress(stats)
    return history


def write_training_log(path: str | Path, history: Sequence[EpochStats]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "eval_f1_ger", "eval_miou_ger", "eval_pixel_acc"])
        for row in history:
            writer.writerow(
                [
                    row.epoch,
                    f"{row.train_loss:.6f}",
                    f"{row.eval_f1_ger:.6f}",
                    f"{row.eval_miou_ger:.6f}",
                    f"{row.eval_pixel_acc:.6f}",
                ]
            )


def gradient_check(
    model: SegModel,
    image: np.ndarray,
    mask: np.ndarray,
    loss_config: LossConfig | None = None,
    step: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max elementwise relative error between backprop and central differences.

    Probes every parameter, or `sample` of them chosen without replacement.
    The model must use float64 parameters for the comparison to be meaningful.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient_check requires a float64 model")
    loss_config = loss_config or LossConfig()
    _, grads = loss_and_param_grad(model, image, mask, loss_config)
    analytic = model.flatten_grads(grads)

    flat = model.get_flat_params()
    if sample is None:
        indices = np.arange(flat.size)
    else:
        if sample < 1:
            raise ValueError("sample must be >= 1")
        rng = np.random.default_rng(seed)
        indices = rng.choice(flat.size, size=min(sample, flat.size), replace=False)
    numeric = np.zeros(indices.size, dtype=flat.dtype)
    target = mask.astype(np.int64)
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        model.set_flat_params(flat)
        logits = model.forward(image)
        up, _ = loss_and_grad(logits, target, loss_config)
        flat[i] = orig - step
        model.set_flat_params(flat)
        logits = model.forward(image)
        down, _ = loss_and_grad(logits, target, loss_config)
        flat[i] = orig
        numeric[j] = (up - down) / (2.0 * step)
    model.set_flat_params(flat)

    picked = analytic[indices]
    denom = np.maximum(np.abs(picked) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(picked - numeric) / denom))
