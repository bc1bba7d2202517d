"""Segmentation losses over (H, W, C) logit maps and integer target masks.

Plain cross-entropy averages -log p(target) over all pixels. The damped
variant multiplies each pixel's CE by (1 - exp(-CE)), which shrinks toward
zero for confident pixels and toward CE for hard ones, and by a class weight
alpha taken from `theta` at the pixel's predicted class (ties resolve to the
lowest class index). alpha is treated as a constant when differentiating; the
damping factor is not, giving d/dCE = alpha * (1 - exp(-CE) + CE*exp(-CE)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_THETA = (0.1, 0.9)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "damped"  # "ce" or "damped"
    theta: tuple[float, ...] = DEFAULT_THETA
    weight_by: str = "prediction"  # "prediction" or "target"

    def __post_init__(self) -> None:
        if self.kind not in ("ce", "damped"):
            raise LossError(f"unknown loss kind {self.kind!r}")
        if self.weight_by not in ("prediction", "target"):
            raise LossError(f"unknown weight_by {self.weight_by!r}")


def _check(logits: np.ndarray, target: np.ndarray) -> None:
    if logits.ndim != 3:
        raise LossError(f"logits must be (H, W, C); got shape {logits.shape}")
    if target.shape != logits.shape[:2]:
        raise LossError(f"target shape {target.shape} != logits spatial {logits.shape[:2]}")
    c = logits.shape[2]
    if target.min() < 0 or target.max() >= c:
        raise LossError(f"target labels must lie in [0, {c})")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def ce_per_pixel(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """-log p(target class) at each pixel, shape (H, W)."""
    _check(logits, target)
    lsm = log_softmax(logits)
    h, w = target.shape
    rows, cols = np.indices((h, w))
    return -lsm[rows, cols, target]


def ce_loss(logits: np.ndarray, target: np.ndarray) -> float:
    return float(ce_per_pixel(logits, target).mean())


def _alpha(logits: np.ndarray, target: np.ndarray, config: LossConfig) -> np.ndarray:
    theta = np.asarray(config.theta, dtype=np.float64)
    if theta.shape[0] != logits.shape[2]:
        raise LossError(f"theta has {theta.shape[0]} entries for {logits.shape[2]} classes")
    if config.weight_by == "prediction":
        return theta[np.argmax(logits, axis=-1)]
    return theta[target]


def damped_per_pixel(logits: np.ndarray, target: np.ndarray, config: LossConfig) -> np.ndarray:
    ce = ce_per_pixel(logits, target)
    return ce * (1.0 - np.exp(-ce)) * _alpha(logits, target, config)


def damped_loss(
    logits: np.ndarray, target: np.ndarray, config: LossConfig | None = None
) -> float:
    config = config or LossConfig()
    return float(damped_per_pixel(logits, target, config).mean())


def loss_value(logits: np.ndarray, target: np.ndarray, config: LossConfig) -> float:
    if config.kind == "ce":
        return ce_loss(logits, target)
    return damped_loss(logits, target, config)


def loss_and_grad(
    logits: np.ndarray, target: np.ndarray, config: LossConfig | None = None
) -> tuple[float, np.ndarray]:
    """Mean loss and its exact gradient w.r.t. the logits."""
    config = config or LossConfig()
    _check(logits, target)
    h, w, c = logits.shape
    p = softmax(logits)
    onehot = np.zeros_like(p)
    rows, cols = np.indices((h, w))
    onehot[rows, cols, target] = 1.0
    dce = p - onehot  # per-pixel dCE/dlogits before averaging

    ce = ce_per_pixel(logits, target)
    if config.kind == "ce":
        loss = float(ce.mean())
        dlogits = dce / (h * w)
        return loss, dlogits.astype(logits.dtype)

    alpha = _alpha(logits, target, config)
    e = np.exp(-ce)
    loss = float((ce * (1.0 - e) * alpha).mean())
    dfl_dce = alpha * (1.0 - e + ce * e)
    dlogits = dfl_dce[:, :, None] * dce / (h * w)
    return loss, dlogits.astype(logits.dtype)
