"""NumPy segmentation network: layers, losses, training, checkpoints."""

from .checkpoint import MAGIC, CheckpointError, load_model, save_model
from .layers import (
    LayerError,
    atrous_conv2d,
    atrous_conv2d_backward,
    bilinear_upsample,
    bilinear_upsample_backward,
    relu,
    relu_backward,
)
from .losses import (
    DEFAULT_THETA,
    LossConfig,
    LossError,
    ce_loss,
    ce_per_pixel,
    damped_loss,
    damped_per_pixel,
    log_softmax,
    loss_and_grad,
    loss_value,
    softmax,
)
from .model import ModelError, SegConfig, SegModel
from .train import (
    EpochStats,
    TrainConfig,
    TrainingDiverged,
    gradient_check,
    loss_and_param_grad,
    train,
    write_training_log,
)

__all__ = [
    "MAGIC",
    "CheckpointError",
    "load_model",
    "save_model",
    "LayerError",
    "atrous_conv2d",
    "atrous_conv2d_backward",
    "bilinear_upsample",
    "bilinear_upsample_backward",
    "relu",
    "relu_backward",
    "DEFAULT_THETA",
    "LossConfig",
    "LossError",
    "ce_loss",
    "ce_per_pixel",
    "damped_loss",
    "damped_per_pixel",
    "log_softmax",
    "loss_and_grad",
    "loss_value",
    "softmax",
    "ModelError",
    "SegConfig",
    "SegModel",
    "EpochStats",
    "TrainConfig",
    "TrainingDiverged",
    "gradient_check",
    "loss_and_param_grad",
    "train",
    "write_training_log",
]
