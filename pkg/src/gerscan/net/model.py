"""Small atrous segmentation network over RGB tiles, NumPy end to end.

Backbone of strided 3x3 conv+ReLU stages, then three parallel dilated 3x3
branches whose outputs are concatenated and fused by a 1x1 conv, a 1x1
classifier head, and a bilinear upsample back to input resolution. With the
default strides (1, 2, 2, 1) the logits are computed at 1/4 resolution and
upsampled x4, so a 256x256 tile yields 256x256x2 logits.

All parameters live in a name->array dict; flat-vector accessors exist so a
numeric gradient check can perturb every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .layers import (
    ConvCache,
    atrous_conv2d,
    atrous_conv2d_backward,
    bilinear_upsample,
    bilinear_upsample_backward,
    relu,
    relu_backward,
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class SegConfig:
    in_channels: int = 3
    num_classes: int = 2
    stage_widths: tuple[int, ...] = (8, 16, 32, 32)
    stage_strides: tuple[int, ...] = (1, 2, 2, 1)
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    aspp_width: int = 32
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.stage_widths) != len(self.stage_strides):
            raise ModelError("stage_widths and stage_strides must have equal length")
        if not self.stage_widths:
            raise ModelError("at least one backbone stage is required")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype!r}")

    @property
    def downsample(self) -> int:
        out = 1
        for s in self.stage_strides:
            out *= s
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stage_widths": list(self.stage_widths),
            "stage_strides": list(self.stage_strides),
            "aspp_rates": list(self.aspp_rates),
            "aspp_width": self.aspp_width,
            "dtype": self.dtype,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SegConfig":
        return cls(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            stage_widths=tuple(int(v) for v in d["stage_widths"]),
            stage_strides=tuple(int(v) for v in d["stage_strides"]),
            aspp_rates=tuple(int(v) for v in d["aspp_rates"]),
            aspp_width=int(d["aspp_width"]),
            dtype=str(d["dtype"]),
            seed=int(d["seed"]),
        )


@dataclass
class ForwardCache:
    scaled: np.ndarray
    stage_pre: list[np.ndarray] = field(default_factory=list)
    stage_conv: list[ConvCache] = field(default_factory=list)
    branch_pre: list[np.ndarray] = field(default_factory=list)
    branch_conv: list[ConvCache] = field(default_factory=list)
    fuse_pre: np.ndarray | None = None
    fuse_conv: ConvCache | None = None
    head_conv: ConvCache | None = None
    upsample: tuple | None = None


class SegModel:
    def __init__(self, config: SegConfig | None = None):
        self.config = config or SegConfig()
        self.dtype = np.dtype(self.config.dtype)
        self.params: dict[str, np.ndarray] = {}
        self._names: list[str] = []
        self._init_params()

    def _add_param(self, name: str, shape: tuple[int, ...], rng: np.random.Generator) -> None:
        if name.endswith("_b"):
            arr = np.zeros(shape, dtype=self.dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            arr = (rng.standard_normal(shape) * std).astype(self.dtype)
        self.params[name] = arr
        self._names.append(name)

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        cin = cfg.in_channels
        for i, width in enumerate(cfg.stage_widths):
            self._add_param(f"stage{i}_w", (3, 3, cin, width), rng)
            self._add_param(f"stage{i}_b", (width,), rng)
            cin = width
        for r in cfg.aspp_rates:
            self._add_param(f"aspp{r}_w", (3, 3, cin, cfg.aspp_width), rng)
            self._add_param(f"aspp{r}_b", (cfg.aspp_width,), rng)
        concat_width = cfg.aspp_width * len(cfg.aspp_rates)
        self._add_param("fuse_w", (1, 1, concat_width, cfg.aspp_width), rng)
        self._add_param("fuse_b", (cfg.aspp_width,), rng)
        self._add_param("head_w", (1, 1, cfg.aspp_width, cfg.num_classes), rng)
        self._add_param("head_b", (cfg.num_classes,), rng)

    # ------------------------------------------------------------------
    # parameter plumbing

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self._names])

    def set_flat_params(self, flat: np.ndarray) -> None:
        expected = self.param_count()
        if flat.size != expected:
            raise ModelError(f"flat vector has {flat.size} values; model needs {expected}")
        pos = 0
        for n in self._names:
            p = self.params[n]
            self.params[n] = flat[pos : pos + p.size].reshape(p.shape).astype(self.dtype)
            pos += p.size

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[n].ravel() for n in self._names])

    # ------------------------------------------------------------------
    # forward / backward

    def _scale_input(self, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3 or image.shape[2] != self.config.in_channels:
            raise ModelError(
                f"expected (H, W, {self.config.in_channels}) input; got shape {image.shape}"
            )
        if np.issubdtype(image.dtype, np.integer):
            return image.astype(self.dtype) / 255.0
        return image.astype(self.dtype)

    def forward(self, image: np.ndarray, return_cache: bool = False):
        cfg = self.config
        x = self._scale_input(image)
        cache = ForwardCache(scaled=x)

        h = x
        for i, stride in enumerate(cfg.stage_strides):
            pre, cc = atrous_conv2d(
                h,
                self.params[f"stage{i}_w"],
                self.params[f"stage{i}_b"],
                rate=1,
                stride=stride,
                return_cache=True,
            )
            cache.stage_pre.append(pre)
            cache.stage_conv.append(cc)
            h = relu(pre)

        branches = []
        for r in cfg.aspp_rates:
            pre, cc = atrous_conv2d(
                h,
                self.params[f"aspp{r}_w"],
                self.params[f"aspp{r}_b"],
                rate=r,
                stride=1,
                return_cache=True,
            )
            cache.branch_pre.append(pre)
            cache.branch_conv.append(cc)
            branches.append(relu(pre))
        concat = np.concatenate(branches, axis=2)

        fuse_pre, fuse_cc = atrous_conv2d(
            concat, self.params["fuse_w"], self.params["fuse_b"], return_cache=True
        )
        cache.fuse_pre = fuse_pre
        cache.fuse_conv = fuse_cc
        fused = relu(fuse_pre)

        logits_small, head_cc = atrous_conv2d(
            fused, self.params["head_w"], self.params["head_b"], return_cache=True
        )
        cache.head_conv = head_cc

        factor = cfg.downsample
        if factor > 1:
            logits, up = bilinear_upsample(logits_small, factor, return_cache=True)
            cache.upsample = up
        else:
            logits = logits_small

        if return_cache:
            return logits, cache
        return logits

    def backward(self, grad_logits: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
        cfg = self.config
        grads: dict[str, np.ndarray] = {}

        g = grad_logits
        if cache.upsample is not None:
            g = bilinear_upsample_backward(g, cache.upsample)

        g, grads["head_w"], grads["head_b"] = atrous_conv2d_backward(
            g, self.params["head_w"], cache.head_conv
        )

        g = relu_backward(g, cache.fuse_pre)
        g, grads["fuse_w"], grads["fuse_b"] = atrous_conv2d_backward(
            g, self.params["fuse_w"], cache.fuse_conv
        )

        # split the concat gradient back into the dilated branches
        width = cfg.aspp_width
        g_backbone = None
        for bi, r in enumerate(cfg.aspp_rates):
            gb = relu_backward(g[:, :, bi * width : (bi + 1) * width], cache.branch_pre[bi])
            gb, grads[f"aspp{r}_w"], grads[f"aspp{r}_b"] = atrous_conv2d_backward(
                gb, self.params[f"aspp{r}_w"], cache.branch_conv[bi]
            )
            g_backbone = gb if g_backbone is None else g_backbone + gb
        g = g_backbone

        for i in reversed(range(len(cfg.stage_strides))):
            g = relu_backward(g, cache.stage_pre[i])
            g, grads[f"stage{i}_w"], grads[f"stage{i}_b"] = atrous_conv2d_backward(
                g, self.params[f"stage{i}_w"], cache.stage_conv[i]
            )
        return grads

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Class-index mask (H, W) uint8 via argmax over the logits."""
        logits = self.forward(image)
        return np.argmax(logits, axis=-1).astype(np.uint8)
