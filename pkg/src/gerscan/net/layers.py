"""Array layers with matching forward/backward passes.

Feature maps are (H, W, C) arrays. Convolutions use "same" zero padding so
spatial dims shrink only by the stride; the dilated tap positions follow
n[i] = sum_k m[i + r*k] w[k], generalized to 2-D. Setting rate=1 recovers the
standard convolution exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LayerError(ValueError):
    pass


@dataclass
class ConvCache:
    """Everything the backward pass needs from one conv forward pass."""

    x_shape: tuple[int, int, int]
    padded_shape: tuple[int, int, int]
    pads: tuple[int, int]
    rate: int
    stride: int
    kernel_shape: tuple[int, int, int, int]
    patches: np.ndarray  # (ho, wo, kh, kw, cin)


def _same_pad(size: int, k: int, rate: int, stride: int) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for same-style zero padding."""
    ke = (k - 1) * rate + 1
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + ke - size, 0)
    return out, total // 2, total - total // 2


def _gather_patches(
    padded: np.ndarray, kh: int, kw: int, ho: int, wo: int, rate: int, stride: int
) -> np.ndarray:
    cin = padded.shape[2]
    patches = np.empty((ho, wo, kh, kw, cin), dtype=padded.dtype)
    for dkh in range(kh):
        for dkw in range(kw):
            rs = dkh * rate
            cs = dkw * rate
            patches[:, :, dkh, dkw, :] = padded[
                rs : rs + (ho - 1) * stride + 1 : stride,
                cs : cs + (wo - 1) * stride + 1 : stride,
                :,
            ]
    return patches


def atrous_conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    rate: int = 1,
    stride: int = 1,
    return_cache: bool = False,
):
    """Dilated 2-D convolution; w has shape (kh, kw, c_in, c_out)."""
    if x.ndim != 3 or w.ndim != 4:
        raise LayerError(f"expected x (H,W,C) and w (kh,kw,cin,cout); got {x.shape} and {w.shape}")
    if x.shape[2] != w.shape[2]:
        raise LayerError(f"channel mismatch: input has {x.shape[2]}, kernel expects {w.shape[2]}")
    if rate < 1 or stride < 1:
        raise LayerError("rate and stride must be >= 1")
    h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, ph0, ph1 = _same_pad(h, kh, rate, stride)
    wo, pw0, pw1 = _same_pad(wid, kw, rate, stride)
    padded = np.pad(x, ((ph0, ph1), (pw0, pw1), (0, 0)))
    patches = _gather_patches(padded, kh, kw, ho, wo, rate, stride)
    out = patches.reshape(ho * wo, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    out = out.reshape(ho, wo, cout)
    if b is not None:
        out = out + b
    if return_cache:
        cache = ConvCache(
            x_shape=(h, wid, cin),
            padded_shape=padded.shape,
            pads=(ph0, pw0),
            rate=rate,
            stride=stride,
            kernel_shape=(kh, kw, cin, cout),
            patches=patches,
        )
        return out, cache
    return out


def atrous_conv2d_backward(
    grad_out: np.ndarray, w: np.ndarray, cache: ConvCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of a conv whose forward produced `cache`."""
    kh, kw, cin, cout = cache.kernel_shape
    ho, wo, _ = grad_out.shape
    rate, stride = cache.rate, cache.stride

    go = grad_out.reshape(ho * wo, cout)
    dw = (cache.patches.reshape(ho * wo, kh * kw * cin).T @ go).reshape(kh, kw, cin, cout)
    db = go.sum(axis=0)

    dpatches = (go @ w.reshape(kh * kw * cin, cout).T).reshape(ho, wo, kh, kw, cin)
    dpadded = np.zeros(cache.padded_shape, dtype=grad_out.dtype)
    for dkh in range(kh):
        for dkw in range(kw):
            rs = dkh * rate
            cs = dkw * rate
            dpadded[
                rs : rs + (ho - 1) * stride + 1 : stride,
                cs : cs + (wo - 1) * stride + 1 : stride,
                :,
            ] += dpatches[:, :, dkh, dkw, :]
    ph0, pw0 = cache.pads
    h, wid, _ = cache.x_shape
    dx = dpadded[ph0 : ph0 + h, pw0 : pw0 + wid, :]
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def _axis_weights(n_in: int, n_out: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(lo_index, hi_index, hi_weight) for 1-D linear resampling, half-pixel centers."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    if n_in > 1:
        lo = np.minimum(lo, n_in - 2)
        hi = lo + 1
    else:
        hi = lo
    frac = (src - lo).astype(dtype)
    return lo, hi, frac


def bilinear_upsample(x: np.ndarray, factor: int, return_cache: bool = False):
    """Bilinear resize of (H, W, C) by an integer factor (half-pixel alignment)."""
    if factor < 1:
        raise LayerError("factor must be >= 1")
    h, w, _ = x.shape
    ry0, ry1, fy = _axis_weights(h, h * factor, x.dtype)
    cx0, cx1, fx = _axis_weights(w, w * factor, x.dtype)
    rows = x[ry0] * (1 - fy)[:, None, None] + x[ry1] * fy[:, None, None]
    out = rows[:, cx0] * (1 - fx)[None, :, None] + rows[:, cx1] * fx[None, :, None]
    if return_cache:
        return out, (x.shape, ry0, ry1, fy, cx0, cx1, fx)
    return out


def bilinear_upsample_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    """Transpose of the (linear) bilinear resize."""
    x_shape, ry0, ry1, fy, cx0, cx1, fx = cache
    h, w, c = x_shape
    grad_rows = np.zeros((len(ry0), w, c), dtype=grad_out.dtype)
    np.add.at(grad_rows, (slice(None), cx0), grad_out * (1 - fx)[None, :, None])
    np.add.at(grad_rows, (slice(None), cx1), grad_out * fx[None, :, None])
    dx = np.zeros((h, w, c), dtype=grad_out.dtype)
    np.add.at(dx, ry0, grad_rows * (1 - fy)[:, None, None])
    np.add.at(dx, ry1, grad_rows * fy[:, None, None])
    return dx
