"""Local spatial enhancement: gate selected high-level channels with weights
extracted from the low-level map via 3x3 conv -> patch merge -> 1x1 conv.

The channels at index >= split_k pass through untouched, bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import ConvParams, conv2d, conv2d_backward, conv_init, patch_merge, \
    patch_unmerge
from .tensor import Rng, Tensor, channel_concat, channel_split, sigmoid_array


@dataclass
class LseParams:
    """Weight branch (pre_conv -> merge -> post_conv) plus the split point.

    pre_conv: 3x3, c_low -> mid, same padding.
    post_conv: 1x1, reduction^2 * mid -> split_k.
    """

    pre_conv: ConvParams
    post_conv: ConvParams
    split_k: int
    reduction: int
    gate_activation: str = "none"

    def __post_init__(self):
        if self.reduction not in (2, 4):
            raise ConfigError(f"reduction must be 2 or 4, got {self.reduction}")
        if self.gate_activation not in ("none", "sigmoid"):
            raise ConfigError(f"unknown gate activation {self.gate_activation!r}")
        r2 = self.reduction ** 2
        if self.post_conv.c_in != r2 * self.pre_conv.c_out:
            raise ConfigError(
                f"post_conv expects {self.post_conv.c_in} channels, patch merge "
                f"produces {r2 * self.pre_conv.c_out}")
        if self.post_conv.c_out != self.split_k:
            raise ConfigError(
                f"post_conv must emit split_k={self.split_k} channels, "
                f"got {self.post_conv.c_out}")
        if self.post_conv.k != 1 or self.pre_conv.k != 3:
            raise ConfigError("pre_conv must be 3x3 and post_conv 1x1")

    @property
    def c_low(self) -> int:
        return self.pre_conv.c_in

    def astype(self, dtype: np.dtype) -> "LseParams":
        return LseParams(self.pre_conv.astype(dtype), self.post_conv.astype(dtype),
                         self.split_k, self.reduction, self.gate_activation)


def lse_init(rng: Rng, c_low: int, c_high: int, reduction: int, split_k: int,
             mid: int, gate_activation: str = "none") -> LseParams:
    if not 0 < split_k < c_high:
        raise ConfigError(f"split_k={split_k} out of range for {c_high} channels")
    pre = conv_init(rng, c_low, mid, 3)
    post = conv_init(rng, reduction ** 2 * mid, split_k, 1)
    return LseParams(pre, post, split_k, reduction, gate_activation)


def _check_ratio(x_low: Tensor, x_high: Tensor, r: int) -> None:
    nl, _, hl, wl = x_low.shape
    nh, ch, hh, wh = x_high.shape
    if nl != nh:
        raise ShapeError(f"batch mismatch: low {nl} vs high {nh}")
    if (hl, wl) != (r * hh, r * wh):
        raise ShapeError(
            f"low-level {hl}x{wl} must be exactly {r}x the high-level {hh}x{wh}")


def lse_weights(x_low: Tensor, p: LseParams) -> Tensor:
    """Spatial weight map (n, split_k, h/r, w/r) extracted from x_low."""
    if x_low.shape[1] != p.c_low:
        raise ShapeError(
            f"lse_weights: input has {x_low.shape[1]} channels, expects {p.c_low}")
    merged = patch_merge(conv2d(x_low, p.pre_conv), p.reduction)
    xw = conv2d(merged, p.post_conv)
    if p.gate_activation == "sigmoid":
        xw = Tensor._wrap(sigmoid_array(xw.data))
    return xw


def lse_forward(x_low: Tensor, x_high: Tensor, p: LseParams) -> Tensor:
    """Multiply the first split_k high-level channels by the extracted weights."""
    _check_ratio(x_low, x_high, p.reduction)
    c_high = x_high.shape[1]
    if not 0 < p.split_k < c_high:
        raise ShapeError(f"split_k={p.split_k} out of range for {c_high} channels")
    xw = lse_weights(x_low, p)
    fuse, identity = channel_split(x_high, p.split_k)
    return channel_concat([Tensor._wrap(xw.data * fuse.data), identity])


def lse_backward(x_low: Tensor, x_high: Tensor, p: LseParams,
                 grad_out: Tensor) -> tuple[Tensor, Tensor, dict[str, np.ndarray]]:
    """Gradients wrt both inputs and the two convs.

    The identity-channel slice of grad_out passes through to x_high unchanged.
    """
    _check_ratio(x_low, x_high, p.reduction)
    if grad_out.shape != x_high.shape:
        raise ShapeError(
            f"lse_backward: grad_out {grad_out.shape} != {x_high.shape}")
    k = p.split_k
    pre_out = conv2d(x_low, p.pre_conv)
    merged = patch_merge(pre_out, p.reduction)
    xw_lin = conv2d(merged, p.post_conv)
    if p.gate_activation == "sigmoid":
        s = sigmoid_array(xw_lin.data)
        xw = s
        dgate = s * (1.0 - s)
    else:
        xw = xw_lin.data
        dgate = None

    go_fuse = grad_out.data[:, :k]
    fuse = x_high.data[:, :k]
    gx_high = np.concatenate([go_fuse * xw, grad_out.data[:, k:]], axis=1)

    g_xw = go_fuse * fuse
    if dgate is not None:
        g_xw = g_xw * dgate
    g_merged, g_post_w, g_post_b = conv2d_backward(merged, p.post_conv,
                                                   Tensor._wrap(g_xw))
    g_pre_out = patch_unmerge(g_merged, p.reduction)
    gx_low, g_pre_w, g_pre_b = conv2d_backward(x_low, p.pre_conv, g_pre_out)
    grads = {"pre.w": g_pre_w, "pre.b": g_pre_b,
             "post.w": g_post_w, "post.b": g_post_b}
    return gx_low, Tensor._wrap(gx_high), grads
