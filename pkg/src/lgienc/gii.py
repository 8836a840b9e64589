"""Global information injection: gate projected low-level features with a
sigmoid map derived from the high-level features, add interpolated high-level
content, refine with a rep block.

Output resolution always equals the low-level input's resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import ConvParams, RepBlockParams, bilinear_resize, \
    bilinear_resize_backward, conv2d, conv2d_backward, conv_init, rep_block, \
    rep_block_backward, rep_init
from .tensor import Rng, Tensor, sigmoid_array


@dataclass
class GiiParams:
    """Three 1x1 projections into a shared fusion width plus a rep block.

    weight_conv and info_conv read the high-level map; low_conv reads the
    low-level map; all three agree on the fusion width, and the rep block
    maps that width back to the low-level channel count.
    """

    weight_conv: ConvParams
    info_conv: ConvParams
    low_conv: ConvParams
    rep: RepBlockParams

    def __post_init__(self):
        for name, conv in (("weight_conv", self.weight_conv),
                           ("info_conv", self.info_conv),
                           ("low_conv", self.low_conv)):
            if conv.k != 1:
                raise ConfigError(f"{name} must be a 1x1 conv")
        mid = self.weight_conv.c_out
        if self.info_conv.c_out != mid or self.low_conv.c_out != mid:
            raise ConfigError("the three projections disagree on fusion width")
        if self.weight_conv.c_in != self.info_conv.c_in:
            raise ConfigError("weight_conv and info_conv read the same input")
        if self.rep.c_in != mid:
            raise ConfigError(
                f"rep block expects {self.rep.c_in} channels, fusion width is {mid}")

    @property
    def c_low(self) -> int:
        return self.low_conv.c_in

    @property
    def c_high(self) -> int:
        return self.weight_conv.c_in

    @property
    def mid(self) -> int:
        return self.weight_conv.c_out

    def astype(self, dtype: np.dtype) -> "GiiParams":
        return GiiParams(self.weight_conv.astype(dtype), self.info_conv.astype(dtype),
                         self.low_conv.astype(dtype), self.rep.astype(dtype))


def gii_init(rng: Rng, c_low: int, c_high: int, mid: int) -> GiiParams:
    if mid < 1:
        raise ConfigError(f"fusion width must be positive, got {mid}")
    return GiiParams(
        weight_conv=conv_init(rng, c_high, mid, 1),
        info_conv=conv_init(rng, c_high, mid, 1),
        low_conv=conv_init(rng, c_low, mid, 1),
        rep=rep_init(rng, mid, c_low, use_identity=False),
    )


def _check_inputs(x_low: Tensor, x_high: Tensor, p: GiiParams) -> None:
    nl, cl, hl, wl = x_low.shape
    nh, ch, hh, wh = x_high.shape
    if nl != nh:
        raise ShapeError(f"batch mismatch: low {nl} vs high {nh}")
    if cl != p.c_low:
        raise ShapeError(f"low-level input has {cl} channels, expects {p.c_low}")
    if ch != p.c_high:
        raise ShapeError(f"high-level input has {ch} channels, expects {p.c_high}")
    if hh > hl or wh > wl:
        raise ShapeError(
            f"high-level {hh}x{wh} must not exceed low-level {hl}x{wl}")
    if p.rep.c_out != cl:
        raise ShapeError(
            f"rep block emits {p.rep.c_out} channels, low level has {cl}")


def gii_forward(x_low: Tensor, x_high: Tensor, p: GiiParams,
                mode: str = "train") -> Tensor:
    """Fused low-level map, same shape as x_low.

    weights = resize(sigmoid(weight_conv(x_high))); content =
    resize(info_conv(x_high)); the gated sum low_conv(x_low) * weights +
    content is refined by the rep block in the requested mode.
    """
    _check_inputs(x_low, x_high, p)
    _, _, hl, wl = x_low.shape
    weights = bilinear_resize(
        Tensor._wrap(sigmoid_array(conv2d(x_high, p.weight_conv).data)), hl, wl)
    content = bilinear_resize(conv2d(x_high, p.info_conv), hl, wl)
    att = conv2d(x_low, p.low_conv).data * weights.data + content.data
    return rep_block(Tensor._wrap(att), p.rep, mode)


def gii_backward(x_low: Tensor, x_high: Tensor, p: GiiParams,
                 grad_out: Tensor) -> tuple[Tensor, Tensor, dict[str, np.ndarray]]:
    """Train-mode gradients wrt both inputs and all params."""
    _check_inputs(x_low, x_high, p)
    if grad_out.shape != x_low.shape:
        raise ShapeError(f"gii_backward: grad_out {grad_out.shape} != {x_low.shape}")
    _, _, hl, wl = x_low.shape
    _, _, hh, wh = x_high.shape

    s = sigmoid_array(conv2d(x_high, p.weight_conv).data)
    weights = bilinear_resize(Tensor._wrap(s), hl, wl)
    content = bilinear_resize(conv2d(x_high, p.info_conv), hl, wl)
    low = conv2d(x_low, p.low_conv)
    att = Tensor._wrap(low.data * weights.data + content.data)

    g_att, rep_grads = rep_block_backward(att, p.rep, grad_out)
    g_low = Tensor._wrap(g_att.data * weights.data)
    g_weights = Tensor._wrap(g_att.data * low.data)

    g_s = bilinear_resize_backward(g_weights, hh, wh)
    g_wpre = Tensor._wrap(g_s.data * s * (1.0 - s))
    g_ipre = bilinear_resize_backward(g_att, hh, wh)

    gx_high_w, g_ww, g_wb = conv2d_backward(x_high, p.weight_conv, g_wpre)
    gx_high_i, g_iw, g_ib = conv2d_backward(x_high, p.info_conv, g_ipre)
    gx_low, g_lw, g_lb = conv2d_backward(x_low, p.low_conv, g_low)

    grads = {"weight.w": g_ww, "weight.b": g_wb,
             "info.w": g_iw, "info.b": g_ib,
             "low.w": g_lw, "low.b": g_lb}
    for key, val in rep_grads.items():
        grads[f"rep.{key}"] = val
    return gx_low, Tensor._wrap(gx_high_w.data + gx_high_i.data), grads
