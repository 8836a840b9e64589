"""The full encoder pipeline over a three-level feature pyramid.

Stage order: optional local-spatial enhancement of s4/s5 from s3, one
self-attention layer on the top level, top-down + bottom-up cross-scale
fusion with rep blocks, optional global-information injection into the
fused low (and optionally mid) level, then token concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binding import Binder
from .config import EncoderConfig
from .errors import ShapeError
from .gii import GiiParams, gii_backward, gii_forward, gii_init
from .lse import LseParams, lse_backward, lse_forward, lse_init
from .ops import AttentionParams, ConvParams, RepBlockParams, bilinear_resize, \
    bilinear_resize_backward, conv2d, conv2d_backward, mhsa_backward, mhsa_layer, \
    rep_block, rep_block_backward, reparameterize, sincos_pos2d
from .params import ParamStore
from .tensor import Rng, Tensor


@dataclass
class FeaturePyramid:
    """(s3, s4, s5) at strides 8/16/32; equal batch and channel counts."""

    s3: Tensor
    s4: Tensor
    s5: Tensor

    def __post_init__(self):
        n3, c3, h3, w3 = self.s3.shape
        n4, c4, h4, w4 = self.s4.shape
        n5, c5, h5, w5 = self.s5.shape
        if not n3 == n4 == n5:
            raise ShapeError(f"pyramid batch mismatch: {n3}/{n4}/{n5}")
        if not c3 == c4 == c5:
            raise ShapeError(f"pyramid channel mismatch: {c3}/{c4}/{c5}")
        if (h3, w3) != (2 * h4, 2 * w4) or (h3, w3) != (4 * h5, 4 * w5):
            raise ShapeError(
                f"pyramid spatial dims must halve per level, got "
                f"{h3}x{w3} / {h4}x{w4} / {h5}x{w5}")

    @property
    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.s3, self.s4, self.s5


@dataclass
class EncoderParams:
    lse_s4: LseParams | None
    lse_s5: LseParams | None
    aifi: AttentionParams
    lat4: ConvParams
    td4: RepBlockParams
    lat3: ConvParams
    td3: RepBlockParams
    down4: ConvParams
    bu4: RepBlockParams
    down5: ConvParams
    bu5: RepBlockParams
    gii_hl: GiiParams | None
    gii_hm: GiiParams | None


def init_encoder(cfg: EncoderConfig, rng: Rng) -> tuple[EncoderParams, ParamStore]:
    """Fresh parameters; the store holds the same memory the structs use."""
    store = ParamStore()
    return bind_encoder(cfg, store, rng), store


def bind_encoder(cfg: EncoderConfig, store: ParamStore,
                 rng: Rng | None = None) -> EncoderParams:
    """Bind encoder params to a store (load) or initialize missing ones."""
    b = Binder(store, rng)
    d = cfg.d_model
    lse_s4 = lse_s5 = None
    if cfg.enable_lse:
        lse_s4 = _bind_lse(b, "lse.s4", cfg, reduction=2)
        lse_s5 = _bind_lse(b, "lse.s5", cfg, reduction=4)
    aifi = b.attention("aifi", d, cfg.heads, cfg.d_ff)
    lat4 = b.conv("fusion.lat4", d, d, 1)
    td4 = b.rep("fusion.td4", d, d, use_identity=True)
    lat3 = b.conv("fusion.lat3", d, d, 1)
    td3 = b.rep("fusion.td3", d, d, use_identity=True)
    down4 = b.conv("fusion.down4", d, d, 3, stride=2)
    bu4 = b.rep("fusion.bu4", d, d, use_identity=True)
    down5 = b.conv("fusion.down5", d, d, 3, stride=2)
    bu5 = b.rep("fusion.bu5", d, d, use_identity=True)
    gii_hl = gii_hm = None
    if cfg.enable_gii:
        gii_hl = _bind_gii(b, "gii.hl", cfg)
        if cfg.gii_to_mid:
            gii_hm = _bind_gii(b, "gii.hm", cfg)
    return EncoderParams(lse_s4, lse_s5, aifi, lat4, td4, lat3, td3,
                         down4, bu4, down5, bu5, gii_hl, gii_hm)


def _bind_lse(b: Binder, name: str, cfg: EncoderConfig, reduction: int) -> LseParams:
    pre = b.conv(f"{name}.pre", cfg.d_model, cfg.lse_mid, 3)
    post = b.conv(f"{name}.post", reduction ** 2 * cfg.lse_mid, cfg.split_k, 1)
    return LseParams(pre, post, cfg.split_k, reduction, cfg.gate_activation)


def _bind_gii(b: Binder, name: str, cfg: EncoderConfig) -> GiiParams:
    d, mid = cfg.d_model, cfg.gii_mid
    return GiiParams(
        weight_conv=b.conv(f"{name}.weight", d, mid, 1),
        info_conv=b.conv(f"{name}.info", d, mid, 1),
        low_conv=b.conv(f"{name}.low", d, mid, 1),
        rep=b.rep(f"{name}.rep", mid, d, use_identity=False),
    )


def encoder_reparameterize(p: EncoderParams) -> EncoderParams:
    """Fuse every rep block for deploy-mode forwards."""
    out = EncoderParams(**p.__dict__)
    out.td4 = reparameterize(p.td4)
    out.td3 = reparameterize(p.td3)
    out.bu4 = reparameterize(p.bu4)
    out.bu5 = reparameterize(p.bu5)
    if p.gii_hl is not None:
        out.gii_hl = GiiParams(p.gii_hl.weight_conv, p.gii_hl.info_conv,
                               p.gii_hl.low_conv, reparameterize(p.gii_hl.rep))
    if p.gii_hm is not None:
        out.gii_hm = GiiParams(p.gii_hm.weight_conv, p.gii_hm.info_conv,
                               p.gii_hm.low_conv, reparameterize(p.gii_hm.rep))
    return out


# -- token concatenation -------------------------------------------------------


def _to_tokens(x: Tensor) -> np.ndarray:
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.data.reshape(n, c, h * w).transpose(0, 2, 1))


def _from_tokens(t: np.ndarray, h: int, w: int) -> Tensor:
    n, hw, c = t.shape
    return Tensor._wrap(np.ascontiguousarray(
        t.transpose(0, 2, 1).reshape(n, c, h, w)))


def concat_fuse(f_low: Tensor, f_mid: Tensor, f_high: Tensor) -> np.ndarray:
    """Flatten each level row-major to (n, h*w, c) and join along tokens."""
    c = f_low.shape[1]
    n = f_low.shape[0]
    for f in (f_mid, f_high):
        if f.shape[1] != c:
            raise ShapeError(
                f"concat_fuse: channel mismatch {c} vs {f.shape[1]}")
        if f.shape[0] != n:
            raise ShapeError(f"concat_fuse: batch mismatch {n} vs {f.shape[0]}")
    return np.concatenate([_to_tokens(f_low), _to_tokens(f_mid),
                           _to_tokens(f_high)], axis=1)


# -- forward -------------------------------------------------------------------


def _fusion_forward(s3: Tensor, s4p: Tensor, s5a: Tensor, p: EncoderParams,
                    mode: str) -> dict:
    """Top-down then bottom-up path; returns every intermediate."""
    _, _, h3, w3 = s3.shape
    _, _, h4, w4 = s4p.shape
    td4_in = Tensor._wrap(conv2d(s4p, p.lat4).data
                          + bilinear_resize(s5a, h4, w4).data)
    p4 = rep_block(td4_in, p.td4, mode)
    td3_in = Tensor._wrap(conv2d(s3, p.lat3).data
                          + bilinear_resize(p4, h3, w3).data)
    p3 = rep_block(td3_in, p.td3, mode)
    bu4_in = Tensor._wrap(conv2d(p3, p.down4).data + p4.data)
    f_mid = rep_block(bu4_in, p.bu4, mode)
    bu5_in = Tensor._wrap(conv2d(f_mid, p.down5).data + s5a.data)
    f_high = rep_block(bu5_in, p.bu5, mode)
    return dict(td4_in=td4_in, p4=p4, td3_in=td3_in, p3=p3,
                bu4_in=bu4_in, f_mid=f_mid, bu5_in=bu5_in, f_high=f_high)


def _aifi_forward(s5: Tensor, p: AttentionParams) -> Tensor:
    _, _, h5, w5 = s5.shape
    pos = sincos_pos2d(h5, w5, p.d_model)
    tokens = mhsa_layer(_to_tokens(s5), p, pos)
    return _from_tokens(tokens, h5, w5)


def encoder_forward(pyr: FeaturePyramid, p: EncoderParams, cfg: EncoderConfig,
                    mode: str = "train") -> tuple[np.ndarray, FeaturePyramid]:
    """Fused tokens (n, L, d_model) and the fused output pyramid."""
    s3, s4, s5 = pyr.levels
    if s3.shape[1] != cfg.d_model:
        raise ShapeError(
            f"pyramid has {s3.shape[1]} channels, config says {cfg.d_model}")
    if cfg.enable_lse:
        s4p = lse_forward(s3, s4, p.lse_s4)
        s5p = lse_forward(s3, s5, p.lse_s5)
    else:
        s4p, s5p = s4, s5
    s5a = _aifi_forward(s5p, p.aifi)
    fus = _fusion_forward(s3, s4p, s5a, p, mode)
    f_low, f_mid, f_high = fus["p3"], fus["f_mid"], fus["f_high"]
    if cfg.enable_gii:
        f_low = gii_forward(f_low, f_high, p.gii_hl, mode)
        if cfg.gii_to_mid:
            f_mid = gii_forward(f_mid, f_high, p.gii_hm, mode)
    tokens = concat_fuse(f_low, f_mid, f_high)
    return tokens, FeaturePyramid(f_low, f_mid, f_high)


def encoder_forward_baseline(pyr: FeaturePyramid, p: EncoderParams,
                             cfg: EncoderConfig,
                             mode: str = "train") -> tuple[np.ndarray, FeaturePyramid]:
    """Reference path with the enhancement stages omitted entirely."""
    s3, s4, s5 = pyr.levels
    s5a = _aifi_forward(s5, p.aifi)
    fus = _fusion_forward(s3, s4, s5a, p, mode)
    tokens = concat_fuse(fus["p3"], fus["f_mid"], fus["f_high"])
    return tokens, FeaturePyramid(fus["p3"], fus["f_mid"], fus["f_high"])


# -- backward ------------------------------------------------------------------


def _split_tokens(grad_tokens: np.ndarray,
                  shapes: list[tuple[int, int, int, int]]) -> list[Tensor]:
    grads = []
    offset = 0
    for n, c, h, w in shapes:
        part = grad_tokens[:, offset:offset + h * w, :]
        grads.append(_from_tokens(part, h, w))
        offset += h * w
    if offset != grad_tokens.shape[1]:
        raise ShapeError(
            f"token grad has {grad_tokens.shape[1]} tokens, expected {offset}")
    return grads


def encoder_backward(pyr: FeaturePyramid, p: EncoderParams, cfg: EncoderConfig,
                     grad_tokens: np.ndarray
                     ) -> tuple[tuple[Tensor, Tensor, Tensor], dict[str, np.ndarray]]:
    """Gradients wrt the input pyramid and every parameter (train mode)."""
    s3, s4, s5 = pyr.levels
    grads: dict[str, np.ndarray] = {}

    def emit(prefix: str, local: dict[str, np.ndarray]) -> None:
        for key, val in local.items():
            name = f"{prefix}.{key}"
            grads[name] = grads[name] + val if name in grads else val

    # Recompute the forward chain.
    if cfg.enable_lse:
        s4p = lse_forward(s3, s4, p.lse_s4)
        s5p = lse_forward(s3, s5, p.lse_s5)
    else:
        s4p, s5p = s4, s5
    _, _, h5, w5 = s5p.shape
    pos = sincos_pos2d(h5, w5, p.aifi.d_model)
    s5p_tok = _to_tokens(s5p)
    s5a = _from_tokens(mhsa_layer(s5p_tok, p.aifi, pos), h5, w5)
    fus = _fusion_forward(s3, s4p, s5a, p, "train")
    f_low0, f_mid0, f_high = fus["p3"], fus["f_mid"], fus["f_high"]

    g_low, g_mid, g_high = _split_tokens(
        grad_tokens, [f_low0.shape, f_mid0.shape, f_high.shape])

    if cfg.enable_gii:
        if cfg.gii_to_mid:
            g_mid0, g_high_m, gg = gii_backward(f_mid0, f_high, p.gii_hm, g_mid)
            emit("gii.hm", gg)
            g_mid = g_mid0
            g_high = Tensor._wrap(g_high.data + g_high_m.data)
        g_low0, g_high_l, gg = gii_backward(f_low0, f_high, p.gii_hl, g_low)
        emit("gii.hl", gg)
        g_low = g_low0
        g_high = Tensor._wrap(g_high.data + g_high_l.data)

    # Bottom-up stage, reversed.
    g_bu5_in, gg = rep_block_backward(fus["bu5_in"], p.bu5, g_high)
    emit("fusion.bu5", gg)
    g_s5a = g_bu5_in
    gx, gw, gb = conv2d_backward(fus["f_mid"], p.down5, g_bu5_in)
    emit("fusion.down5", {"w": gw, "b": gb})
    g_mid = Tensor._wrap(g_mid.data + gx.data)

    g_bu4_in, gg = rep_block_backward(fus["bu4_in"], p.bu4, g_mid)
    emit("fusion.bu4", gg)
    g_p4 = g_bu4_in
    gx, gw, gb = conv2d_backward(fus["p3"], p.down4, g_bu4_in)
    emit("fusion.down4", {"w": gw, "b": gb})
    g_p3 = Tensor._wrap(g_low.data + gx.data)

    # Top-down stage, reversed.
    g_td3_in, gg = rep_block_backward(fus["td3_in"], p.td3, g_p3)
    emit("fusion.td3", gg)
    gx, gw, gb = conv2d_backward(s3, p.lat3, g_td3_in)
    emit("fusion.lat3", {"w": gw, "b": gb})
    g_s3 = gx
    _, _, h4, w4 = s4p.shape
    g_p4 = Tensor._wrap(g_p4.data
                        + bilinear_resize_backward(g_td3_in, h4, w4).data)

    g_td4_in, gg = rep_block_backward(fus["td4_in"], p.td4, g_p4)
    emit("fusion.td4", gg)
    gx, gw, gb = conv2d_backward(s4p, p.lat4, g_td4_in)
    emit("fusion.lat4", {"w": gw, "b": gb})
    g_s4p = gx
    g_s5a = Tensor._wrap(g_s5a.data
                         + bilinear_resize_backward(g_td4_in, h5, w5).data)

    # Attention stage.
    g_tok, gg = mhsa_backward(s5p_tok, p.aifi, pos, _to_tokens(g_s5a))
    emit("aifi", gg)
    g_s5p = _from_tokens(g_tok, h5, w5)

    # Enhancement stage.
    if cfg.enable_lse:
        g_s3_a, g_s4, gg = lse_backward(s3, s4, p.lse_s4, g_s4p)
        emit("lse.s4", gg)
        g_s3_b, g_s5, gg = lse_backward(s3, s5, p.lse_s5, g_s5p)
        emit("lse.s5", gg)
        g_s3 = Tensor._wrap(g_s3.data + g_s3_a.data + g_s3_b.data)
    else:
        g_s4, g_s5 = g_s4p, g_s5p
    return (g_s3, g_s4, g_s5), grads
