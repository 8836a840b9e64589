"""Neural primitives with analytic forward and backward passes.

Everything here is a pure function of (inputs, params). Backward functions
recompute the intermediates they need, so no hidden state survives a call.
Convolution uses im2col windows feeding a batched matmul; the direct
nested-loop form lives in the test oracles, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .tensor import Rng, Tensor

# -- convolution --------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights for a k x k convolution, k in {1, 3}, NCHW."""

    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray    # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k = self.weight.shape[2]
        if k not in (1, 3) or self.weight.shape[3] != k:
            raise ConfigError(f"kernel must be 1x1 or 3x3, got {self.weight.shape[2:]}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def astype(self, dtype: np.dtype) -> "ConvParams":
        return replace(self, weight=self.weight.astype(dtype),
                       bias=self.bias.astype(dtype))


def conv_init(rng: Rng, c_in: int, c_out: int, k: int, stride: int = 1,
              padding: int | None = None) -> ConvParams:
    """Kaiming-uniform fan-in weights, zero bias; padding defaults to same."""
    if padding is None:
        padding = (k - 1) // 2
    bound = float(np.sqrt(6.0 / (c_in * k * k)))
    weight = rng.uniform((c_out, c_in, k, k), -bound, bound)
    return ConvParams(weight, np.zeros(c_out, dtype=np.float32), stride, padding)


def conv_out_hw(h: int, w: int, p: ConvParams) -> tuple[int, int]:
    oh = (h + 2 * p.padding - p.k) // p.stride + 1
    ow = (w + 2 * p.padding - p.k) // p.stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv output would be empty for input {h}x{w}")
    return oh, ow


def _im2col(x: np.ndarray, k: int, stride: int, padding: int,
            oh: int, ow: int) -> np.ndarray:
    """Window view (n, c*k*k, oh*ow); copies once via reshape."""
    n, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return win.reshape(n, c * k * k, oh * ow)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {p.c_in}")
    oh, ow = conv_out_hw(h, w, p)
    cols = _im2col(x.data, p.k, p.stride, p.padding, oh, ow)
    w2 = p.weight.reshape(p.c_out, -1)
    out = np.matmul(w2[None], cols)                      # (n, c_out, oh*ow)
    out += p.bias.reshape(1, -1, 1)
    return Tensor._wrap(out.reshape(n, p.c_out, oh, ow))


def conv2d_backward(x: Tensor, p: ConvParams,
                    grad_out: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d(x, p)) wrt (x, weight, bias)."""
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d_backward: input has {c} channels, expects {p.c_in}")
    oh, ow = conv_out_hw(h, w, p)
    if grad_out.shape != (n, p.c_out, oh, ow):
        raise ShapeError(
            f"conv2d_backward: grad_out {grad_out.shape} != {(n, p.c_out, oh, ow)}")
    go = grad_out.data.reshape(n, p.c_out, oh * ow)
    cols = _im2col(x.data, p.k, p.stride, p.padding, oh, ow)

    grad_b = go.sum(axis=(0, 2))
    grad_w = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(p.weight.shape)

    w2 = p.weight.reshape(p.c_out, -1)
    gcols = np.matmul(w2.T[None], go)                    # (n, c*k*k, oh*ow)
    gcols = gcols.reshape(n, c, p.k, p.k, oh, ow)
    hp, wp = h + 2 * p.padding, w + 2 * p.padding
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    s = p.stride
    for i in range(p.k):
        for j in range(p.k):
            gxp[:, :, i:i + s * (oh - 1) + 1:s,
                j:j + s * (ow - 1) + 1:s] += gcols[:, :, i, j]
    pd = p.padding
    gx = gxp[:, :, pd:pd + h, pd:pd + w] if pd else gxp
    return Tensor._wrap(np.ascontiguousarray(gx)), grad_w, grad_b


# -- patch merge (space-to-depth) ---------------------------------------------


def patch_merge(x: Tensor, r: int) -> Tensor:
    """Move each r x r interleaved sub-grid into the channel axis.

    Output channel block g*c..(g+1)*c holds x[:, :, i::r, j::r] with
    g = i*r + j, so the map is a bijection on elements.
    """
    if r not in (2, 4):
        raise ShapeError(f"patch_merge: reduction must be 2 or 4, got {r}")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"patch_merge: spatial dims {h}x{w} not divisible by {r}")
    xr = x.data.reshape(n, c, h // r, r, w // r, r)
    out = xr.transpose(0, 3, 5, 1, 2, 4).reshape(n, r * r * c, h // r, w // r)
    return Tensor._wrap(out)


def patch_unmerge(y: Tensor, r: int) -> Tensor:
    """Exact inverse of patch_merge."""
    if r not in (2, 4):
        raise ShapeError(f"patch_unmerge: reduction must be 2 or 4, got {r}")
    n, rc, hh, ww = y.shape
    if rc % (r * r):
        raise ShapeError(f"patch_unmerge: {rc} channels not divisible by {r * r}")
    c = rc // (r * r)
    yr = y.data.reshape(n, r, r, c, hh, ww)
    out = yr.transpose(0, 3, 4, 1, 5, 2).reshape(n, c, hh * r, ww * r)
    return Tensor._wrap(out)


def patch_merge_backward(grad_out: Tensor, r: int) -> Tensor:
    return patch_unmerge(grad_out, r)


# -- bilinear resize ----------------------------------------------------------


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centers."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    lo = np.floor(src)
    frac = src - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, i1), frac.astype(dtype))
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation with half-pixel centers (align_corners=false)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    ry = _resize_matrix(h, out_h, x.data.dtype)
    rx = _resize_matrix(w, out_w, x.data.dtype)
    t = np.matmul(x.data, rx.T)          # (n, c, h, out_w)
    out = np.matmul(ry, t)               # (n, c, out_h, out_w)
    return Tensor._wrap(out)


def bilinear_resize_backward(grad_out: Tensor, in_h: int, in_w: int) -> Tensor:
    """Adjoint of bilinear_resize back to an (in_h, in_w) grid."""
    n, c, oh, ow = grad_out.shape
    if (oh, ow) == (in_h, in_w):
        return grad_out
    ry = _resize_matrix(in_h, oh, grad_out.data.dtype)
    rx = _resize_matrix(in_w, ow, grad_out.data.dtype)
    t = np.matmul(grad_out.data, rx)     # (n, c, oh, in_w)
    gx = np.matmul(ry.T, t)              # (n, c, in_h, in_w)
    return Tensor._wrap(gx)


# -- 2-D sine-cosine positions -------------------------------------------------


def sincos_pos2d(h: int, w: int, d_model: int,
                 temperature: float = 10000.0) -> np.ndarray:
    """Per-position embedding (h*w, d_model), rows in row-major grid order.

    Channel layout is [sin(x*u), cos(x*u), sin(y*u), cos(y*u)] with
    d_model/4 frequencies u each, so every entry lies in [-1, 1].
    """
    if d_model % 4:
        raise ConfigError(f"d_model {d_model} must be divisible by 4")
    quarter = d_model // 4
    omega = 1.0 / (temperature ** (np.arange(quarter, dtype=np.float64) / quarter))
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    out_x = xs.reshape(-1, 1) * omega          # (h*w, quarter)
    out_y = ys.reshape(-1, 1) * omega
    pos = np.concatenate(
        [np.sin(out_x), np.cos(out_x), np.sin(out_y), np.cos(out_y)], axis=1)
    return pos.astype(np.float32)


# -- layer norm / softmax helpers ----------------------------------------------

LN_EPS = 1e-5


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + LN_EPS)
    return gamma * xhat + beta


def _layer_norm_backward(x: np.ndarray, gamma: np.ndarray,
                         g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    gg = g * gamma
    gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(x.ndim - 1))
    return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    return p * (gp - (p * gp).sum(axis=-1, keepdims=True))


# -- multi-head self-attention layer -------------------------------------------


@dataclass
class AttentionParams:
    """Pre-norm transformer encoder layer: MHSA + FFN, two layer norms."""

    heads: int
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    w1: np.ndarray  # (d_ff, d_model)
    b1: np.ndarray
    w2: np.ndarray  # (d_model, d_ff)
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"d_model {d} not divisible by {self.heads} heads")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[0]

    def astype(self, dtype: np.dtype) -> "AttentionParams":
        fields = {k: (v.astype(dtype) if isinstance(v, np.ndarray) else v)
                  for k, v in self.__dict__.items()}
        return AttentionParams(**fields)


_ATTN_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


def attention_init(rng: Rng, d_model: int, heads: int, d_ff: int) -> AttentionParams:
    def lin(fan_out, fan_in):
        bound = float(np.sqrt(6.0 / fan_in))
        return rng.uniform((fan_out, fan_in), -bound, bound)

    z = lambda n: np.zeros(n, dtype=np.float32)
    return AttentionParams(
        heads=heads,
        wq=lin(d_model, d_model), bq=z(d_model),
        wk=lin(d_model, d_model), bk=z(d_model),
        wv=lin(d_model, d_model), bv=z(d_model),
        wo=lin(d_model, d_model), bo=z(d_model),
        w1=lin(d_ff, d_model), b1=z(d_ff),
        w2=lin(d_model, d_ff), b2=z(d_model),
        ln1_g=np.ones(d_model, dtype=np.float32), ln1_b=z(d_model),
        ln2_g=np.ones(d_model, dtype=np.float32), ln2_b=z(d_model),
    )


def _mhsa_core(x: np.ndarray, p: AttentionParams, pos: np.ndarray) -> dict:
    """Forward pass keeping every intermediate needed by the backward."""
    n, seq, d = x.shape
    hh = p.heads
    dh = d // hh
    h1 = _layer_norm(x, p.ln1_g, p.ln1_b)
    qk_in = h1 + pos
    q = qk_in @ p.wq.T + p.bq
    k = qk_in @ p.wk.T + p.bk
    v = h1 @ p.wv.T + p.bv

    def split(t):
        return t.reshape(n, seq, hh, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) / np.sqrt(dh)
    probs = _softmax(scores)
    ctx = np.matmul(probs, vh)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(n, seq, d)
    attn = ctx @ p.wo.T + p.bo
    x1 = x + attn
    h2 = _layer_norm(x1, p.ln2_g, p.ln2_b)
    a1 = h2 @ p.w1.T + p.b1
    r1 = np.maximum(a1, 0)
    f = r1 @ p.w2.T + p.b2
    out = x1 + f
    return dict(h1=h1, qk_in=qk_in, qh=qh, kh=kh, vh=vh, probs=probs,
                ctx=ctx, x1=x1, h2=h2, a1=a1, r1=r1, out=out)


def mhsa_layer(tokens: np.ndarray, p: AttentionParams,
               pos: np.ndarray) -> np.ndarray:
    """Pre-norm encoder layer; positions are added to queries and keys only.

    tokens: (n, seq, d_model); pos: (seq, d_model) or zeros-compatible.
    """
    n, seq, d = tokens.shape
    if d != p.d_model:
        raise ShapeError(f"mhsa_layer: tokens have d={d}, params expect {p.d_model}")
    if pos.shape != (seq, d):
        raise ShapeError(f"mhsa_layer: pos shape {pos.shape} != {(seq, d)}")
    return _mhsa_core(tokens, p, pos.astype(tokens.dtype))["out"]


def mhsa_backward(tokens: np.ndarray, p: AttentionParams, pos: np.ndarray,
                  grad_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Analytic gradients wrt tokens and every parameter; recomputes forward."""
    n, seq, d = tokens.shape
    if grad_out.shape != tokens.shape:
        raise ShapeError(
            f"mhsa_backward: grad_out {grad_out.shape} != {tokens.shape}")
    hh = p.heads
    dh = d // hh
    c = _mhsa_core(tokens, p, pos.astype(tokens.dtype))
    g = {}

    # out = x1 + f(h2(x1))
    gf = grad_out
    gr1 = gf @ p.w2
    g["w2"] = np.einsum("nld,nlf->df", gf, c["r1"])
    g["b2"] = gf.sum(axis=(0, 1))
    ga1 = gr1 * (c["a1"] > 0)
    g["w1"] = np.einsum("nlf,nld->fd", ga1, c["h2"])
    g["b1"] = ga1.sum(axis=(0, 1))
    gh2 = ga1 @ p.w1
    gx1, g["ln2_g"], g["ln2_b"] = _layer_norm_backward(c["x1"], p.ln2_g, gh2)
    gx1 = gx1 + grad_out

    # x1 = x + attn
    gattn = gx1
    gctx = gattn @ p.wo
    g["wo"] = np.einsum("nld,nle->de", gattn, c["ctx"])
    g["bo"] = gattn.sum(axis=(0, 1))

    gctx_h = gctx.reshape(n, seq, hh, dh).transpose(0, 2, 1, 3)
    gprobs = np.matmul(gctx_h, c["vh"].transpose(0, 1, 3, 2))
    gvh = np.matmul(c["probs"].transpose(0, 1, 3, 2), gctx_h)
    gscores = _softmax_backward(c["probs"], gprobs) / np.sqrt(dh)
    gqh = np.matmul(gscores, c["kh"])
    gkh = np.matmul(gscores.transpose(0, 1, 3, 2), c["qh"])

    def join(t):
        return t.transpose(0, 2, 1, 3).reshape(n, seq, d)

    gq, gk, gv = join(gqh), join(gkh), join(gvh)
    g["wq"] = np.einsum("nld,nle->de", gq, c["qk_in"])
    g["bq"] = gq.sum(axis=(0, 1))
    g["wk"] = np.einsum("nld,nle->de", gk, c["qk_in"])
    g["bk"] = gk.sum(axis=(0, 1))
    g["wv"] = np.einsum("nld,nle->de", gv, c["h1"])
    g["bv"] = gv.sum(axis=(0, 1))

    gh1 = gq @ p.wq + gk @ p.wk + gv @ p.wv
    gx_ln, g["ln1_g"], g["ln1_b"] = _layer_norm_backward(tokens, p.ln1_g, gh1)
    gx = gx_ln + gx1
    return gx, g


# -- RepBlock and structural reparameterization --------------------------------


@dataclass
class RepBlockParams:
    """Two conv branches (3x3 + 1x1) plus optional identity, fused for deploy.

    Forward is relu(branch3x3(x) + branch1x1(x) [+ x]); after
    reparameterize() the fused 3x3 computes the same map within f32 noise.
    """

    branch3x3: ConvParams
    branch1x1: ConvParams
    use_identity: bool = False
    fused: ConvParams | None = None

    def __post_init__(self):
        b3, b1 = self.branch3x3, self.branch1x1
        if b3.k != 3 or b1.k != 1:
            raise ConfigError("rep block needs a 3x3 branch and a 1x1 branch")
        if b3.stride != 1 or b1.stride != 1 or b3.padding != 1 or b1.padding != 0:
            raise ConfigError("rep block branches must be stride 1, same padding")
        if (b3.c_in, b3.c_out) != (b1.c_in, b1.c_out):
            raise ConfigError("rep block branches disagree on channel counts")
        if self.use_identity and b3.c_in != b3.c_out:
            raise ConfigError("identity branch requires c_in == c_out")

    @property
    def c_in(self) -> int:
        return self.branch3x3.c_in

    @property
    def c_out(self) -> int:
        return self.branch3x3.c_out

    def astype(self, dtype: np.dtype) -> "RepBlockParams":
        return RepBlockParams(self.branch3x3.astype(dtype),
                              self.branch1x1.astype(dtype), self.use_identity,
                              self.fused.astype(dtype) if self.fused else None)


def rep_init(rng: Rng, c_in: int, c_out: int,
             use_identity: bool | None = None) -> RepBlockParams:
    if use_identity is None:
        use_identity = c_in == c_out
    return RepBlockParams(conv_init(rng, c_in, c_out, 3),
                          conv_init(rng, c_in, c_out, 1), use_identity)


def _rep_preact(x: Tensor, p: RepBlockParams) -> Tensor:
    pre = conv2d(x, p.branch3x3).data + conv2d(x, p.branch1x1).data
    if p.use_identity:
        pre = pre + x.data
    return Tensor._wrap(pre)


def rep_block(x: Tensor, p: RepBlockParams, mode: str = "train") -> Tensor:
    if mode == "deploy":
        if p.fused is None:
            raise StateError("deploy mode requires reparameterize() first")
        return Tensor._wrap(np.maximum(conv2d(x, p.fused).data, 0))
    if mode != "train":
        raise ConfigError(f"unknown rep block mode {mode!r}")
    return Tensor._wrap(np.maximum(_rep_preact(x, p).data, 0))


def rep_block_backward(x: Tensor, p: RepBlockParams,
                       grad_out: Tensor) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Train-mode gradients for input and both branch params."""
    pre = _rep_preact(x, p)
    gpre = Tensor._wrap(grad_out.data * (pre.data > 0))
    gx3, gw3, gb3 = conv2d_backward(x, p.branch3x3, gpre)
    gx1, gw1, gb1 = conv2d_backward(x, p.branch1x1, gpre)
    gx = gx3.data + gx1.data
    if p.use_identity:
        gx = gx + gpre.data
    grads = {"w3": gw3, "b3": gb3, "w1": gw1, "b1": gb1}
    return Tensor._wrap(gx), grads


def reparameterize(p: RepBlockParams) -> RepBlockParams:
    """Fold both branches (and identity) into one 3x3 kernel plus bias."""
    if p.use_identity and p.c_in != p.c_out:
        raise ConfigError("identity branch requires c_in == c_out")
    w = p.branch3x3.weight.copy()
    w[:, :, 1:2, 1:2] += p.branch1x1.weight
    if p.use_identity:
        idx = np.arange(p.c_in)
        w[idx, idx, 1, 1] += 1.0
    b = p.branch3x3.bias + p.branch1x1.bias
    fused = ConvParams(w, b, stride=1, padding=1)
    return RepBlockParams(p.branch3x3, p.branch1x1, p.use_identity, fused)
