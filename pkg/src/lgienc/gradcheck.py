"""Finite-difference validation of every analytic backward in the library.

Central differences at f64 with input-scaled step h = step * (|x| + 1).
Per-coordinate relative error |a - n| / max(|a|, |n|, 1e-12); instances that
put a relu pre-activation too close to its kink are resampled, since finite
differences are invalid there (threshold 1e-3 for single ops, 1e-5 for
composite modules, where the stricter guard would reject every draw).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .config import EncoderConfig
from .errors import NumericError
from .gii import gii_backward, gii_forward, gii_init
from .lse import lse_backward, lse_forward, lse_init
from .ops import _ATTN_FIELDS, AttentionParams, ConvParams, RepBlockParams, \
    _rep_preact, attention_init, bilinear_resize, bilinear_resize_backward, \
    conv2d, conv2d_backward, conv_init, mhsa_backward, mhsa_layer, patch_merge, \
    patch_unmerge, rep_block, rep_block_backward, rep_init, sincos_pos2d
from .tensor import Rng, Tensor

REL_EPS = 1e-12
DEFAULT_STEP = 1e-4
PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-5


@dataclass
class GradReport:
    op: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = PRIMITIVE_TOL
    step: float = DEFAULT_STEP
    passed: bool = True

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def line(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"{state}  {self.op:<24s} max rel err {self.max_error:.3e} "
                f"(tol {self.tolerance:.0e})")


def fd_gradient(f, at: dict[str, np.ndarray],
                step: float = DEFAULT_STEP) -> dict[str, np.ndarray]:
    """Central-difference gradients of scalar f wrt every array in `at`.

    Arrays must be f64; f is evaluated 2 * total-coordinate-count times.
    """
    base = float(f(at))
    if not np.isfinite(base):
        raise NumericError(f"f is non-finite at the expansion point: {base}")
    grads = {}
    for name, x in at.items():
        x = np.asarray(x, dtype=np.float64)
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            h = step * (abs(flat[i]) + 1.0)
            orig = flat[i]
            work = dict(at)
            xp = x.copy()
            xp.reshape(-1)[i] = orig + h
            work[name] = xp
            fp = float(f(work))
            xm = x.copy()
            xm.reshape(-1)[i] = orig - h
            work[name] = xm
            fm = float(f(work))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"f is non-finite while perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_EPS)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _t64(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


def _proj(rng: Rng, shape) -> np.ndarray:
    """Projection weights bounded away from zero, so gradients stay generic."""
    r = rng.uniform(shape, 0.5, 1.5, dtype="f64")
    signs = np.where(rng.uniform(shape, 0.0, 1.0, dtype="f64") < 0.5, -1.0, 1.0)
    return r * signs


# -- individual checks ---------------------------------------------------------
#
# Each case returns (f, analytic_grads, arrays, min_preact). f maps the
# array dict to a scalar; analytic_grads is the hand-written backward
# evaluated once; min_preact is the smallest |relu pre-activation| in the
# instance (inf when the op has no kinks).


def _case_fd_linear(rng: Rng):
    x = rng.uniform((2, 3, 2, 2), -1, 1, dtype="f64")
    f = lambda a: float(np.sum(a["x"]))
    return f, {"x": np.ones_like(x)}, {"x": x}, np.inf


def _case_fd_quadratic(rng: Rng):
    x = rng.uniform((1, 2, 3, 3), -1, 1, dtype="f64")
    f = lambda a: float(np.sum(a["x"] ** 2))
    return f, {"x": 2.0 * x}, {"x": x}, np.inf


def _case_fd_sigmoid(rng: Rng):
    x = rng.uniform((1, 2, 3, 3), -2, 2, dtype="f64")
    f = lambda a: float(np.sum(1.0 / (1.0 + np.exp(-a["x"]))))
    s = 1.0 / (1.0 + np.exp(-x))
    return f, {"x": s * (1.0 - s)}, {"x": x}, np.inf


def _conv_from(a: dict, stride: int, padding: int) -> ConvParams:
    return ConvParams(a["w"], a["b"], stride, padding)


def _case_conv2d(stride: int):
    def build(rng: Rng):
        x = rng.uniform((1, 2, 5, 5), -1, 1, dtype="f64")
        w = rng.uniform((3, 2, 3, 3), -1, 1, dtype="f64")
        b = rng.uniform((3,), -1, 1, dtype="f64")
        p = ConvParams(w, b, stride, 1)
        r = _proj(rng, conv2d(_t64(x), p).shape)

        def f(a):
            out = conv2d(_t64(a["x"]), _conv_from(a, stride, 1))
            return float(np.sum(out.data * r))

        gx, gw, gb = conv2d_backward(_t64(x), p, _t64(r))
        return f, {"x": gx.data, "w": gw, "b": gb}, {"x": x, "w": w, "b": b}, np.inf
    return build


def _case_patch_merge(rng: Rng):
    x = rng.uniform((1, 2, 4, 4), -1, 1, dtype="f64")
    r = _proj(rng, patch_merge(_t64(x), 2).shape)
    f = lambda a: float(np.sum(patch_merge(_t64(a["x"]), 2).data * r))
    gx = patch_unmerge(_t64(r), 2)
    return f, {"x": gx.data}, {"x": x}, np.inf


def _case_bilinear(rng: Rng):
    x = rng.uniform((1, 2, 3, 4), -1, 1, dtype="f64")
    r = _proj(rng, (1, 2, 5, 7))
    f = lambda a: float(np.sum(bilinear_resize(_t64(a["x"]), 5, 7).data * r))
    gx = bilinear_resize_backward(_t64(r), 3, 4)
    return f, {"x": gx.data}, {"x": x}, np.inf


def _attn_from(a: dict, heads: int) -> AttentionParams:
    return AttentionParams(heads=heads, **{k: a[k] for k in _ATTN_FIELDS})


def _case_mhsa(rng: Rng):
    d, heads, d_ff, seq = 8, 2, 16, 5
    p = attention_init(rng, d, heads, d_ff).astype(np.float64)
    x = rng.uniform((1, seq, d), -1, 1, dtype="f64")
    pos = sincos_pos2d(1, seq, d).astype(np.float64)
    r = _proj(rng, x.shape)
    arrays = {"x": x}
    arrays.update({k: getattr(p, k) for k in _ATTN_FIELDS})

    def f(a):
        return float(np.sum(mhsa_layer(a["x"], _attn_from(a, heads), pos) * r))

    gx, gp = mhsa_backward(x, p, pos, r)
    analytic = {"x": gx}
    analytic.update(gp)
    # FFN relu pre-activations are the only kinks in this layer.
    from .ops import _layer_norm
    h2 = x + _mhsa_attn_only(x, p, pos)
    a1 = _layer_norm(h2, p.ln2_g, p.ln2_b) @ p.w1.T + p.b1
    return f, analytic, arrays, float(np.min(np.abs(a1)))


def _mhsa_attn_only(x: np.ndarray, p: AttentionParams,
                    pos: np.ndarray) -> np.ndarray:
    from .ops import _mhsa_core
    c = _mhsa_core(x, p, pos)
    return c["x1"] - x


def _rep_from(a: dict, use_identity: bool) -> RepBlockParams:
    return RepBlockParams(ConvParams(a["w3"], a["b3"], 1, 1),
                          ConvParams(a["w1"], a["b1"], 1, 0), use_identity)


def _case_rep_block(use_identity: bool):
    def build(rng: Rng):
        c_in, c_out = (3, 3) if use_identity else (2, 4)
        p = rep_init(rng, c_in, c_out, use_identity).astype(np.float64)
        x = rng.uniform((1, c_in, 4, 4), -1, 1, dtype="f64")
        r = _proj(rng, (1, c_out, 4, 4))
        arrays = {"x": x, "w3": p.branch3x3.weight, "b3": p.branch3x3.bias,
                  "w1": p.branch1x1.weight, "b1": p.branch1x1.bias}

        def f(a):
            out = rep_block(_t64(a["x"]), _rep_from(a, use_identity), "train")
            return float(np.sum(out.data * r))

        gx, gp = rep_block_backward(_t64(x), p, _t64(r))
        analytic = {"x": gx.data}
        analytic.update(gp)
        pre = _rep_preact(_t64(x), p)
        return f, analytic, arrays, float(np.min(np.abs(pre.data)))
    return build


def _case_lse(rng: Rng):
    p = lse_init(rng, c_low=3, c_high=4, reduction=2, split_k=2, mid=2)
    p = p.astype(np.float64)
    x_low = rng.uniform((1, 3, 8, 8), -1, 1, dtype="f64")
    x_high = rng.uniform((1, 4, 4, 4), -1, 1, dtype="f64")
    r = _proj(rng, x_high.shape)
    arrays = {"x_low": x_low, "x_high": x_high,
              "pre.w": p.pre_conv.weight, "pre.b": p.pre_conv.bias,
              "post.w": p.post_conv.weight, "post.b": p.post_conv.bias}

    def f(a):
        q = LseFromArrays(a, p)
        out = lse_forward(_t64(a["x_low"]), _t64(a["x_high"]), q.params)
        return float(np.sum(out.data * r))

    gl, gh, gp = lse_backward(_t64(x_low), _t64(x_high), p, _t64(r))
    analytic = {"x_low": gl.data, "x_high": gh.data}
    analytic.update(gp)
    return f, analytic, arrays, np.inf


class LseFromArrays:
    def __init__(self, a: dict, template):
        from .lse import LseParams
        self.params = LseParams(
            ConvParams(a["pre.w"], a["pre.b"], 1, 1),
            ConvParams(a["post.w"], a["post.b"], 1, 0),
            template.split_k, template.reduction, template.gate_activation)


def _case_gii(rng: Rng):
    p = gii_init(rng, c_low=2, c_high=3, mid=2).astype(np.float64)
    x_low = rng.uniform((1, 2, 6, 6), -1, 1, dtype="f64")
    x_high = rng.uniform((1, 3, 3, 3), -1, 1, dtype="f64")
    r = _proj(rng, x_low.shape)
    keys = {"weight": "weight_conv", "info": "info_conv", "low": "low_conv"}
    arrays = {"x_low": x_low, "x_high": x_high}
    for short, attr in keys.items():
        conv = getattr(p, attr)
        arrays[f"{short}.w"] = conv.weight
        arrays[f"{short}.b"] = conv.bias
    arrays.update({"rep.w3": p.rep.branch3x3.weight, "rep.b3": p.rep.branch3x3.bias,
                   "rep.w1": p.rep.branch1x1.weight, "rep.b1": p.rep.branch1x1.bias})

    def rebuild(a):
        from .gii import GiiParams
        return GiiParams(
            ConvParams(a["weight.w"], a["weight.b"], 1, 0),
            ConvParams(a["info.w"], a["info.b"], 1, 0),
            ConvParams(a["low.w"], a["low.b"], 1, 0),
            RepBlockParams(ConvParams(a["rep.w3"], a["rep.b3"], 1, 1),
                           ConvParams(a["rep.w1"], a["rep.b1"], 1, 0), False))

    def f(a):
        out = gii_forward(_t64(a["x_low"]), _t64(a["x_high"]), rebuild(a))
        return float(np.sum(out.data * r))

    gl, gh, gp = gii_backward(_t64(x_low), _t64(x_high), p, _t64(r))
    analytic = {"x_low": gl.data, "x_high": gh.data}
    analytic.update(gp)
    pre = _gii_preact(_t64(x_low), _t64(x_high), p)
    return f, analytic, arrays, float(np.min(np.abs(pre)))


def _gii_preact(x_low: Tensor, x_high: Tensor, p) -> np.ndarray:
    from .tensor import sigmoid_array
    hl, wl = x_low.shape[2], x_low.shape[3]
    s = sigmoid_array(conv2d(x_high, p.weight_conv).data)
    w = bilinear_resize(Tensor._wrap(s), hl, wl)
    i = bilinear_resize(conv2d(x_high, p.info_conv), hl, wl)
    att = Tensor._wrap(conv2d(x_low, p.low_conv).data * w.data + i.data)
    return _rep_preact(att, p.rep).data


def _toy_cfg() -> EncoderConfig:
    return EncoderConfig(d_model=8, split_ratio=0.5, heads=2, d_ff=16,
                         enable_lse=True, enable_gii=True,
                         lse_mid_channels=2, gii_mid_channels=4)


def _case_encoder(rng: Rng):
    cfg = _toy_cfg()
    params, store = enc.init_encoder(cfg, rng)
    names = store.names()
    arrays = {n: store.value(n).astype(np.float64) for n in names}
    x3 = rng.uniform((1, 8, 8, 8), -1, 1, dtype="f64")
    x4 = rng.uniform((1, 8, 4, 4), -1, 1, dtype="f64")
    x5 = rng.uniform((1, 8, 2, 2), -1, 1, dtype="f64")
    arrays.update({"s3": x3, "s4": x4, "s5": x5})
    token_len = 8 * 8 + 4 * 4 + 2 * 2
    r = _proj(rng, (1, token_len, 8))

    def rebuild(a):
        return _bind_encoder_f64(cfg, {n: a[n] for n in names})

    def f(a):
        p = rebuild(a)
        pyr = enc.FeaturePyramid(_t64(a["s3"]), _t64(a["s4"]), _t64(a["s5"]))
        tokens, _ = enc.encoder_forward(pyr, p, cfg)
        return float(np.sum(tokens * r))

    p64 = _bind_encoder_f64(cfg, arrays)
    pyr = enc.FeaturePyramid(_t64(x3), _t64(x4), _t64(x5))
    (g3, g4, g5), gp = enc.encoder_backward(pyr, p64, cfg, r)
    analytic = {"s3": g3.data, "s4": g4.data, "s5": g5.data}
    analytic.update(gp)
    return f, analytic, arrays, _encoder_min_preact(pyr, p64, cfg)


def _bind_encoder_f64(cfg: EncoderConfig, values: dict[str, np.ndarray]):
    """Rebuild EncoderParams from a flat name->f64-array mapping."""
    from .params import ParamStore

    class _Passthrough(ParamStore):
        def __init__(self, vals):
            super().__init__()
            self._vals = vals

        def __contains__(self, name):
            return name in self._vals

        def value(self, name):
            return self._vals[name]

    return enc.bind_encoder(cfg, _Passthrough(values))


def _encoder_min_preact(pyr, params, cfg: EncoderConfig) -> float:
    """Smallest |relu pre-activation| across every rep block and the FFN."""
    from .ops import _layer_norm, _mhsa_core
    s3, s4, s5 = pyr.levels
    worst = np.inf

    def track(pre):
        nonlocal worst
        worst = min(worst, float(np.min(np.abs(pre))))

    s4p = lse_forward(s3, s4, params.lse_s4) if cfg.enable_lse else s4
    s5p = lse_forward(s3, s5, params.lse_s5) if cfg.enable_lse else s5
    _, _, h5, w5 = s5p.shape
    pos = sincos_pos2d(h5, w5, params.aifi.d_model).astype(np.float64)
    tok = enc._to_tokens(s5p)
    core = _mhsa_core(tok, params.aifi, pos)
    track(core["a1"])
    s5a = enc._from_tokens(core["out"], h5, w5)
    fus = enc._fusion_forward(s3, s4p, s5a, params, "train")
    for key, rep in (("td4_in", params.td4), ("td3_in", params.td3),
                     ("bu4_in", params.bu4), ("bu5_in", params.bu5)):
        track(_rep_preact(fus[key], rep).data)
    if cfg.enable_gii:
        track(_gii_preact(fus["p3"], fus["f_high"], params.gii_hl))
    return worst


_CASES = [
    ("fd.linear", _case_fd_linear, PRIMITIVE_TOL, 1e-3),
    ("fd.quadratic", _case_fd_quadratic, PRIMITIVE_TOL, 1e-3),
    ("fd.sigmoid", _case_fd_sigmoid, PRIMITIVE_TOL, 1e-3),
    ("conv2d", _case_conv2d(1), PRIMITIVE_TOL, 1e-3),
    ("conv2d.stride2", _case_conv2d(2), PRIMITIVE_TOL, 1e-3),
    ("patch_merge", _case_patch_merge, PRIMITIVE_TOL, 1e-3),
    ("bilinear_resize", _case_bilinear, PRIMITIVE_TOL, 1e-3),
    ("mhsa_layer", _case_mhsa, PRIMITIVE_TOL, 1e-3),
    ("rep_block.identity", _case_rep_block(True), PRIMITIVE_TOL, 1e-3),
    ("rep_block.plain", _case_rep_block(False), PRIMITIVE_TOL, 1e-3),
    ("lse_forward", _case_lse, COMPOSITE_TOL, 1e-3),
    ("gii_forward", _case_gii, COMPOSITE_TOL, 1e-4),
    ("encoder_forward", _case_encoder, COMPOSITE_TOL, 1e-5),
]

MAX_RESAMPLES = 20


def check_all(seed: int = 0, tolerance: float | None = None,
              step: float = DEFAULT_STEP) -> list[GradReport]:
    """Run every registered check; failures are reported, never raised."""
    reports = []
    root = Rng(seed)
    for idx, (name, builder, default_tol, kink_floor) in enumerate(_CASES):
        tol = tolerance if tolerance is not None else default_tol
        built = None
        for attempt in range(MAX_RESAMPLES):
            rng = root.fork(1000 * (idx + 1) + attempt)
            f, analytic, arrays, min_preact = builder(rng)
            if min_preact >= kink_floor:
                built = (f, analytic, arrays)
                break
        if built is None:
            reports.append(GradReport(name, {"<resample>": np.inf}, tol, step, False))
            continue
        f, analytic, arrays = built
        numeric = fd_gradient(f, arrays, step)
        errors = {k: rel_error(analytic[k], numeric[k]) for k in arrays}
        passed = all(e <= tol for e in errors.values())
        reports.append(GradReport(name, errors, tol, step, passed))
    return reports
