"""Analytic parameter/FLOP accounting and wall-time micro-benchmarks.

Conventions (fixed so every number is reproducible):
  - one multiply-accumulate = 2 FLOPs;
  - conv = 2 * c_out * c_in * k^2 * h_out * w_out, plus c_out * h_out * w_out
    bias adds;
  - elementwise add / mul / relu = 1 FLOP per output element; sigmoid = 4;
  - bilinear resize = 7 FLOPs per output element (4 muls + 3 adds);
  - layer norm = 8 FLOPs per element; softmax = 4 per logit;
  - patch merge and channel split/concat are pure reindexing: 0 FLOPs;
  - rep blocks count both branches in train mode, the fused conv in deploy.

Parameter counts come from a ParamStore, i.e. the train-mode learnable set
(fused kernels are derived at deploy time and never stored). Reported FLOPs
default to deploy mode, the usual inference accounting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import EncoderConfig
from .encoder import init_encoder
from .errors import ConfigError
from .ops import attention_init, bilinear_resize, conv2d, conv_init, mhsa_layer, \
    patch_merge, rep_init, rep_block, sincos_pos2d
from .params import ParamStore
from .tensor import Rng, Tensor

SIGMOID_FLOPS = 4
RESIZE_FLOPS = 7
LN_FLOPS = 8
SOFTMAX_FLOPS = 4

EXPECTED_DELTAS = {
    "lse": (0.5e6, 2.0e9),
    "gii": (0.5e6, 2.0e9),
    "both": (1.1e6, 5.0e9),
}
DELTA_TOLERANCE = 0.5


@dataclass
class CostReport:
    resolution: int
    mode: str
    params: dict[str, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)
    timings: dict[str, dict] = field(default_factory=dict)


def count_params(store: ParamStore, prefix: str = "") -> int:
    """Element count over parameters whose name starts with prefix."""
    return store.count(prefix)


def conv_flops(c_in: int, c_out: int, k: int, oh: int, ow: int) -> int:
    return 2 * c_in * c_out * k * k * oh * ow + c_out * oh * ow


def rep_flops(c_in: int, c_out: int, h: int, w: int, mode: str) -> int:
    out = c_out * h * w
    if mode == "deploy":
        return conv_flops(c_in, c_out, 3, h, w) + out  # fused conv + relu
    both = conv_flops(c_in, c_out, 3, h, w) + conv_flops(c_in, c_out, 1, h, w)
    return both + 2 * out  # branch add + relu


def _attn_flops(seq: int, d: int, heads: int, d_ff: int) -> int:
    total = LN_FLOPS * seq * d                     # ln1
    total += 2 * seq * d                           # pos added to q and k inputs
    total += 4 * (2 * seq * d * d + seq * d)       # q, k, v, out projections
    total += 2 * seq * seq * d + heads * seq * seq  # scores + scale
    total += SOFTMAX_FLOPS * heads * seq * seq
    total += 2 * seq * seq * d                     # probs @ v
    total += seq * d                               # residual
    total += LN_FLOPS * seq * d                    # ln2
    total += 2 * seq * d * d_ff + seq * d_ff       # ffn in
    total += seq * d_ff                            # relu
    total += 2 * seq * d_ff * d + seq * d          # ffn out
    total += seq * d                               # residual
    return total


def _lse_flops(cfg: EncoderConfig, h3: int, w3: int) -> int:
    d, mid, k = cfg.d_model, cfg.lse_mid, cfg.split_k
    total = 0
    for r in (2, 4):
        hh, wh = h3 // r, w3 // r
        total += conv_flops(d, mid, 3, h3, w3)            # pre conv at low res
        total += conv_flops(r * r * mid, k, 1, hh, wh)    # post conv
        if cfg.gate_activation == "sigmoid":
            total += SIGMOID_FLOPS * k * hh * wh
        total += k * hh * wh                              # gating multiply
    return total


def _gii_flops(cfg: EncoderConfig, hl: int, wl: int, hh: int, wh: int,
               mode: str) -> int:
    d, mid = cfg.d_model, cfg.gii_mid
    total = conv_flops(d, mid, 1, hh, wh) * 2             # weight + info convs
    total += SIGMOID_FLOPS * mid * hh * wh
    total += 2 * RESIZE_FLOPS * mid * hl * wl             # two bilinear resizes
    total += conv_flops(d, mid, 1, hl, wl)                # low conv
    total += 2 * mid * hl * wl                            # gate mul + content add
    total += rep_flops(mid, d, hl, wl, mode)
    return total


def _fusion_flops(cfg: EncoderConfig, h3, w3, h4, w4, h5, w5, mode: str) -> int:
    d = cfg.d_model
    total = conv_flops(d, d, 1, h4, w4)                   # lat4
    total += RESIZE_FLOPS * d * h4 * w4 + d * h4 * w4     # upsample + add
    total += rep_flops(d, d, h4, w4, mode)                # td4
    total += conv_flops(d, d, 1, h3, w3)                  # lat3
    total += RESIZE_FLOPS * d * h3 * w3 + d * h3 * w3
    total += rep_flops(d, d, h3, w3, mode)                # td3
    total += conv_flops(d, d, 3, h4, w4) + d * h4 * w4    # down4 + add
    total += rep_flops(d, d, h4, w4, mode)                # bu4
    total += conv_flops(d, d, 3, h5, w5) + d * h5 * w5    # down5 + add
    total += rep_flops(d, d, h5, w5, mode)                # bu5
    return total


def count_flops(cfg: EncoderConfig, resolution: int,
                mode: str = "deploy") -> dict[str, int]:
    """Closed-form per-stage FLOPs for the encoder at a square resolution."""
    if resolution % 32:
        raise ConfigError(f"resolution {resolution} must be divisible by 32")
    if mode not in ("train", "deploy"):
        raise ConfigError(f"unknown mode {mode!r}")
    h3 = w3 = resolution // 8
    h4 = w4 = resolution // 16
    h5 = w5 = resolution // 32
    stages = {
        "lse": _lse_flops(cfg, h3, w3) if cfg.enable_lse else 0,
        "aifi": _attn_flops(h5 * w5, cfg.d_model, cfg.heads, cfg.d_ff),
        "fusion": _fusion_flops(cfg, h3, w3, h4, w4, h5, w5, mode),
        "gii": 0,
    }
    if cfg.enable_gii:
        stages["gii"] = _gii_flops(cfg, h3, w3, h5, w5, mode)
        if cfg.gii_to_mid:
            stages["gii"] += _gii_flops(cfg, h4, w4, h5, w5, mode)
    stages["total"] = sum(stages.values())
    return stages


_MODULE_PREFIXES = ("lse.", "aifi.", "fusion.", "gii.")


def build_cost_report(cfg: EncoderConfig, resolution: int, mode: str = "deploy",
                      seed: int = 0) -> CostReport:
    _, store = init_encoder(cfg, Rng(seed))
    params = {p.rstrip("."): store.count(p) for p in _MODULE_PREFIXES}
    params["total"] = store.count()
    report = CostReport(resolution=resolution, mode=mode, params=params,
                        flops=count_flops(cfg, resolution, mode))
    return report


def ablation_deltas(cfg: EncoderConfig, resolution: int,
                    mode: str = "deploy") -> dict:
    """Cost deltas of the three flag combinations relative to the baseline."""
    combos = {"baseline": (False, False), "lse": (True, False),
              "gii": (False, True), "both": (True, True)}
    rows = {}
    for name, (use_lse, use_gii) in combos.items():
        c = replace(cfg, enable_lse=use_lse, enable_gii=use_gii)
        _, store = init_encoder(c, Rng(0))
        rows[name] = {"params": store.count(),
                      "gflops": count_flops(c, resolution, mode)["total"] / 1e9}
    base = rows["baseline"]
    out = {"rows": rows, "deltas": {}, "within_expected": {}, "resolution": resolution}
    for name in ("lse", "gii", "both"):
        dp = rows[name]["params"] - base["params"]
        df = rows[name]["gflops"] - base["gflops"]
        out["deltas"][name] = {"params": dp, "gflops": df}
        exp_p, exp_f = EXPECTED_DELTAS[name]
        ok_p = abs(dp - exp_p) <= DELTA_TOLERANCE * exp_p
        ok_f = abs(df * 1e9 - exp_f) <= DELTA_TOLERANCE * exp_f
        out["within_expected"][name] = {"params": ok_p, "gflops": ok_f}
    out["all_within"] = all(v["params"] and v["gflops"]
                            for v in out["within_expected"].values())
    return out


# -- wall-time micro-benchmarks -------------------------------------------------


def _timed_ops(shape: tuple[int, int, int, int]):
    rng = Rng(7)
    x = rng.tensor(shape)
    n, c, h, w = shape

    def run_conv3():
        p = conv_init(Rng(3), c, c, 3)
        return lambda: conv2d(x, p)

    def run_conv1():
        p = conv_init(Rng(3), c, c, 1)
        return lambda: conv2d(x, p)

    def run_resize():
        return lambda: bilinear_resize(x, 2 * h, 2 * w)

    def run_merge():
        return lambda: patch_merge(x, 2)

    def run_rep():
        p = rep_init(Rng(3), c, c)
        return lambda: rep_block(x, p)

    def run_mhsa():
        d = c if c % 4 == 0 else 4 * ((c // 4) + 1)
        p = attention_init(Rng(3), d, max(1, d // 32), 2 * d)
        tok = Rng(5).uniform((n, h * w, d))
        pos = sincos_pos2d(h, w, d)
        return lambda: mhsa_layer(tok, p, pos)

    def run_noop():
        return lambda: None

    return {"conv2d_3x3": run_conv3, "conv2d_1x1": run_conv1,
            "bilinear_resize": run_resize, "patch_merge": run_merge,
            "rep_block": run_rep, "mhsa_layer": run_mhsa, "noop": run_noop}


def time_op(op_id: str, shape: tuple[int, int, int, int],
            repetitions: int = 30, warmup: int = 3) -> dict:
    """Median/p95 wall time in seconds over >= 30 timed repetitions."""
    if repetitions < 30:
        raise ConfigError(f"repetitions must be >= 30, got {repetitions}")
    makers = _timed_ops(shape)
    if op_id not in makers:
        raise ConfigError(f"unknown op {op_id!r}; known: {sorted(makers)}")
    fn = makers[op_id]()
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    samples.sort()
    median = samples[len(samples) // 2] if repetitions % 2 else 0.5 * (
        samples[repetitions // 2 - 1] + samples[repetitions // 2])
    p95 = samples[min(repetitions - 1, int(np.ceil(0.95 * repetitions)) - 1)]
    return {"op": op_id, "shape": list(shape), "repetitions": repetitions,
            "median_s": median, "p95_s": p95}
