"""Wiring between module parameter structs and a flat ParamStore.

A Binder either initializes fresh parameters (rng given, empty store) or
binds to entries already present (loaded checkpoint). Either way the struct
fields are reshaped views of the store arrays, so in-place optimizer updates
through the store are immediately visible to forward passes.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .ops import AttentionParams, ConvParams, RepBlockParams, _ATTN_FIELDS
from .params import ParamStore
from .tensor import Rng


class Binder:
    def __init__(self, store: ParamStore, rng: Rng | None = None):
        self.store = store
        self.rng = rng

    def array(self, name: str, shape: tuple, init) -> np.ndarray:
        if name in self.store:
            stored = self.store.value(name)
            if stored.size != int(np.prod(shape)):
                raise FormatError(
                    f"parameter {name!r} has {stored.size} elements, "
                    f"expected {int(np.prod(shape))}")
            return stored.reshape(shape)
        if self.rng is None:
            raise FormatError(f"checkpoint is missing parameter {name!r}")
        value = init()
        return self.store.add(name, value).reshape(shape)

    def _kaiming(self, shape: tuple, fan_in: int) -> np.ndarray:
        bound = float(np.sqrt(6.0 / fan_in))
        return self.rng.uniform(shape, -bound, bound)

    def conv(self, name: str, c_in: int, c_out: int, k: int, stride: int = 1,
             padding: int | None = None) -> ConvParams:
        if padding is None:
            padding = (k - 1) // 2
        w = self.array(f"{name}.w", (c_out, c_in, k, k),
                       lambda: self._kaiming((c_out, c_in, k, k), c_in * k * k))
        b = self.array(f"{name}.b", (c_out,),
                       lambda: np.zeros(c_out, dtype=np.float32))
        return ConvParams(w, b, stride, padding)

    def rep(self, name: str, c_in: int, c_out: int,
            use_identity: bool) -> RepBlockParams:
        w3 = self.array(f"{name}.w3", (c_out, c_in, 3, 3),
                        lambda: self._kaiming((c_out, c_in, 3, 3), c_in * 9))
        b3 = self.array(f"{name}.b3", (c_out,),
                        lambda: np.zeros(c_out, dtype=np.float32))
        w1 = self.array(f"{name}.w1", (c_out, c_in, 1, 1),
                        lambda: self._kaiming((c_out, c_in, 1, 1), c_in))
        b1 = self.array(f"{name}.b1", (c_out,),
                        lambda: np.zeros(c_out, dtype=np.float32))
        return RepBlockParams(ConvParams(w3, b3, 1, 1), ConvParams(w1, b1, 1, 0),
                              use_identity)

    def attention(self, name: str, d_model: int, heads: int,
                  d_ff: int) -> AttentionParams:
        shapes = {
            "wq": (d_model, d_model), "bq": (d_model,),
            "wk": (d_model, d_model), "bk": (d_model,),
            "wv": (d_model, d_model), "bv": (d_model,),
            "wo": (d_model, d_model), "bo": (d_model,),
            "w1": (d_ff, d_model), "b1": (d_ff,),
            "w2": (d_model, d_ff), "b2": (d_model,),
            "ln1_g": (d_model,), "ln1_b": (d_model,),
            "ln2_g": (d_model,), "ln2_b": (d_model,),
        }

        def init_for(field: str, shape: tuple):
            if field.startswith("w"):
                return lambda: self._kaiming(shape, shape[1])
            if field.endswith("_g"):
                return lambda: np.ones(shape, dtype=np.float32)
            return lambda: np.zeros(shape, dtype=np.float32)

        arrays = {f: self.array(f"{name}.{f}", shapes[f], init_for(f, shapes[f]))
                  for f in _ATTN_FIELDS}
        return AttentionParams(heads=heads, **arrays)
