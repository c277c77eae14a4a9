"""Pre-norm transformer layers built on the autograd core."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autograd import Tensor2, ShapeError, add, attention, gelu, layer_norm, matmul


@dataclass
class LayerParams:
    """Weights of one pre-norm block: attention sublayer + 2-layer GELU MLP."""

    ln1_g: Tensor2
    ln1_b: Tensor2
    w_qkv: Tensor2
    w_out: Tensor2
    b_out: Tensor2
    ln2_g: Tensor2
    ln2_b: Tensor2
    w_mlp1: Tensor2
    b_mlp1: Tensor2
    w_mlp2: Tensor2
    b_mlp2: Tensor2

    def tensors(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def init_layer(d_model: int, d_mlp: int, rng: np.random.Generator,
               proj_std: float, resid_std: float | None = None,
               dtype=np.float32) -> LayerParams:
    """Scaled-normal init. `resid_std` (default: proj_std) applies to the two
    projections that write into the residual stream (attention output, second
    MLP matmul), so deep unrolls keep a stable residual scale."""
    if resid_std is None:
        resid_std = proj_std

    def w(shape, std):
        return Tensor2(rng.normal(0.0, std, size=shape).astype(dtype))

    def zeros(n):
        return Tensor2(np.zeros((1, n), dtype=dtype))

    def ones(n):
        return Tensor2(np.ones((1, n), dtype=dtype))

    return LayerParams(
        ln1_g=ones(d_model), ln1_b=zeros(d_model),
        w_qkv=w((d_model, 3 * d_model), proj_std),
        w_out=w((d_model, d_model), resid_std), b_out=zeros(d_model),
        ln2_g=ones(d_model), ln2_b=zeros(d_model),
        w_mlp1=w((d_model, d_mlp), proj_std), b_mlp1=zeros(d_mlp),
        w_mlp2=w((d_mlp, d_model), resid_std), b_mlp2=zeros(d_model),
    )


def transformer_layer_forward(state: Tensor2, params: LayerParams, n_heads: int,
                              seq_len: int, causal: bool = True) -> Tensor2:
    """One pre-norm residual block over a (batch*seq, d_model) state."""
    d = state.cols
    if params.w_qkv.shape != (d, 3 * d):
        raise ShapeError(
            f"layer built for d_model={params.w_qkv.rows}, state has d_model={d}"
        )
    a = attention(layer_norm(state, params.ln1_g, params.ln1_b),
                  params.w_qkv, params.w_out, params.b_out,
                  n_heads=n_heads, seq_len=seq_len, causal=causal)
    state = state + a
    h = layer_norm(state, params.ln2_g, params.ln2_b)
    h = add(matmul(h, params.w_mlp1), params.b_mlp1)
    h = gelu(h)
    h = add(matmul(h, params.w_mlp2), params.b_mlp2)
    return state + h


def layer_param_count(d_model: int, d_mlp: int) -> int:
    """Closed-form parameter count of one block."""
    return (
        2 * 2 * d_model                         # two layernorm affines
        + d_model * 3 * d_model                 # qkv projection (bias-free)
        + d_model * d_model + d_model           # attention output projection
        + d_model * d_mlp + d_mlp               # mlp in
        + d_mlp * d_model + d_model             # mlp out
    )
