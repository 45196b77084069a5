"""Residual self-attention graph encoder over AST adjacency.

One layer:

    q, k, v   = act(P x W_q), act(P x W_k), act(P x W_v)      P = D^-1 (A + I)
    logits    = q k^T / sqrt(H) + prev
    x_attn    = act(P (softmax(logits) v) W_l)
    x_mid     = LayerNorm(x + x_attn)
    x_next    = LayerNorm(x_mid + act(P relu(P x_mid G1) G2))

``logits`` become ``prev`` for the next layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .tree import AdjacencyPack


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class RsgnnLayerParams:
    w_q: Param
    w_k: Param
    w_v: Param
    w_l: Param
    gcn1: Param
    gcn2: Param
    ln1_gain: Param
    ln1_bias: Param
    ln2_gain: Param
    ln2_bias: Param

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "RsgnnLayerParams":
        mats = {name: Param(glorot(rng, dim, dim), name=name)
                for name in ("w_q", "w_k", "w_v", "w_l", "gcn1", "gcn2")}
        norms = {}
        for i in (1, 2):
            norms[f"ln{i}_gain"] = Param(np.ones((1, dim)), name=f"ln{i}_gain")
            norms[f"ln{i}_bias"] = Param(np.zeros((1, dim)), name=f"ln{i}_bias")
        return cls(**mats, **norms)

    def named(self) -> dict[str, Param]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def dim(self) -> int:
        return self.w_q.rows


@dataclass(frozen=True)
class EncoderOptions:
    activation: str = "relu"
    self_attention: bool = True
    residual: bool = True

    def act(self, x: Tensor) -> Tensor:
        return ad.ACTIVATIONS[self.activation](x)


def _propagate(x, adj) -> Tensor:
    p = adj if isinstance(adj, np.ndarray) else adj.propagator
    return ad.matmul(p, x)


def gcn_project(x, adj: AdjacencyPack | np.ndarray, w, act=ad.relu) -> Tensor:
    """``act(D^-1 Ã x w)``."""
    x, w = ad._lift(x), ad._lift(w)
    if x.cols != w.rows:
        raise ad.ShapeError(f"gcn_project: x {x.shape} vs w {w.shape}")
    return act(ad.matmul(_propagate(x, adj), w))


def residual_attention(q, k, v, prev, adj, w_l, act=ad.relu) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(attn, x_attn, logits)``; ``logits`` is what the next layer sees as ``prev``."""
    q, k, v, prev = ad._lift(q), ad._lift(k), ad._lift(v), ad._lift(prev)
    n = q.rows
    if prev.shape != (n, n) or k.shape != q.shape or v.rows != n:
        raise ad.ShapeError("residual_attention: inconsistent shapes")
    logits = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.cols)), prev)
    attn = ad.softmax_rows(logits)
    x_attn = gcn_project(ad.matmul(attn, v), adj, w_l, act)
    return attn, x_attn, logits


def rsm_sublayer(x, adj, params: RsgnnLayerParams, prev,
                 opts: EncoderOptions = EncoderOptions()) -> tuple[Tensor, Tensor, Tensor]:
    """Attention sub-layer with external residual. Returns ``(out, new_prev, x_attn)``."""
    q = gcn_project(x, adj, params.w_q, opts.act)
    k = gcn_project(x, adj, params.w_k, opts.act)
    v = gcn_project(x, adj, params.w_v, opts.act)
    if not opts.residual:
        prev = np.zeros((q.rows, q.rows))
    _, x_attn, logits = residual_attention(q, k, v, prev, adj, params.w_l, opts.act)
    out = ad.add(x, x_attn) if opts.residual else x_attn
    return out, logits, x_attn


def gcn_sublayer(x, adj, params: RsgnnLayerParams, opts: EncoderOptions = EncoderOptions()) -> Tensor:
    inner = gcn_project(x, adj, params.gcn1, ad.relu)
    return gcn_project(inner, adj, params.gcn2, opts.act)


def rsgnn_layer(x, adj, params: RsgnnLayerParams, prev,
                opts: EncoderOptions = EncoderOptions()) -> tuple[Tensor, Tensor]:
    x = ad._lift(x)
    if opts.self_attention:
        mid, new_prev, _ = rsm_sublayer(x, adj, params, prev, opts)
        mid = ad.layer_norm_rows(mid, params.ln1_gain, params.ln1_bias)
    else:
        mid, new_prev = x, ad._lift(prev)
    out = ad.add(mid, gcn_sublayer(mid, adj, params, opts))
    return ad.layer_norm_rows(out, params.ln2_gain, params.ln2_bias), new_prev


def encode(x0_ast, adj: AdjacencyPack | np.ndarray, stack: list[RsgnnLayerParams],
           opts: EncoderOptions = EncoderOptions()) -> Tensor:
    """Run the layer stack; ``prev`` starts at zeros and is chained between layers."""
    x = ad._lift(x0_ast)
    prev: Tensor | np.ndarray = np.zeros((x.rows, x.rows))
    for params in stack:
        x, prev = rsgnn_layer(x, adj, params, prev, opts)
    return x
