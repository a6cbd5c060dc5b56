"""Multi-head attention, FFN blocks, and the two encoder layers.

The visual encoder runs self-attention, then cross-attention with the
2D text stream, then the FFN; the depth encoder swaps the last two
stages (FFN before cross-attention). Deformable multi-scale attention
from the original design is replaced by plain self-attention at this
scale. Residual connections wrap every sublayer; there is no layer norm
and no positional encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ACTIVATIONS = ("relu", "identity")

# sublayer schedules; the FFN position is the structural difference
VISUAL_LAYER_ORDER = ("self_attention", "cross_attention", "ffn")
DEPTH_LAYER_ORDER = ("self_attention", "ffn", "cross_attention")


@dataclass(frozen=True)
class AttentionParams:
    """Projection matrices for multi-head attention over width d."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {m.shape}")
        if self.heads < 1:
            raise ShapeError(f"head count must be >= 1, got {self.heads}")
        if d % self.heads != 0:
            raise ShapeError(f"model width {d} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def create(cls, rng: np.random.Generator, d: int, heads: int,
               tied_qk: bool = False) -> "AttentionParams":
        """Seeded init; with tied_qk the query and key maps start equal,
        so attention logits begin as a similarity measure in input space."""
        w_q = T.fan_in_uniform(rng, d, d)
        w_k = Tensor(w_q.data, trainable=True) if tied_qk else T.fan_in_uniform(rng, d, d)
        return cls(w_q, w_k, T.fan_in_uniform(rng, d, d), T.fan_in_uniform(rng, d, d),
                   heads=heads)


@dataclass(frozen=True)
class FFNParams:
    """Two affine maps around a pointwise activation."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "relu"

    def __post_init__(self):
        d, d_ff = self.w1.shape
        if self.w2.shape != (d_ff, d):
            raise ShapeError(f"w2 must be ({d_ff}, {d}), got {self.w2.shape}")
        if self.b1.shape != (1, d_ff) or self.b2.shape != (1, d):
            raise ShapeError("FFN biases must be (1, hidden) and (1, width) rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def width(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def create(cls, rng: np.random.Generator, d: int, d_ff: int,
               activation: str = "relu") -> "FFNParams":
        return cls(
            w1=T.fan_in_uniform(rng, d, d_ff),
            b1=Tensor(np.zeros((1, d_ff)), trainable=True),
            w2=T.fan_in_uniform(rng, d_ff, d),
            b2=Tensor(np.zeros((1, d)), trainable=True),
            activation=activation,
        )

    @classmethod
    def identity(cls, d: int) -> "FFNParams":
        """FFN that maps x to x exactly; handy for degenerate-case checks."""
        return cls(Tensor(np.eye(d)), Tensor(np.zeros((1, d))),
                   Tensor(np.eye(d)), Tensor(np.zeros((1, d))), activation="identity")


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    h = T.add(T.matmul(x, p.w1), p.b1)
    if p.activation == "relu":
        h = T.relu(h)
    return T.add(T.matmul(h, p.w2), p.b2)


def mhca(q_in: Tensor, kv_in: Tensor, p: AttentionParams, return_weights: bool = False):
    """Multi-head cross-attention: q_in attends over kv_in.

    Per head: softmax(Q Kᵀ / sqrt(d/h)) V, heads concatenated, then the
    output projection. Projections carry no bias, so a zero kv stream
    contributes exactly zero.
    """
    d = p.width
    if q_in.shape[1] != d or kv_in.shape[1] != d:
        raise ShapeError(f"attention width mismatch: q {q_in.shape}, kv {kv_in.shape}, d={d}")
    q = T.matmul(q_in, p.w_q)
    k = T.matmul(kv_in, p.w_k)
    v = T.matmul(kv_in, p.w_v)
    dk = d // p.heads
    scale = 1.0 / math.sqrt(dk)
    if p.heads == 1:
        a = T.softmax_rows(T.mul(T.matmul(q, T.transpose(k)), scale))
        out = T.matmul(T.matmul(a, v), p.w_o)
        if return_weights:
            return out, [a]
        return out
    outs, weights = [], []
    for i in range(p.heads):
        qi = T.slice_cols(q, i * dk, (i + 1) * dk)
        ki = T.slice_cols(k, i * dk, (i + 1) * dk)
        vi = T.slice_cols(v, i * dk, (i + 1) * dk)
        a = T.softmax_rows(T.mul(T.matmul(qi, T.transpose(ki)), scale))
        outs.append(T.matmul(a, vi))
        weights.append(a)
    out = T.matmul(T.concat_cols(outs), p.w_o)
    if return_weights:
        return out, weights
    return out


def mhsa(x: Tensor, p: AttentionParams, return_weights: bool = False):
    """Multi-head self-attention: mhca with the queries and keys/values tied."""
    return mhca(x, x, p, return_weights=return_weights)


@dataclass(frozen=True)
class EncoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FFNParams

    @classmethod
    def create(cls, rng: np.random.Generator, d: int, heads: int, d_ff: int,
               tied_qk: bool = False) -> "EncoderLayerParams":
        return cls(AttentionParams.create(rng, d, heads),
                   AttentionParams.create(rng, d, heads, tied_qk=tied_qk),
                   FFNParams.create(rng, d, d_ff))


def _encoder_layer(x: Tensor, text: Tensor, p: EncoderLayerParams, order: tuple) -> Tensor:
    for stage in order:
        if stage == "self_attention":
            x = T.add(x, mhsa(x, p.self_attn))
        elif stage == "cross_attention":
            x = T.add(x, mhca(x, text, p.cross_attn))
        else:
            x = T.add(x, ffn(x, p.ffn))
    return x


def visual_encoder_layer(v2d: Tensor, t2d: Tensor, p: EncoderLayerParams) -> Tensor:
    """Refine 2D visual features under 2D text guidance."""
    return _encoder_layer(v2d, t2d, p, VISUAL_LAYER_ORDER)


def depth_encoder_layer(v3d: Tensor, t3d: Tensor, p: EncoderLayerParams) -> Tensor:
    """Refine geometric features under 3D text guidance; FFN precedes cross-attention."""
    return _encoder_layer(v3d, t3d, p, DEPTH_LAYER_ORDER)
