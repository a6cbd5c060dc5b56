"""Dimension-decoupling of generalized text features.

Two learnable query banks cross-attend over the token features to pull
out coarse 2D-specific and 3D-specific streams; a dual-branch reverse
cross-attention stage then amplifies whatever each stream does NOT share
with the other. The inverted attention map softmax(1 - A) shifts weight
onto low-similarity (dimension-discrepant) rows, and the branch's own
stream serves as both queries and values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .attention import AttentionParams, FFNParams, ffn, mhca
from .tensor import ShapeError, Tensor

SIMILARITY_MODES = ("scaled_dot", "cosine")


@dataclass(frozen=True)
class DecoupleParams:
    """Learnable queries plus per-branch attention and FFN parameters."""

    query_2d: Tensor
    query_3d: Tensor
    attn_2d: AttentionParams
    attn_3d: AttentionParams
    coarse_ffn_2d: FFNParams
    coarse_ffn_3d: FFNParams
    refine_ffn_2d: FFNParams
    refine_ffn_3d: FFNParams
    similarity: str = "scaled_dot"

    def __post_init__(self):
        if self.query_2d.shape != self.query_3d.shape:
            raise ShapeError(f"query banks differ: {self.query_2d.shape} vs {self.query_3d.shape}")
        if len(self.query_2d.shape) != 2:
            raise ShapeError("query banks must be (m, d) matrices")
        if self.similarity not in SIMILARITY_MODES:
            raise ValueError(f"unknown similarity mode {self.similarity!r}")

    @property
    def num_queries(self) -> int:
        return self.query_2d.shape[0]

    @property
    def width(self) -> int:
        return self.query_2d.shape[1]

    def swapped(self) -> "DecoupleParams":
        """The same parameters with the 2D and 3D branches exchanged."""
        return replace(
            self,
            query_2d=self.query_3d, query_3d=self.query_2d,
            attn_2d=self.attn_3d, attn_3d=self.attn_2d,
            coarse_ffn_2d=self.coarse_ffn_3d, coarse_ffn_3d=self.coarse_ffn_2d,
            refine_ffn_2d=self.refine_ffn_3d, refine_ffn_3d=self.refine_ffn_2d,
        )

    @classmethod
    def create(cls, rng: np.random.Generator, m: int = 4, d: int = 16, heads: int = 2,
               d_ff: int = 32, similarity: str = "scaled_dot",
               tied_qk: bool = False) -> "DecoupleParams":
        bound = 1.0 / math.sqrt(d)
        return cls(
            query_2d=Tensor(rng.uniform(-bound, bound, (m, d)), trainable=True),
            query_3d=Tensor(rng.uniform(-bound, bound, (m, d)), trainable=True),
            attn_2d=AttentionParams.create(rng, d, heads, tied_qk=tied_qk),
            attn_3d=AttentionParams.create(rng, d, heads, tied_qk=tied_qk),
            coarse_ffn_2d=FFNParams.create(rng, d, d_ff),
            coarse_ffn_3d=FFNParams.create(rng, d, d_ff),
            refine_ffn_2d=FFNParams.create(rng, d, d_ff),
            refine_ffn_3d=FFNParams.create(rng, d, d_ff),
            similarity=similarity,
        )


@dataclass(frozen=True)
class CoarseFeatures:
    """Intermediate streams: raw cross-attention pulls and their FFN-refined forms."""

    h_2d: Tensor
    h_3d: Tensor
    coarse_2d: Tensor
    coarse_3d: Tensor


def coarse_decouple(tokens: Tensor, p: DecoupleParams) -> CoarseFeatures:
    """First stage: query banks attend over the tokens, then residual FFNs."""
    if tokens.shape[1] != p.width:
        raise ShapeError(f"token width {tokens.shape} does not match queries {p.query_2d.shape}")
    h_2d = mhca(p.query_2d, tokens, p.attn_2d)
    h_3d = mhca(p.query_3d, tokens, p.attn_3d)
    coarse_2d = T.add(ffn(h_2d, p.coarse_ffn_2d), h_2d)
    coarse_3d = T.add(ffn(h_3d, p.coarse_ffn_3d), h_3d)
    return CoarseFeatures(h_2d, h_3d, coarse_2d, coarse_3d)


def _row_normalize(x: Tensor) -> Tensor:
    norms = T.power(T.sum_rows(T.mul(x, x)), 0.5)
    return T.div(x, T.maximum(norms, 1e-12))


def reverse_cross_attention(q_self: Tensor, k_other: Tensor, p_ffn: FFNParams,
                            similarity: str = "scaled_dot", return_weights: bool = False):
    """Amplify the rows of q_self that the other stream attends to least.

    A = q_self k_otherᵀ (scaled by 1/sqrt(d), or cosine similarity when
    configured); the inverted map softmax_rows(1 - A) re-weights q_self,
    which serves as the values, and the result is added back residually:
    out = q_self + FFN(softmax_rows(1 - A) q_self).
    """
    if q_self.shape != k_other.shape:
        raise ShapeError(f"branch shapes differ: {q_self.shape} vs {k_other.shape}")
    if similarity not in SIMILARITY_MODES:
        raise ValueError(f"unknown similarity mode {similarity!r}")
    if similarity == "cosine":
        sim = T.matmul(_row_normalize(q_self), T.transpose(_row_normalize(k_other)))
    else:
        sim = T.mul(T.matmul(q_self, T.transpose(k_other)), 1.0 / math.sqrt(q_self.shape[1]))
    inverted = T.softmax_rows(T.sub(1.0, sim))
    out = T.add(q_self, ffn(T.matmul(inverted, q_self), p_ffn))
    if return_weights:
        return out, inverted
    return out


def decouple_features(tokens: Tensor, p: DecoupleParams) -> tuple[Tensor, Tensor]:
    """Full pass: coarse decoupling then the two reverse-attention branches.

    Swapping every 2D/3D parameter pair swaps the two outputs exactly.
    """
    coarse = coarse_decouple(tokens, p)
    text_2d = reverse_cross_attention(coarse.coarse_2d, coarse.coarse_3d,
                                      p.refine_ffn_2d, p.similarity)
    text_3d = reverse_cross_attention(coarse.coarse_3d, coarse.coarse_2d,
                                      p.refine_ffn_3d, p.similarity)
    return text_2d, text_3d
